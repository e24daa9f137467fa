"""Acceptance gate: each criterion asserts its threshold and logs one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines are printed in the
terminal summary. ``python tests/test_acceptance.py`` prints them directly.
"""
import time
from functools import lru_cache

import numpy as np
import pytest
from scipy import stats

from fedadapt.adaptation import (
    DEFAULT_DECAY,
    AdaptMode,
    DenseNoisy,
    SamplingPolicy,
    UpdateHistogram,
    decay_selected,
    softmax_sample,
)
from fedadapt.experiments import ExperimentConfig, pretrained_weights, run_config, run_experiment
from fedadapt.federation import ActiveClient, FedMode
from fedadapt.model import ModelSpec
from fedadapt.oracles import (
    aggregation_oracle,
    degeneracy_oracle,
    gradient_oracle,
    partial_aggregation_example,
)
from fedadapt.simnet import traffic_report
from fedadapt.streams import FrameStream, SequenceSpec, make_domain
from fedadapt.wire import encode

RESULTS = []
SPEC = ModelSpec()
BENCH_SEEDS = range(5)


def report(n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def small_listener(frames):
    return {"segments": [{"domain": "night", "frames": frames, "difficulty": "hard"}]}


@lru_cache(maxsize=None)
def benchmark():
    """Mean listener D1 over the benchmark seeds, keyed by setting."""
    acc = {}
    for seed in BENCH_SEEDS:
        base = ExperimentConfig(seed=seed)
        w0 = pretrained_weights(base)
        runs = {"none": base.with_overrides(mode="none"),
                "fedmad3": base.with_overrides(mode="fedmad")}
        for n in (1, 3, 6):
            runs[f"fedfull{n}"] = base.with_overrides(mode="fedfull", **{"active.count": n})
        for key, cfg in runs.items():
            acc.setdefault(key, []).append(run_config(cfg, w0=w0).summary.metrics["all"].d1)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def test_01_gradient_oracle():
    r = gradient_oracle(instances=100, seed=0)
    report(1, r.failures == 0 and r.seconds < 5.0,
           f"{r.failures} of {r.coordinates} coordinates outside rel 1e-4/abs 1e-6 "
           f"over {r.instances} instances in {r.seconds:.2f}s (limit 5s)")


def test_02_aggregation_oracle():
    ulps = aggregation_oracle(sizes=(1, 2, 3, 5))
    before, after, expected, keys = partial_aggregation_example()
    untouched = all(after.blocks[i].tobytes() == before.blocks[i].tobytes() for i in (0, 2, 4))
    ok = all(u <= 1 for u in ulps.values()) and after == expected and untouched
    report(2, ok, f"max ulp per client count {ulps}; partial example blocks {{1,1,3}} -> "
                  f"aggregated {[k[0] for k in keys]}, others untouched={untouched}")


def test_03_degeneracy():
    w0 = pretrained_weights(ExperimentConfig(seed=0, warmup={"steps": 2000}))
    r = degeneracy_oracle(seed=0, frames=1000, w0=w0)
    report(3, r.max_abs_diff <= 1e-6,
           f"max |EPE_fed - EPE_single| = {r.max_abs_diff:.3g} over {r.frames} frames (limit 1e-6)")


def test_04_traffic_exactness():
    short = small_listener(600)
    full = run_config(ExperimentConfig(mode="fedfull", warmup={"steps": 0}, listener=short))
    L = full.ledger
    full_ok = (set(L.upload_sizes) == {5318} and L.bytes_to_server == 5318 * L.uploads
               and L.bytes_to_client == 5318 * L.dispatches)

    mad = run_config(ExperimentConfig(mode="fedmad", warmup={"steps": 0}, listener=short))
    M = mad.ledger
    allowed = {26 + 4 * SPEC.block_param_count(j) for j in range(SPEC.num_blocks)}
    dispatch_closed = sum(
        20 + sum(6 + 4 * SPEC.block_param_count(int(b.split(":")[0])) for b in r.blocks.split())
        for r in M.rounds)
    mad_ok = (set(M.upload_sizes) <= allowed and M.bytes_to_server == sum(M.upload_sizes)
              and M.bytes_to_client == dispatch_closed)

    # message level: the encoded size follows the sampled block exactly
    dom = make_domain("city", 0)
    client = ActiveClient(1, pretrained_weights(ExperimentConfig(warmup={"steps": 0})),
                          FrameStream(SequenceSpec((("city", 50),)), {"city": dom}, 0, loop=True),
                          fed_mode=FedMode.FEDMAD, sup=DenseNoisy(0.5), rng=0)
    per_msg_ok = True
    for _ in range(40):
        msg = None
        while msg is None:
            msg = client.step()
        per_msg_ok &= len(encode(msg)) == 26 + 4 * SPEC.block_param_count(client.last_sampled)
    report(4, full_ok and mad_ok and per_msg_ok,
           f"FedFULL {L.uploads} uploads all 5318 B={full_ok}; FedMAD {M.uploads} uploads sized "
           f"26+4*count(j)={mad_ok and per_msg_ok}; ledger totals closed-form")


def test_05_traffic_scaling():
    base = ExperimentConfig(warmup={"steps": 0}, listener=small_listener(1500))
    rates = [run_config(base.with_overrides(T=T)).summary.mbps_to_server for T in (1000, 100, 10)]
    t_ok = rates[0] < rates[1] < rates[2]

    full = run_config(base.with_overrides(mode="fedfull")).ledger
    mad = run_config(base.with_overrides(mode="fedmad")).ledger
    mad_ok = all(m.bytes_to_server < f.bytes_to_server for m, f in zip(mad.rounds, full.rounds))

    per = {n: traffic_report(run_config(base.with_overrides(**{"active.count": n})).ledger)
           .mb_per_update_to_client for n in (1, 3, 6, 9)}
    const_ok = len(set(per.values())) == 1
    report(5, t_ok and mad_ok and const_ok,
           f"to-server MB/s for T=1000/100/10: {[f'{r:.3g}' for r in rates]}; FedMAD<FedFULL every "
           f"round={mad_ok}; FedFULL to-client MB/update over |A|=1,3,6,9: {sorted(set(per.values()))}")


def test_06_sampling_law():
    pvals = []
    for counts in ([1.0, 0.0], [10.0, 10.0, 10.0, 10.0, 9.0]):
        H = UpdateHistogram(counts)
        rng = np.random.default_rng(2024)
        n = 100_000
        obs = np.bincount([softmax_sample(H, SamplingPolicy.COUNT_SOFTMAX, rng) for _ in range(n)],
                          minlength=len(counts))
        pvals.append(float(stats.chisquare(obs, n * H.probabilities()).pvalue))
    report(6, all(p > 0.01 for p in pvals),
           f"chi-square p-values {[round(p, 4) for p in pvals]} for H=[1,0] and [10,10,10,10,9] "
           f"(alpha 0.01)")


def test_07_decay_law():
    rng = np.random.default_rng(7)
    ok = True
    for _ in range(2000):
        H = UpdateHistogram(rng.uniform(0, 50, rng.integers(1, 8)))
        j = int(rng.integers(H.counts.size))
        after = decay_selected(H, j)
        ok &= after.counts[j] == DEFAULT_DECAY * H.counts[j]
        ok &= np.array_equal(np.delete(after.counts, j), np.delete(H.counts, j))
    # through the client protocol: pre-sample histogram is all 10, then H[j] = 9
    dom = make_domain("city", 0)
    client = ActiveClient(1, pretrained_weights(ExperimentConfig(warmup={"steps": 0})),
                          FrameStream(SequenceSpec((("city", 50),)), {"city": dom}, 0, loop=True),
                          fed_mode=FedMode.FEDMAD, sup=DenseNoisy(0.5), rng=1)
    while client.step() is None:
        pass
    expected = [10.0] * 5
    expected[client.last_sampled] = 9.0
    ok &= list(client.histogram.counts) == expected
    report(7, bool(ok), f"H[j] == 0.9*H[j] exactly on 2000 random selections; client window "
                        f"gives {client.histogram.counts.tolist()}")


def test_08_adaptation_benefit():
    start = time.perf_counter()
    full_tail, none_tail = [], []
    for seed in range(5):
        cfg = ExperimentConfig(seed=seed, mode="full", listener={
            "segments": [{"domain": "city", "frames": 5000, "difficulty": "easy"}]})
        w0 = pretrained_weights(cfg)
        for mode, sink in (("full", full_tail), ("none", none_tail)):
            recs = run_config(cfg.with_overrides(mode=mode), w0=w0).records
            sink.append(np.mean([r.epe for r in recs[-500:]]))
    elapsed = time.perf_counter() - start
    gain = 1 - np.mean(full_tail) / np.mean(none_tail)
    report(8, gain >= 0.30 and elapsed < 30.0,
           f"FULL last-500 EPE {np.mean(full_tail):.3f} vs NONE {np.mean(none_tail):.3f}: "
           f"{100 * gain:.1f}% lower (need >= 30%), {elapsed:.1f}s (limit 30s)")


def test_09_federated_benefit():
    b = benchmark()
    rel = (b["fedmad3"] - b["fedfull3"]) / b["fedfull3"]
    report(9, b["fedfull3"] < b["none"] and abs(rel) <= 0.15,
           f"mean D1 over {len(BENCH_SEEDS)} seeds: NONE {b['none']:.2f}, FedFULL {b['fedfull3']:.2f}, "
           f"FedMAD {b['fedmad3']:.2f} ({100 * rel:+.1f}% vs FedFULL, limit 15%)")


def test_10_pre_update_measurement():
    base = ExperimentConfig(seed=3, warmup={"steps": 500}, listener=small_listener(50))
    w0 = pretrained_weights(base)
    firsts = {m: run_config(base.with_overrides(mode=m), w0=w0).records[0]
              for m in ("none", "full", "mad", "fedfull")}
    epes = {m: r.epe for m, r in firsts.items()}
    report(10, len(set(epes.values())) == 1, f"frame-0 EPE by mode {epes}")


def test_11_engine_equivalence(tmp_path):
    cfg = ExperimentConfig(mode="fedmad", warmup={"steps": 500}, listener=small_listener(800))
    run_experiment(cfg, tmp_path / "ref", engine="reference")
    run_experiment(cfg, tmp_path / "par", engine="parallel")
    same = {n: (tmp_path / "ref" / n).read_bytes() == (tmp_path / "par" / n).read_bytes()
            for n in ("frames.csv", "summary.csv", "traffic.csv")}
    report(11, all(same.values()), f"byte-identical outputs, 3-client FedMAD: {same}")


def test_12_client_count_trend():
    b = benchmark()
    series = [b["fedfull1"], b["fedfull3"], b["fedfull6"]]
    rises = [later - earlier for earlier, later in zip(series, series[1:]) if later > earlier]
    ok = len(rises) == 0 or (len(rises) == 1 and rises[0] <= 0.5)
    report(12, ok, f"FedFULL listener D1 for |A|=1,3,6: {[round(x, 2) for x in series]} "
                   f"(inversions {[round(r, 2) for r in rises]}, allowed one <= 0.5)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
