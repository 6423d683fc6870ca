"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines inline;
they are also echoed in the terminal summary.
"""
import json
import time

import numpy as np
import pytest

from loramerge.adapter_io import AdapterSet, LoraPair, load_adapter, save_adapter
from loramerge.analysis import robustness_report, spectrum
from loramerge.cli import main
from loramerge.errors import NumericError
from loramerge.linalg import jacobi_svd, lowrank_svd, magnitude_mask, matmul
from loramerge.merge import (
    MergeConfig,
    complementary_scaling,
    compose_delta,
    cross_task_normalize,
    dare_drop,
    merge,
    prune_and_scale,
)
from loramerge.synth import geometric_adapter, load_config, run_experiment, train_all

from oracles import reference_merge, rel_fro

pytestmark = pytest.mark.acceptance

LINES = []


def verdict(label, ok, detail, seconds, limit):
    within = seconds < limit
    line = f"ACCEPTANCE {label:<3} {'PASS' if ok and within else 'FAIL'}  {detail}  [{seconds:.2f}s / {limit}s]"
    LINES.append(line)
    print("\n" + line)
    assert ok, line
    assert within, line


def lora(rng, d_out, d_in, r, name="m"):
    A = rng.uniform(-1, 1, size=(r, d_in)) / np.sqrt(d_in)
    B = rng.normal(size=(d_out, r))
    return LoraPair(name, A.astype(np.float32), B.astype(np.float32))


def sets_of(pairs):
    return [AdapterSet.from_pairs(f"task{i}", [p]) for i, p in enumerate(pairs)]


def has_dead_row(A, k):
    kept = np.where(magnitude_mask(A, k), A, 0)
    return bool(((np.abs(kept).sum(axis=1) == 0) & (np.abs(A).sum(axis=1) > 0)).any())


def test_1_scaling_restoration():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, rows, dead = 0.0, 0, 0
    for i in range(1000):
        k = (0.0, 0.3, 0.5, 0.9)[i % 4]
        r, d_in = int(rng.integers(1, 65)), int(rng.integers(1, 257))
        A = rng.normal(size=(r, d_in)).astype(np.float32)
        mask = magnitude_mask(A, k)
        if has_dead_row(A, k):
            # the ratio is undefined for a fully pruned row; it must be refused
            with pytest.raises(NumericError):
                complementary_scaling(A, mask)
            dead += 1
            continue
        s = complementary_scaling(A, mask)
        full = np.abs(A.astype(np.float64)).sum(axis=1)
        restored = s * np.abs(np.where(mask, A, 0).astype(np.float64)).sum(axis=1)
        worst = max(worst, float(np.max(np.abs(restored - full) / full)))
        rows += r
    verdict("1", worst <= 1e-6, f"max rel L1 error {worst:.2e} over {rows} rows ({dead} dead-row instances refused)",
            time.perf_counter() - t0, 10)


def test_2_normalization_partition():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(1000):
        N = (1, 2, 4, 8)[i % 4]
        r = int(rng.integers(1, 33))
        vectors = [1.0 + rng.exponential(size=r) for _ in range(N)]
        out = cross_task_normalize(vectors)
        worst = max(worst, float(np.abs(np.sum(out, axis=0) - 1).max()))
    verdict("2", worst <= 1e-6, f"max |sum - 1| {worst:.2e}", time.perf_counter() - t0, 5)


def test_3_degeneracy_chain():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        N = int(rng.integers(1, 5))
        d_out, d_in, r = int(rng.integers(4, 33)), int(rng.integers(4, 33)), int(rng.integers(1, 5))
        sets = sets_of([lora(rng, d_out, d_in, r) for _ in range(N)])
        deltas = []
        for cfg in (MergeConfig("robust", prune_rate=0.0), MergeConfig("task_arithmetic"),
                    MergeConfig("dare", drop_prob=0.0)):
            merged, _ = merge(sets, cfg)
            deltas.append(compose_delta(merged["m"]))
        worst = max(worst, rel_fro(deltas[0], deltas[1]), rel_fro(deltas[2], deltas[1]))
    p = lora(rng, 12, 10, 3)
    merged, _ = merge(sets_of([p]), MergeConfig("robust", prune_rate=0.0, lam=2.0))
    exact = np.array_equal(compose_delta(merged["m"]), np.float32(2.0) * compose_delta(p))
    verdict("3", worst <= 1e-6 and exact, f"max rel Frobenius gap {worst:.2e}; N=1 k=0 exact: {exact}",
            time.perf_counter() - t0, 10)


def test_4_reference_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst, redraws, done = 0.0, 0, 0
    while done < 100:
        N = int(rng.integers(1, 5))
        d_out, d_in = int(rng.integers(2, 65)), int(rng.integers(2, 65))
        r = int(rng.integers(1, min(8, d_out, d_in) + 1))
        k = float(rng.choice([0.0, 0.1, 0.25, 0.5, 0.75, 0.9]))
        pairs = [lora(rng, d_out, d_in, r) for _ in range(N)]
        if any(has_dead_row(p.A, k) for p in pairs):
            redraws += 1  # the procedure is undefined when a row loses all its mass
            continue
        lam = float(rng.uniform(0.5, 3.0))
        merged, _ = merge(sets_of(pairs), MergeConfig("robust", prune_rate=k, lam=lam))
        oracle = reference_merge([p.A for p in pairs], [p.B for p in pairs], k, lam)
        worst = max(worst, rel_fro(compose_delta(merged["m"]), oracle))
        done += 1
    verdict("4", worst <= 1e-6, f"max rel Frobenius error {worst:.2e} over 100 instances ({redraws} dead-row redraws)",
            time.perf_counter() - t0, 20)


def test_5_svd_suite():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    sig_err = rec_err = orth_err = 0.0
    for _ in range(200):
        d_out, d_in = int(rng.integers(1, 33)), int(rng.integers(1, 33))
        n_factors = int(rng.integers(1, 4))
        budget = min(d_out, d_in)
        factors = []
        for _ in range(n_factors):
            r = int(rng.integers(1, 5))
            if r > budget:
                break
            budget -= r
            factors.append((rng.normal(size=(d_out, r)).astype(np.float32),
                            rng.normal(size=(r, d_in)).astype(np.float32)))
        if not factors:
            continue
        dense = sum(matmul(B, A).astype(np.float64) for B, A in factors)
        lr = lowrank_svd(factors)
        # jacobi_svd takes square input; zero padding leaves the singular values unchanged
        q_pad = max(d_out, d_in)
        square = np.zeros((q_pad, q_pad))
        square[:d_out, :d_in] = dense
        full = jacobi_svd(square)
        q = len(lr.sigma)
        sig_err = max(sig_err, float(np.abs(lr.sigma - full.sigma[:q]).max() / max(1.0, full.sigma[0])))
        rec_err = max(rec_err, rel_fro(lr.reconstruct(), dense))
        for M in (lr.U, lr.V, full.U, full.V):
            M = M.astype(np.float64)
            orth_err = max(orth_err, float(np.abs(M.T @ M - np.eye(M.shape[1])).max()))
    fixture = jacobi_svd([[1, 2], [3, 4]]).sigma
    fixture_ok = bool(np.all(np.abs(fixture - [5.46499, 0.36597]) <= 1e-4))
    ok = sig_err <= 1e-6 and rec_err <= 1e-5 and orth_err <= 1e-6 and fixture_ok
    verdict("5", ok, f"sigma {sig_err:.1e}, reconstruction {rec_err:.1e}, orthonormality {orth_err:.1e}, "
            f"fixture sigma {np.round(fixture, 5).tolist()}", time.perf_counter() - t0, 30)


def test_6_tail_lift():
    t0 = time.perf_counter()
    pair = geometric_adapter(64, 64, 16, 0.5, seed=0)
    before = spectrum(pair)
    after = spectrum(prune_and_scale(pair, 0.5, "unit_scale"))
    ratio_b = before[1:].mean() / before[0]
    ratio_a = after[1:].mean() / after[0]
    multiple = after / before
    # the multiple grows toward the small end of the spectrum
    rank_idx = np.arange(16)
    rank_mult = np.argsort(np.argsort(multiple))
    spearman = float(np.corrcoef(rank_idx, rank_mult)[0, 1])
    halves = float(multiple[8:].mean()), float(multiple[:8].mean())
    ok = ratio_a > ratio_b and spearman > 0 and halves[0] > halves[1]
    verdict("6", ok, f"tail/head {ratio_b:.4f} -> {ratio_a:.4f}; multiple rank corr {spearman:.2f}, "
            f"small-half mean {halves[0]:.1f} vs large-half {halves[1]:.2f}", time.perf_counter() - t0, 5)


@pytest.fixture(scope="module")
def fig7():
    t0 = time.perf_counter()
    spec = load_config().scenarios[0]
    acc = {"task_arithmetic": [], "robust": []}
    for seed in range(5):
        _, adapters = train_all(spec, seed)
        for method in acc:
            merged, _ = merge(adapters, spec.merge_config(method))
            acc[method].append(robustness_report(adapters, merged).uniform_mean())
    means = {m: {k: float(np.mean([d[k] for d in v])) for k in v[0]} for m, v in acc.items()}
    return means, time.perf_counter() - t0


def test_7a_ta_head_stable(fig7):
    means, seconds = fig7
    ta = means["task_arithmetic"]
    verdict("7a", ta["sim_v_head"] > ta["sim_v_rest_mean"],
            f"TA right-vector similarity head {ta['sim_v_head']:.4f} vs rest {ta['sim_v_rest_mean']:.4f}", seconds, 60)


def test_7b_robust_rest_similarity(fig7):
    means, seconds = fig7
    r, t = means["robust"]["sim_v_rest_mean"], means["task_arithmetic"]["sim_v_rest_mean"]
    verdict("7b", r >= t, f"remaining-index similarity robust {r:.4f} vs TA {t:.4f}", seconds, 60)


def test_7c_robust_tail_ratio(fig7):
    means, seconds = fig7
    r, t = means["robust"]["ratio_rest_mean"], means["task_arithmetic"]["ratio_rest_mean"]
    verdict("7c", r >= t, f"tail value-ratio mean robust {r:.4f} vs TA {t:.4f}", seconds, 60)


def test_8_merge_quality():
    t0 = time.perf_counter()
    cfg = load_config()
    table = run_experiment(cfg.scenarios, ["robust", "task_arithmetic"], [0, 1, 2, 3, 4])
    r, t = table.mean("robust"), table.mean("task_arithmetic")
    ok = not table.failures and r <= t
    verdict("8", ok, f"mean rel error robust {r:.4f} vs TA {t:.4f} ({len(table.failures)} failed cells)",
            time.perf_counter() - t0, 60)


def test_9_dare_contract():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    X = rng.normal(size=(100, 100)).astype(np.float32)
    out, keep = dare_drop(X, 0.5, 0, "task0", "m.lora_A.weight")
    survivors = np.array_equal(out[keep], (X[keep].astype(np.float64) / 0.5).astype(np.float32))
    dropped = bool((out[~keep] == 0).all())
    frac = float(keep.mean())
    sets = sets_of([lora(rng, 12, 10, 3) for _ in range(3)])
    d, _ = merge(sets, MergeConfig("dare", drop_prob=0.0))
    t, _ = merge(sets, MergeConfig("task_arithmetic"))
    same = d["m"] == t["m"]
    ok = survivors and dropped and abs(frac - 0.5) <= 0.03 and same
    verdict("9", ok, f"survivors exact {survivors}, dropped zero {dropped}, kept fraction {frac:.4f}, "
            f"p=0 bit-equal to TA {same}", time.perf_counter() - t0, 5)


def test_10_format_round_trip(tmp_path, capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(10)
    s = AdapterSet.from_pairs("t", [lora(rng, 64, 64, 16, f"layers.{i}.q") for i in range(3)])
    a, b = tmp_path / "a.safetensors", tmp_path / "b.safetensors"
    save_adapter(s, a)
    save_adapter(load_adapter(a), b)
    round_trip = load_adapter(a) == s and a.read_bytes() == b.read_bytes()

    bad = tmp_path / "bad.safetensors"
    header = b'{"p.lora_A.weight": {"dtype": "F32", "shape": [1, 1] "data_offsets": [0, 4]}}'
    bad.write_bytes(len(header).to_bytes(8, "little") + header + b"\0" * 4)
    orphan = tmp_path / "orphan.safetensors"
    header = json.dumps({"p.lora_A.weight": {"dtype": "F32", "shape": [1, 1], "data_offsets": [0, 4]}}).encode()
    orphan.write_bytes(len(header).to_bytes(8, "little") + header + b"\0" * 4)
    out = tmp_path / "m.safetensors"
    capsys.readouterr()
    code_bad = main(["merge", str(bad), "--out", str(out)])
    err_bad = capsys.readouterr().err
    code_orphan = main(["merge", str(orphan), "--out", str(out)])
    err_orphan = capsys.readouterr().err
    named = "byte offset" in err_bad and "bad.safetensors" in err_bad and "'p'" in err_orphan
    ok = round_trip and code_bad == 3 and code_orphan == 2 and named and not out.exists()
    verdict("10", ok, f"round trip bit-exact {round_trip}; malformed header exit {code_bad}, "
            f"orphan exit {code_orphan}, offenders named {named}", time.perf_counter() - t0, 5)
