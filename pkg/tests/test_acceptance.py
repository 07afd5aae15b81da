"""Headline acceptance criteria, one PASS/FAIL line each.

Run alone with `pytest tests/test_acceptance.py -v` or `python tests/test_acceptance.py`.
"""
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from allspark import cli, tensor as T  # noqa: E402
from allspark.attention import (  # noqa: E402
    _project_bank,
    _split_query,
    allspark_forward,
    attend,
    attention_weights,
    channel_cross_attention,
    init_attention_params,
)
from allspark.data_io import decode_checkpoint, decode_tensor, encode_checkpoint, encode_tensor, generate_dataset  # noqa: E402
from allspark.gradcheck import DEFAULT_CHECKS, run_checks  # noqa: E402
from allspark.memory import ProbabilityToken, SemanticMemory, channel_class_similarity, group_channels  # noqa: E402
from allspark.metrics import csg_routing_accuracy  # noqa: E402
from allspark.model import ModelConfig, SegModel  # noqa: E402
from allspark.tensor import Tensor  # noqa: E402
from allspark.training import TrainConfig, fit, poly_lr  # noqa: E402
from conftest import ACCEPTANCE_LINES  # noqa: E402
from oracles import RingBuffer  # noqa: E402
from test_metrics import FROZEN_NOISY_ROUTING_ACCURACY  # noqa: E402

# trend protocol
TREND_SEEDS = (0, 1, 2)
TREND_LABELED, TREND_UNLABELED, TREND_VAL = 8, 256, 128
TREND_ITERATIONS = 800
TREND_CAST = 0.4  # per-image colour shift so that more labels still help; see README
TREND_GRAD_CLIP = 1.0  # same for every variant; without it some AllSpark runs saturate and die
TREND_MARGIN = 0.02
TREND_BUDGET_S = 15 * 60


def report(name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_gradient_suite():
    t0 = time.perf_counter()
    with T.precision("f64"):
        results = run_checks()
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and len(results) == len(DEFAULT_CHECKS) and dt < 120
    report("gradient suite", ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e} (< 1e-4), {dt:.1f}s (< 120s)")


def test_shape_conformance():
    rng = np.random.default_rng(0)
    d, C, K = 289, 512, 21
    h_u = rng.normal(size=(d, C)).astype(np.float32)
    p_u = ProbabilityToken(rng.dirichlet(np.ones(K), size=d))
    sim = channel_class_similarity(h_u, p_u)
    chl_label = group_channels(sim).classes
    mem = SemanticMemory(K, C, d)
    for k in range(K):
        mem.enqueue(k, rng.normal(size=(d, C)).astype(np.float32))
    h_l = Tensor(rng.normal(size=(d, C)).astype(np.float32))
    reborn, _ = allspark_forward(h_l, Tensor(h_u), mem, init_attention_params(C, rng=rng), "train")
    shapes = (sim.shape, chl_label.shape, reborn.tokens.shape)
    ok = shapes == ((21, 512), (512,), (289, 512))
    report("shape conformance", ok, f"similarity {sim.shape}, channel labels {chl_label.shape}, reborn {reborn.tokens.shape}")


def test_attention_invariants():
    worst_row = worst_perm = 0.0
    identical = True
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d, C = int(rng.integers(2, 10)), int(rng.integers(1, 7))
        heads = 2 if C % 2 == 0 and rng.random() < 0.5 else 1
        nb = int(rng.integers(1, 4))
        params = init_attention_params(C, num_heads=heads, rng=rng)
        q = Tensor(rng.normal(size=(d, C)).astype(np.float32))
        bank = Tensor(rng.normal(size=(d, nb * C)).astype(np.float32))
        k, v = _project_bank(bank, params.w_k, heads), _project_bank(bank, params.w_v, heads)
        qp = T.matmul(q, params.w_q)
        m = attention_weights(_split_query(qp, heads), k).data
        worst_row = max(worst_row, float(np.abs(m.sum(-1) - 1).max()))
        perm = rng.permutation(k.shape[-1])
        a = attend(qp, k, v, heads).data
        b = attend(qp, Tensor(k.data[..., perm]), Tensor(v.data[..., perm]), heads).data
        worst_perm = max(worst_perm, float(np.abs(a - b).max()))
        blocks = rng.permutation(nb)
        shuffled = Tensor(np.concatenate([bank.data[:, i * C:(i + 1) * C] for i in blocks], axis=1))
        worst_perm = max(worst_perm, float(np.abs(channel_cross_attention(q, bank, params).tokens.data
                                                  - channel_cross_attention(q, shuffled, params).tokens.data).max()))
        empty, full = SemanticMemory(3, C, d), SemanticMemory(3, C, d)
        for c in range(3):
            full.enqueue(c, rng.normal(size=(d, C)))
        x, _ = allspark_forward(q, None, empty, params, "infer")
        y, _ = allspark_forward(q, None, full, params, "infer")
        identical &= x.tokens.data.tobytes() == y.tokens.data.tobytes()
    ok = worst_row < 1e-6 and worst_perm < 1e-6 and identical
    report("attention invariants", ok,
           f"100 instances: row-sum err {worst_row:.1e}, permutation err {worst_perm:.1e}, inference bit-identical {identical}")


def test_memory_laws():
    mismatches = overflow = 0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        K, cap, d = int(rng.integers(1, 6)), int(rng.integers(1, 9)), 3
        mem = SemanticMemory(K, cap, d)
        ref = [RingBuffer(cap) for _ in range(K)]
        for _ in range(1000):
            k = int(rng.integers(K))
            if rng.random() < 0.7:
                col = rng.normal(size=(d, 1))
                mem.enqueue(k, col)
                ref[k].push(col[:, 0].copy())
            else:
                got, want = mem.dequeue(k), ref[k].pop()
                mismatches += (got != []) if want is None else int(not np.array_equal(got[0], want))
            overflow += sum(n > cap for n in mem.occupancy())
        for k in range(K):
            items = ref[k].items()
            expect = np.stack(items, axis=1) if items else np.zeros((d, 0))
            mismatches += int(not np.array_equal(mem.slot_array(k), expect))
    default_cap = ModelConfig(channels=32).capacity
    ok = mismatches == 0 and overflow == 0 and default_cap == 32
    report("memory laws", ok, f"50 seeds x 1000 events: {mismatches} oracle mismatches, {overflow} overflows, default capacity {default_cap} = 1 x C")


def test_csg_oracle():
    exact = csg_routing_accuracy(0.0).accuracy
    noisy = csg_routing_accuracy(0.1, seed=0).accuracy
    ok = exact == 1.0 and abs(noisy - FROZEN_NOISY_ROUTING_ACCURACY) <= 0.02
    report("csg oracle", ok, f"exact copies {exact:.2%}, noisy copies {noisy:.2%} vs frozen {FROZEN_NOISY_ROUTING_ACCURACY:.2%} (+-2 pts)")


def trend_runs(seeds=TREND_SEEDS, iterations=TREND_ITERATIONS):
    variants = {
        "supervised": (dict(allspark=False), dict(unsupervised=False)),
        "pseudo-label": (dict(allspark=False), dict()),
        "allspark": (dict(), dict(pseudo_source="memory")),
        "allspark-self": (dict(), dict(pseudo_source="self")),
    }
    scores = {k: [] for k in variants}
    for seed in seeds:
        data = generate_dataset(TREND_LABELED + TREND_UNLABELED + TREND_VAL, 32, 32, 4, seed=seed, cast=TREND_CAST)
        lab = data[:TREND_LABELED]
        unl = data[TREND_LABELED:TREND_LABELED + TREND_UNLABELED]
        val = data[TREND_LABELED + TREND_UNLABELED:]
        for name, (mkw, tkw) in variants.items():
            model = SegModel(ModelConfig(model_seed=seed, **mkw))
            cfg = TrainConfig(max_iterations=iterations, eval_interval=10**9, seed=seed, grad_clip=TREND_GRAD_CLIP, **tkw)
            # the supervised baseline sees no unlabeled images at all
            scores[name].append(fit(model, lab, unl if cfg.unsupervised else [], cfg, val).metrics.miou)
    return {k: float(np.mean(v)) for k, v in scores.items()}, scores


def test_semi_supervised_trend():
    t0 = time.process_time()
    means, per_seed = trend_runs()
    cpu = time.process_time() - t0
    sup, pl, al = means["supervised"], means["pseudo-label"], means["allspark"]
    ok = al >= pl >= sup and al - sup >= TREND_MARGIN and cpu < TREND_BUDGET_S
    fmt = ", ".join(f"{k} {v:.4f} {np.round(per_seed[k], 4).tolist()}" for k, v in means.items())
    report("semi-supervised trend", ok,
           f"mean mIoU {fmt}; need allspark >= pseudo-label >= supervised and allspark - supervised >= {TREND_MARGIN}; cpu {cpu:.0f}s")


def test_poly_schedule():
    data = generate_dataset(24, 8, 8, 3, seed=0)
    model = SegModel(ModelConfig(height=8, width=8, patch=4, channels=4, num_classes=3))
    cfg = TrainConfig(max_iterations=20, n_labeled=2, n_unlabeled=4, lr_init=0.05)
    res = fit(model, data[:4], data[4:], cfg)
    endpoints = poly_lr(0.05, 0, 20) == 0.05 and poly_lr(0.05, 20, 20) == 0.0
    ratios = [r.lr_head / r.lr for r in res.reports if r.lr > 0]
    five = len(ratios) == 20 and all(abs(x - 5.0) <= 1e-12 for x in ratios)
    report("poly schedule", endpoints and five, f"lr(0)={poly_lr(0.05, 0, 20)}, lr(I)={poly_lr(0.05, 20, 20)}, head/backbone ratio "
           f"{min(ratios):.12f}..{max(ratios):.12f} over {len(ratios)} logged steps")


def test_determinism(tmp_path, monkeypatch):
    monkeypatch.setenv("ALLSPARK_THREADS", "1")
    data = tmp_path / "data"
    assert cli.main(["gen-data", "--out", str(data), "--n", "48", "--height", "16", "--width", "16", "--seed", "5",
                     "--ratio", "1/8"]) == 0
    flags = ["--height", "16", "--width", "16", "--channels", "8", "--max-iterations", "30", "--eval-interval", "10",
             "--n-unlabeled", "4", "--n-labeled", "2", "--seed", "11"]
    codes = [cli.main(["train", "--data", str(data), "--out", str(tmp_path / n), *flags]) for n in ("a", "b")]
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("metrics.csv", "checkpoint.asck")}
    report("determinism", codes == [0, 0] and all(same.values()), f"exit codes {codes}, byte-identical {same}")


def test_format_roundtrip():
    rng = np.random.default_rng(0)
    dtypes = [np.float32, np.float64, np.uint8, np.int32]
    bad = 0
    for i in range(200):
        dt = dtypes[i % 4]
        shape = tuple(int(s) for s in rng.integers(0, 5, size=int(rng.integers(0, 5))))
        if np.issubdtype(dt, np.floating):
            a = rng.normal(size=shape).astype(dt)
            if a.size:
                a.flat[0] = [np.inf, -0.0, np.nan, 1e-40][i % 4]
        else:
            info = np.iinfo(dt)
            a = rng.integers(info.min, info.max, size=shape, endpoint=True, dtype=dt)
        b, _ = decode_tensor(encode_tensor(a))
        ck = decode_checkpoint(encode_checkpoint({f"t{i}": a, "name.é": a}))
        for x in (b, ck[f"t{i}"], ck["name.é"]):
            bad += int(x.dtype != a.dtype or x.shape != a.shape or x.tobytes() != a.tobytes())
    report("format round-trip", bad == 0, f"200 cases (f32/f64/u8/i32, rank 0-4), ASTF + checkpoint: {bad} mismatches")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
