"""Finite-difference verification of every differentiable op and of the full
encode -> AllSpark(train) -> decode -> loss composite. f64 only."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionParams, channel_cross_attention
from .data_io import generate_dataset, stack_batch
from .errors import ConfigError, ContractError
from .model import ModelConfig, SegModel
from .tensor import Tensor
from .training import pseudo_label, total_loss

TOLERANCE = 1e-4
DEFAULT_DIMS = {"H": 8, "W": 8, "patch": 4, "C": 4, "K": 3}

# a check builds (loss closure, tensors to differentiate) from a seeded rng
Check = Callable[[np.random.Generator, dict], tuple[Callable[[], Tensor], Sequence[Tensor]]]


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < TOLERANCE)


def parse_dims(text: str) -> dict:
    dims = dict(DEFAULT_DIMS)
    for part in filter(None, (p.strip() for p in text.split(","))):
        key, sep, val = part.partition("=")
        if not sep or key not in dims:
            raise ConfigError(f"bad --dims entry {part!r}; keys are {sorted(dims)}")
        try:
            dims[key] = int(val)
        except ValueError:
            raise ConfigError(f"bad --dims value {part!r}") from None
    return dims


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _fixed_weights(shape, seed):
    return Tensor(np.random.default_rng(seed).normal(size=shape))


def _check_matmul(rng, dims):
    a, b = _leaf(rng, 2, 4, 3), _leaf(rng, 3, 5)
    w = _fixed_weights((2, 4, 5), 1)
    return (lambda: T.sum(T.mul(T.matmul(a, b), w))), [a, b]


def _check_add(rng, dims):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 3)
    w = _fixed_weights((4, 3), 2)
    return (lambda: T.sum(T.mul(T.add(a, b), w))), [a, b]


def _check_sub(rng, dims):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    w = _fixed_weights((4, 3), 3)
    return (lambda: T.sum(T.mul(T.sub(a, b), w))), [a, b]


def _check_mul(rng, dims):
    a, b = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    return (lambda: T.sum(T.mul(T.mul(a, b), 0.7))), [a, b]


def _shape_op(op, shape, out_shape):
    def build(rng, dims):
        x = _leaf(rng, *shape)
        w = _fixed_weights(out_shape, 4)
        return (lambda: T.sum(T.mul(op(x), w))), [x]

    return build


def _check_concat(rng, dims):
    a, b = _leaf(rng, 3, 2), _leaf(rng, 3, 4)
    w = _fixed_weights((3, 6), 5)
    return (lambda: T.sum(T.mul(T.concat([a, b]), w))), [a, b]


def _check_relu(rng, dims):
    # keep entries away from the kink
    x = Tensor(rng.choice([-1, 1], size=(4, 3)) * rng.uniform(0.1, 1.0, size=(4, 3)), requires_grad=True)
    w = _fixed_weights((4, 3), 6)
    return (lambda: T.sum(T.mul(T.relu(x), w))), [x]


def _check_cross_entropy(rng, dims):
    z = _leaf(rng, 6, dims["K"])
    t = rng.integers(0, dims["K"], size=6)
    t[1] = 255
    return (lambda: T.cross_entropy_mean(T.softmax_rows(z), t, ignore_index=255)), [z]


def _check_cross_entropy_softmax_linear(rng, dims):
    x = Tensor(rng.normal(size=(5, 3)))
    W = _leaf(rng, 3, dims["K"])
    t = rng.integers(0, dims["K"], size=5)
    return (lambda: T.cross_entropy_mean(T.softmax_rows(T.matmul(x, W)), t)), [W]


def _check_attention(rng, dims):
    d = (dims["H"] // dims["patch"]) * (dims["W"] // dims["patch"])
    C = dims["C"]
    q = _leaf(rng, d, C)
    bank = _leaf(rng, d, C + 2)  # exercises block padding
    Cp = 2 * C
    params = AttentionParams(_leaf(rng, C, Cp), _leaf(rng, C, Cp), _leaf(rng, C, Cp), _leaf(rng, Cp, C), num_heads=2)
    w = _fixed_weights((d, C), 7)
    f = lambda: T.sum(T.mul(channel_cross_attention(q, bank, params).tokens, w))  # noqa: E731
    return f, [q, bank, *params.tensors().values()]


def composite_model(dims: dict, seed: int = 0):
    """Toy model + primed memory + batches for the full-pipeline check."""
    cfg = ModelConfig(
        height=dims["H"], width=dims["W"], patch=dims["patch"], channels=dims["C"], num_classes=dims["K"],
        depth=1, residual=True, model_seed=seed,
    )
    model = SegModel(cfg)
    model.cast()
    data = generate_dataset(4, dims["H"], dims["W"], dims["K"], seed=seed)
    x, y = stack_batch(data)
    x = x.astype(np.float64)
    memory = model.new_memory(seed)
    with T.no_grad():
        for _ in range(2):
            model.forward_train(x[:2], x[2:], memory)
    return model, memory, x, y


def _check_composite(rng, dims, warm: bool = True):
    model, memory, x, y = composite_model(dims, int(rng.integers(1000)))
    if not warm:
        memory.clear()
    with T.no_grad():
        _, pu, _ = model.forward_train(x[:2], x[2:], memory, update_memory=False)
    y_hat = pseudo_label(pu)  # held fixed: targets are constants to the gradient

    def f():
        pl, pu, _ = model.forward_train(x[:2], x[2:], memory, update_memory=False)
        return total_loss(pl, y[:2], pu, y_hat)[0]

    return f, list(model.params.values())


DEFAULT_CHECKS: dict[str, Check] = {
    "matmul": _check_matmul,
    "add": _check_add,
    "sub": _check_sub,
    "mul": _check_mul,
    "sum": _shape_op(lambda x: T.mul(T.sum(x), 1.0), (3, 4), ()),
    "mean": _shape_op(T.mean, (3, 4), ()),
    "mean_tokens": _shape_op(T.mean_tokens, (2, 3, 4), (2, 1, 4)),
    "transpose": _shape_op(T.transpose, (2, 3, 4), (2, 4, 3)),
    "permute": _shape_op(lambda x: T.permute(x, (2, 0, 1)), (2, 3, 4), (4, 2, 3)),
    "reshape": _shape_op(lambda x: T.reshape(x, (4, 6)), (2, 3, 4), (4, 6)),
    "concat": _check_concat,
    "tanh": _shape_op(T.tanh, (4, 3), (4, 3)),
    "relu": _check_relu,
    "softmax_rows": _shape_op(T.softmax_rows, (4, 5), (4, 5)),
    "instance_norm_rows": _shape_op(T.instance_norm_rows, (4, 5), (4, 5)),
    "cross_entropy_mean": _check_cross_entropy,
    "ce_softmax_linear": _check_cross_entropy_softmax_linear,
    "channel_cross_attention": _check_attention,
    "composite_warmup_bank": lambda rng, dims: _check_composite(rng, dims, warm=False),
    "composite_memory_bank": _check_composite,
}


def run_checks(checks: dict[str, Check] | None = None, dims: dict | None = None, seed: int = 0, h: float = 1e-5) -> list[CheckResult]:
    if T.get_precision() != "f64":
        raise ContractError("gradient checks run in f64 mode only")
    checks = DEFAULT_CHECKS if checks is None else checks
    dims = dict(DEFAULT_DIMS if dims is None else dims)
    results = []
    for i, (name, build) in enumerate(checks.items()):
        t0 = time.perf_counter()
        loss_fn, params = build(np.random.default_rng([seed, i]), dims)
        errs = T.check_gradients(loss_fn, params, h)
        results.append(CheckResult(name, max(errs), time.perf_counter() - t0))
    return results


def format_table(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op'.ljust(width)}  max_rel_err  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.max_rel_error:11.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
