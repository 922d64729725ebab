"""Central finite-difference checks of every differentiable op and composite block.

Each case builds its leaves and a scalar function from a seed.  The analytic
gradient is taken from the tape in the precision under test.  The numeric
reference is always computed in 64-bit at exactly the same leaf values, so the
32-bit check measures the error of the 32-bit analytic gradient rather than
the noise of 32-bit differencing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .autograd import Tape, Tensor, get_dtype, precision
from .losses import LossConfig, charbonnier, frequency_loss, loss_terms, maae_loss, psnr, ssim
from .lut import LutConfig, LutNetwork, lut_forward
from .maae import (CgbBlock, MabBlock, MaaeConfig, MacLookup, ModelConfig, SamBlock,
                   cgb_forward, mab_forward, model_forward, sam_forward)
from .nn import Module

TOL = {"float32": 1e-3, "float64": 1e-6}
STEP = 1e-6
FULL_SWEEP_MAX = 24
SAMPLED_COORDS = 6
DIRECTIONS = 2

Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], object]]]


@dataclass
class CaseResult:
    name: str
    instances: int
    max_rel: dict[str, float]

    @property
    def passed(self) -> bool:
        return all(self.max_rel[p] <= TOL[p] for p in self.max_rel)


# ---------------------------------------------------------------- harness

def _leaf(rng, shape, lo=-1.0, hi=1.0, away: float = 0.0) -> Tensor:
    x = rng.uniform(lo, hi, size=shape)
    if away:
        x = np.sign(x) * (away + np.abs(x))
        x[x == 0] = away
    return Tensor(x.astype(get_dtype()), requires_grad=True)


def _module_leaves(module: Module, rng, jitter: float = 0.1) -> list[Tensor]:
    """Parameters of ``module``, jittered so zero-initialized parts are exercised."""
    params = module.parameters()
    for p in params:
        p.data = (p.data + jitter * rng.standard_normal(p.shape)).astype(p.dtype)
    return params


def _scalarize(out, weights: dict, seed: int) -> Tensor:
    outs = out if isinstance(out, (list, tuple)) else [out]
    flat = []
    for o in outs:
        flat.extend(o if isinstance(o, (list, tuple)) else [o])
    total = None
    wrng = np.random.default_rng(seed + 7919)
    for i, o in enumerate(flat):
        if i not in weights:
            weights[i] = wrng.standard_normal(o.shape)
        term = ops.sum(o * Tensor(weights[i].astype(o.dtype))) if o.size > 1 else o
        total = term if total is None else total + term
    return total


def _build(builder: Builder, seed: int, prec: str, weights: dict):
    with precision(prec):
        leaves, fn = builder(np.random.default_rng(seed))
    return leaves, (lambda: _scalarize(fn(), weights, seed))


def _probes(leaves: list[Tensor], rng, joint: int = 0) -> list[dict[int, np.ndarray]]:
    """Perturbation directions, each a map from leaf index to a direction for that leaf.

    Small leaves get every unit coordinate; larger ones a sample of coordinates
    plus random directions.  ``joint > 0`` instead draws that many random
    directions spanning all leaves at once, which keeps whole-model checks cheap.
    """
    if joint:
        probes = []
        for _ in range(joint):
            dirs = {i: rng.standard_normal(leaf.shape) for i, leaf in enumerate(leaves)}
            norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs.values()))
            probes.append({i: d / norm for i, d in dirs.items()})
        return probes
    probes = []
    for i, leaf in enumerate(leaves):
        n = leaf.size
        if n <= FULL_SWEEP_MAX:
            coords = range(n)
            dirs = []
        else:
            coords = rng.choice(n, size=SAMPLED_COORDS, replace=False)
            dirs = [rng.standard_normal(n) for _ in range(DIRECTIONS)]
        for c in coords:
            d = np.zeros(n)
            d[c] = 1.0
            probes.append({i: d.reshape(leaf.shape)})
        for d in dirs:
            probes.append({i: (d / np.linalg.norm(d)).reshape(leaf.shape)})
    return probes


def check_case(builder: Builder, seed: int, prec: str, joint: int = 0) -> float:
    """Relative error ``|a - n| / max(|a|, |n|)`` over all probe directional derivatives."""
    weights: dict = {}
    leaves, fn = _build(builder, seed, prec, weights)
    with precision(prec):
        with Tape() as tape:
            loss = fn()
            grads = tape.backward(loss, leaves)

    ref_leaves, ref_fn = _build(builder, seed, "float64", weights)
    for r, l in zip(ref_leaves, leaves):
        r.data = l.data.astype(np.float64)

    probes = _probes(leaves, np.random.default_rng(seed + 104729), joint)
    analytic = np.array([sum(float(np.sum(grads[i].astype(np.float64) * d)) for i, d in pr.items())
                         for pr in probes])
    numeric = np.empty(len(probes))
    with precision("float64"):
        for k, pr in enumerate(probes):
            base = {i: ref_leaves[i].data for i in pr}
            vals = []
            for sign in (1.0, -1.0):
                for i, d in pr.items():
                    ref_leaves[i].data = base[i] + sign * STEP * d
                vals.append(ref_fn().item())
            for i in pr:
                ref_leaves[i].data = base[i]
            numeric[k] = (vals[0] - vals[1]) / (2 * STEP)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def run_case(name: str, builder: Builder, instances: int = 5,
             precisions=("float64", "float32"), base_seed: int = 0, joint: int = 0) -> CaseResult:
    worst = {}
    for prec in precisions:
        worst[prec] = max(check_case(builder, base_seed + k, prec, joint) for k in range(instances))
    return CaseResult(name, instances, worst)


# ---------------------------------------------------------------- op cases

def _unary(op, away=0.0, lo=-1.0, hi=1.0, shape=(3, 4)):
    def build(rng):
        x = _leaf(rng, shape, lo, hi, away)
        return [x], lambda: op(x)
    return build


def _binary(op, b_lo=-1.0, b_hi=1.0, b_away=0.0, shape_a=(3, 4), shape_b=(3, 4)):
    def build(rng):
        a = _leaf(rng, shape_a)
        b = _leaf(rng, shape_b, b_lo, b_hi, b_away)
        return [a, b], lambda: op(a, b)
    return build


def _conv(stride, padding, kernel=3):
    def build(rng):
        x = _leaf(rng, (2, 6, 6))
        k = _leaf(rng, (3, 2, kernel, kernel))
        b = _leaf(rng, (3,))
        return [x, k, b], lambda: ops.conv2d(x, k, b, stride=stride, padding=padding)
    return build


def _layer_norm(rng):
    x = _leaf(rng, (4, 3, 5))
    g = _leaf(rng, (4,))
    b = _leaf(rng, (4,))
    return [x, g, b], lambda: ops.layer_norm(x, g, b, axis=0)


def _linear(rng):
    x = _leaf(rng, (5, 3))
    w = _leaf(rng, (3, 4))
    b = _leaf(rng, (4,))
    return [x, w, b], lambda: ops.linear(x, w, b)


def _partition(mode):
    def build(rng):
        x = _leaf(rng, (2, 4, 8))
        return [x], lambda: ops.unpartition(ops.partition(x, mode, 2) * ops.partition(x, mode, 2),
                                            mode, 2, 4, 8)
    return build


def _lut(rng):
    net = LutNetwork(LutConfig(hidden=(8, 8), activation="gelu", cond_dim=2), rng)
    px = _leaf(rng, (6, 3), 0.0, 1.0)
    cond = np.array([0.3, 0.7])
    return [px, *_module_leaves(net, rng)], lambda: lut_forward(net, px, cond)


OP_CASES: dict[str, Builder] = {
    "add": _binary(ops.add, shape_b=(4,)),
    "sub": _binary(ops.sub, shape_b=(3, 1)),
    "mul": _binary(ops.mul),
    "div": _binary(ops.div, b_away=0.5),
    "neg": _unary(ops.neg),
    "power": _unary(lambda x: ops.power(x, 2.5), lo=0.2, hi=1.5),
    "sqrt": _unary(ops.sqrt, lo=0.2, hi=2.0),
    "exp": _unary(ops.exp),
    "log": _unary(ops.log, lo=0.2, hi=2.0),
    "abs": _unary(ops.abs, away=0.05),
    "clip": _unary(lambda x: ops.clip(x, -0.5, 0.5), lo=-2, hi=2, away=0.0),
    "sigmoid": _unary(ops.sigmoid, lo=-4, hi=4),
    "relu": _unary(ops.relu, away=0.05),
    "gelu": _unary(ops.gelu, lo=-3, hi=3),
    "sum": _unary(lambda x: ops.sum(x, axis=1)),
    "mean": _unary(lambda x: ops.mean(x, axis=0, keepdims=True)),
    "reshape": _unary(lambda x: ops.reshape(x, (4, 3)) * ops.reshape(x, (4, 3))),
    "transpose": _unary(lambda x: ops.transpose(x, (1, 0)) * ops.transpose(x, (1, 0))),
    "concat": _binary(lambda a, b: ops.concat([a, b * b], axis=0), shape_b=(2, 4)),
    "getitem": _unary(lambda x: ops.getitem(x, (slice(1, 3), [0, 2, 2]))),
    "split": _unary(lambda x: ops.split(x, 2, axis=1)[0] * ops.split(x, 2, axis=1)[1]),
    "matmul": _binary(ops.matmul, shape_a=(2, 3, 4), shape_b=(4, 5)),
    "linear": _linear,
    "conv2d_same": _conv(1, "same"),
    "conv2d_valid": _conv(1, "valid"),
    "conv2d_stride2": _conv(2, "same"),
    "conv2d_1x1": _conv(1, "same", kernel=1),
    "layer_norm": _layer_norm,
    "fft2d": _unary(lambda x: ops.fft2d(x), shape=(2, 4, 8)),
    "bilinear_down": _unary(lambda x: ops.bilinear_resize(x, 4, 4), shape=(2, 8, 8)),
    "bilinear_up": _unary(lambda x: ops.bilinear_resize(x, 6, 8), shape=(2, 3, 4)),
    "partition_block": _partition("block"),
    "partition_grid": _partition("grid"),
    "lut_forward": _lut,
}


# ---------------------------------------------------------------- loss cases

def _image(rng, shape=(3, 16, 16)):
    return _leaf(rng, shape, 0.05, 0.95)


def _loss_case(fn):
    def build(rng):
        o = _image(rng)
        t = Tensor(rng.uniform(0.05, 0.95, size=o.shape).astype(get_dtype()))
        return [o], lambda: fn(o, t)
    return build


def _maae_loss(rng):
    o1 = _image(rng)
    o2 = _image(rng, (3, 8, 8))
    t = Tensor(rng.uniform(0.05, 0.95, size=(3, 16, 16)).astype(get_dtype()))
    return [o1, o2], lambda: maae_loss([[o1, o2]], t)


LOSS_CASES: dict[str, Builder] = {
    "charbonnier": _loss_case(charbonnier),
    "frequency_loss": _loss_case(frequency_loss),
    "psnr": _loss_case(psnr),
    "ssim": _loss_case(ssim),
    "maae_loss": _maae_loss,
}


# ---------------------------------------------------------------- block cases

def _tiny_maae() -> MaaeConfig:
    return MaaeConfig(stages=2, scales=2, channels=4, block_size=2, grid_size=2, mlp_expansion=2.0)


def _mab(rng):
    blk = MabBlock(rng, 4, _tiny_maae())
    x = _leaf(rng, (4, 4, 4))
    return [x, *_module_leaves(blk, rng)], lambda: mab_forward(x, blk)


def _cgb(rng):
    blk = CgbBlock(rng, 4, _tiny_maae())
    x = _leaf(rng, (4, 4, 4))
    y = _leaf(rng, (4, 4, 4))
    return [x, y, *_module_leaves(blk, rng)], lambda: cgb_forward(x, y, blk)


def _sam(rng):
    blk = SamBlock(rng, 4)
    f = _leaf(rng, (4, 4, 4))
    img = _leaf(rng, (3, 4, 4), 0.0, 1.0)
    return [f, img, *_module_leaves(blk, rng)], lambda: sam_forward(f, img, blk)


def _full_model_config() -> ModelConfig:
    return ModelConfig(maae=_tiny_maae(), lut=LutConfig(hidden=(8, 8), activation="gelu"),
                       lut_identity_steps=0)


def _full_model(rng):
    model = MacLookup(_full_model_config(), seed=int(rng.integers(1 << 31)))
    img = _leaf(rng, (3, 8, 8), 0.05, 0.95)

    def fn():
        out = model_forward(img, model)
        return [out.lut_output, *[o for row in out.stages for o in row]]
    return [img, *_module_leaves(model, rng, jitter=0.05)], fn


def _total_loss(rng):
    model = MacLookup(_full_model_config(), seed=int(rng.integers(1 << 31)))
    img = _leaf(rng, (3, 16, 16), 0.05, 0.95)
    target = Tensor(rng.uniform(0.05, 0.95, size=(3, 16, 16)).astype(get_dtype()))

    def fn():
        out = model_forward(img, model)
        lut_l = charbonnier(out.lut_output, target)
        return loss_terms(out.final, target, out.stages, lut_l, LossConfig()).total
    return [img, *_module_leaves(model, rng, jitter=0.05)], fn


BLOCK_CASES: dict[str, Builder] = {
    "MAB": _mab,
    "CGB": _cgb,
    "SAM": _sam,
    "full_model": _full_model,
    "total_loss": _total_loss,
}

ALL_CASES: dict[str, Builder] = {**OP_CASES, **LOSS_CASES, **BLOCK_CASES}

# whole-model cases are probed along joint random directions
JOINT_DIRECTIONS = {"full_model": 12, "total_loss": 12}


def run_suite(names: list[str] | None = None, instances: int = 5,
              log: Callable[[str], None] | None = None) -> list[CaseResult]:
    names = list(ALL_CASES) if not names else names
    unknown = [n for n in names if n not in ALL_CASES]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {', '.join(unknown)}")
    results = []
    for name in names:
        t0 = time.perf_counter()
        res = run_case(name, ALL_CASES[name], instances, joint=JOINT_DIRECTIONS.get(name, 0))
        results.append(res)
        if log is not None:
            log(format_row(res, time.perf_counter() - t0))
    return results


def format_row(res: CaseResult, seconds: float | None = None) -> str:
    extra = f"  {seconds:6.2f}s" if seconds is not None else ""
    return (f"{res.name:<16} n={res.instances}  rel64={res.max_rel['float64']:.2e}  "
            f"rel32={res.max_rel['float32']:.2e}  {'ok' if res.passed else 'FAIL'}{extra}")
