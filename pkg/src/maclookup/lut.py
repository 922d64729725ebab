"""Implicit neural 3D lookup table for global color correction.

A small MLP maps an RGB triple (optionally concatenated with a per-image
condition vector) to a corrected RGB triple in [0, 1].  The same function is
applied to every pixel, so it can be sampled on a lattice and written out as a
classic ``.cube`` LUT.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .autograd import Tape, Tensor, as_tensor, get_dtype
from .nn import Module, constant_init, uniform_init
from .optim import AdamState, adam_step, cosine_lr


class LutConfigError(ValueError):
    pass


class FitAbortedError(FloatingPointError):
    pass


@dataclass
class LutConfig:
    hidden: tuple[int, ...] = (64, 64, 64)
    activation: str = "relu"
    cond_dim: int = 0


class LutNetwork(Module):
    """MLP ``R^(3+k) -> [0,1]^3``; hidden activation after every layer but the last."""

    def __init__(self, cfg: LutConfig | None = None, rng: np.random.Generator | None = None):
        cfg = cfg or LutConfig()
        if cfg.cond_dim < 0:
            raise LutConfigError("cond_dim must be non-negative")
        if cfg.activation not in ops.ACTIVATIONS:
            raise LutConfigError(f"unknown activation {cfg.activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        widths = [3 + cfg.cond_dim, *cfg.hidden, 3]
        self.weights = []
        self.biases = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            self.weights.append(uniform_init(rng, (w_in, w_out), w_in))
            self.biases.append(constant_init((w_out,)))

    @property
    def cond_dim(self) -> int:
        return self.cfg.cond_dim

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def zero_(self) -> "LutNetwork":
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
        return self


def lut_forward(net: LutNetwork, pixels, cond=None) -> Tensor:
    """Apply the LUT network to ``pixels [N,3]``; returns ``[N,3]`` in [0,1]."""
    x = as_tensor(pixels)
    if x.ndim != 2 or x.shape[1] != 3:
        raise LutConfigError(f"pixels must be [N,3], got {x.shape}")
    k = net.cond_dim
    if k > 0:
        if cond is None:
            raise LutConfigError(f"network expects a condition vector of length {k}")
        c = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=x.dtype).reshape(-1)
        if c.size != k:
            raise LutConfigError(f"condition vector has length {c.size}, expected {k}")
        x = ops.concat([x, Tensor(np.broadcast_to(c, (x.shape[0], k)).copy())], axis=1)
    elif cond is not None and np.size(cond.data if isinstance(cond, Tensor) else cond) > 0:
        raise LutConfigError("unconditional network given a condition vector")

    h = x
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = ops.linear(h, w, b)
        if i < last:
            h = ops.activation(h, net.cfg.activation)
    return ops.sigmoid(h)


def image_condition(image_chw: Tensor | np.ndarray) -> np.ndarray:
    """Per-image condition vector: mean RGB of the (degraded) input."""
    data = image_chw.data if isinstance(image_chw, Tensor) else np.asarray(image_chw)
    return data.reshape(data.shape[0], -1).mean(axis=1)


def lut_apply_image(net: LutNetwork, image_chw: Tensor) -> Tensor:
    """Map every pixel of a ``[3,H,W]`` image through the network."""
    _, h, w = image_chw.shape
    flat = ops.transpose(ops.reshape(image_chw, (3, h * w)), (1, 0))
    cond = image_condition(image_chw) if net.cond_dim else None
    out = lut_forward(net, flat, cond)
    return ops.reshape(ops.transpose(out, (1, 0)), (3, h, w))


def l1_per_sample(pred: Tensor, target) -> Tensor:
    """Mean over samples of the per-sample L1 norm across channels."""
    diff = ops.abs(ops.sub(pred, as_tensor(target, like=pred)))
    return ops.mean(ops.sum(diff, axis=1))


def fit_lut(net: LutNetwork, inputs, targets, steps: int, lr: float = 3e-2, cond=None,
            state: AdamState | None = None, lr_final: float | None = None) -> list[float]:
    """Fit the network to (input color, target color) pairs with Adam on per-sample L1.

    The step size follows a cosine decay from ``lr`` to ``lr_final`` (default
    ``lr / 100``); pass ``lr_final=lr`` for a constant rate.  Returns the loss
    trace with ``steps + 1`` entries: entry ``k`` is the loss after ``k`` updates.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = as_tensor(np.asarray(inputs, dtype=get_dtype()))
    t = np.asarray(targets, dtype=x.dtype)
    if x.shape[0] < 1 or t.shape != x.shape:
        raise ValueError(f"need N>=1 matching inputs/targets, got {x.shape} and {t.shape}")
    params = net.parameters()
    state = state or AdamState()
    if lr_final is None:
        lr_final = lr / 100.0
    trace = []
    for step in range(steps):
        with Tape() as tape:
            loss = l1_per_sample(lut_forward(net, x, cond), t)
            grads = tape.backward(loss, wrt=params)
        value = loss.item()
        if not math.isfinite(value):
            raise FitAbortedError(f"non-finite LUT loss at step {step}")
        trace.append(value)
        adam_step(params, grads, state, cosine_lr(step, steps, lr, lr_final))
    final = l1_per_sample(lut_forward(net, x, cond), t).item()
    if not math.isfinite(final):
        raise FitAbortedError(f"non-finite LUT loss after {steps} steps")
    trace.append(final)
    return trace


@dataclass
class ColorLattice:
    samples: np.ndarray  # [density**3, 3], red fastest
    density: int


def sample_lattice(density: int) -> ColorLattice:
    """Regular RGB lattice with coordinates i/(density-1); red varies fastest."""
    if density < 2:
        raise LutConfigError("lattice density must be >= 2")
    axis = np.arange(density) / (density - 1)
    b, g, r = np.meshgrid(axis, axis, axis, indexing="ij")
    samples = np.stack([r.ravel(), g.ravel(), b.ravel()], axis=1)
    return ColorLattice(samples=samples, density=density)


def export_cube(net: LutNetwork, size: int, cond=None, path: str | Path | None = None,
                title: str | None = None) -> bytes:
    """Render the network as ``.cube`` text; optionally also write it to ``path``."""
    if size < 2:
        raise LutConfigError("cube size must be >= 2")
    lattice = sample_lattice(size)
    if net.cond_dim and cond is None:
        cond = np.full(net.cond_dim, 0.5)
    values = lut_forward(net, lattice.samples.astype(get_dtype()), cond).data.astype(np.float64)
    buf = io.StringIO()
    if title:
        buf.write(f'TITLE "{title}"\n')
    buf.write(f"LUT_3D_SIZE {size}\n")
    for r, g, b in values:
        buf.write(f"{r:.9g} {g:.9g} {b:.9g}\n")
    data = buf.getvalue().encode("utf-8")
    if path is not None:
        try:
            Path(path).write_bytes(data)
        except OSError as exc:
            raise OSError(f"cannot write LUT to {path}: {exc}") from exc
    return data


def parse_cube(text: str | bytes) -> np.ndarray:
    """Read a 3D ``.cube`` file into an array indexed ``[b, g, r, channel]``."""
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    size = None
    rows: list[list[float]] = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        head = line.split()[0]
        if head == "LUT_3D_SIZE":
            size = int(line.split()[1])
        elif head in ("TITLE", "DOMAIN_MIN", "DOMAIN_MAX", "LUT_1D_SIZE"):
            continue
        else:
            rows.append([float(v) for v in line.split()])
    if size is None:
        raise ValueError("missing LUT_3D_SIZE header")
    table = np.asarray(rows)
    if table.shape != (size ** 3, 3):
        raise ValueError(f"expected {size ** 3} rows of 3 values, got {table.shape}")
    return table.reshape(size, size, size, 3)


def trilinear_lookup(table: np.ndarray, rgb: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a ``[b,g,r,3]`` table at colors ``rgb [N,3]``."""
    n = table.shape[0]
    pos = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * (n - 1)
    i0 = np.minimum(np.floor(pos).astype(int), n - 2)
    f = pos - i0
    out = np.zeros((len(pos), 3))
    for dr in (0, 1):
        wr = f[:, 0] if dr else 1.0 - f[:, 0]
        for dg in (0, 1):
            wg = f[:, 1] if dg else 1.0 - f[:, 1]
            for db in (0, 1):
                wb = f[:, 2] if db else 1.0 - f[:, 2]
                val = table[i0[:, 2] + db, i0[:, 1] + dg, i0[:, 0] + dr]
                out += (wr * wg * wb)[:, None] * val
    return out


def lipschitz_probe(net: LutNetwork, density: int = 33, cond=None) -> float:
    """Largest output change per unit input step between lattice neighbours."""
    lat = sample_lattice(density)
    vals = lut_forward(net, lat.samples.astype(get_dtype()), cond).data
    grid = vals.reshape(density, density, density, 3).astype(np.float64)
    step = 1.0 / (density - 1)
    worst = 0.0
    for axis in range(3):
        d = np.abs(np.diff(grid, axis=axis)).max()
        worst = max(worst, float(d) / step)
    return worst


def lattice_pairs(lattice: ColorLattice, transform) -> tuple[np.ndarray, np.ndarray]:
    """Pair every lattice color with ``transform(color)``."""
    x = lattice.samples
    return x, np.asarray(transform(x), dtype=np.float64)


__all__: Sequence[str] = [
    "LutConfig", "LutNetwork", "ColorLattice", "lut_forward", "lut_apply_image", "fit_lut",
    "sample_lattice", "export_cube", "parse_cube", "trilinear_lookup", "l1_per_sample",
    "image_condition", "lipschitz_probe", "LutConfigError", "FitAbortedError",
]
