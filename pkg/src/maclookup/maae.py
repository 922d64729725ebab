"""Multi-axis adaptive enhancement network.

Each stage is a small U-Net whose blocks mix features with gated MLPs along two
axes: inside local ``b x b`` windows (block partition) and across a global
``g x g`` lattice (grid partition).  Skip connections meet the decoder stream in
cross-gating blocks, and consecutive stages are linked by a supervised
attention module.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .autograd import ShapeError, Tensor, as_tensor
from .lut import LutConfig, LutNetwork, fit_lut, lut_apply_image, sample_lattice
from .nn import Conv2d, LayerNorm, Module, constant_init, uniform_init

SPATIAL_INIT_SCALE = 1e-2


@dataclass
class MaaeConfig:
    stages: int = 2
    scales: int = 2
    channels: int = 8
    block_size: int = 4
    grid_size: int = 4
    mlp_expansion: float = 2.0
    depth: int = 1

    def __post_init__(self):
        if self.stages < 1 or self.scales < 1 or self.depth < 0:
            raise ValueError("stages and scales must be >= 1 and depth >= 0")
        if self.channels < 2 or self.channels % 2:
            raise ValueError("channels must be an even number >= 2")

    def scale_channels(self, n: int) -> int:
        return self.channels * 2 ** n

    def check_extents(self, height: int, width: int) -> None:
        for n in range(self.scales):
            f = 2 ** n
            if height % f or width % f:
                raise ShapeError(f"{height}x{width} is not divisible by 2^{n} for scale {n + 1}")
            h, w = height // f, width // f
            for p, what in ((self.block_size, "block"), (self.grid_size, "grid")):
                if h % p or w % p:
                    raise ShapeError(f"scale {n + 1} extent {h}x{w} is not divisible by {what} size {p}")


def _spatial_dense(x: Tensor, weight: Tensor, bias: Tensor, mode: str, p: int) -> Tensor:
    _, h, w = x.shape
    y = ops.linear(ops.partition(x, mode, p), weight, bias)
    return ops.unpartition(y, mode, p, h, w)


class GatedMlp(Module):
    """Channel expansion, then ``u * spatial(v)`` mixing along one partition axis."""

    def __init__(self, rng: np.random.Generator, channels: int, mode: str, p: int, expansion: float):
        hidden = max(2, 2 * int(round(channels * expansion / 2)))
        self.mode = mode
        self.p = p
        self.expand = Conv2d(rng, channels, hidden)
        n = p * p
        # gate starts as identity: tiny mixing weights, unit bias
        self.spatial_w = uniform_init(rng, (n, n), n, scale=SPATIAL_INIT_SCALE)
        self.spatial_b = constant_init((n,), 1.0)
        self.proj = Conv2d(rng, hidden // 2, channels)

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.gelu(self.expand(x))
        u, v = ops.split(h, 2, axis=0)
        v = _spatial_dense(v, self.spatial_w, self.spatial_b, self.mode, self.p)
        return self.proj(u * v)


class MabBlock(Module):
    """Residual multi-axis gated MLP block; output shape equals input shape."""

    def __init__(self, rng: np.random.Generator, channels: int, cfg: MaaeConfig):
        if channels % 2:
            raise ValueError("MAB needs an even channel count")
        half = channels // 2
        self.norm = LayerNorm(channels)
        self.local = GatedMlp(rng, half, "block", cfg.block_size, cfg.mlp_expansion)
        self.glob = GatedMlp(rng, half, "grid", cfg.grid_size, cfg.mlp_expansion)
        self.proj = Conv2d(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return mab_forward(x, self)


def mab_forward(x: Tensor, blk: MabBlock) -> Tensor:
    h = blk.norm(x, axis=0)
    a, b = ops.split(h, 2, axis=0)
    mixed = ops.concat([blk.local(a), blk.glob(b)], axis=0)
    return x + blk.proj(mixed)


class SpatialGate(Module):
    """Multi-axis gating weights: block mixing on one half, grid mixing on the other."""

    def __init__(self, rng: np.random.Generator, channels: int, cfg: MaaeConfig):
        nb, ng = cfg.block_size ** 2, cfg.grid_size ** 2
        self.b = cfg.block_size
        self.g = cfg.grid_size
        self.block_w = uniform_init(rng, (nb, nb), nb)
        self.block_b = constant_init((nb,))
        self.grid_w = uniform_init(rng, (ng, ng), ng)
        self.grid_b = constant_init((ng,))
        self.proj = Conv2d(rng, channels, channels)

    def __call__(self, x: Tensor) -> Tensor:
        u, v = ops.split(x, 2, axis=0)
        u = _spatial_dense(u, self.block_w, self.block_b, "block", self.b)
        v = _spatial_dense(v, self.grid_w, self.grid_b, "grid", self.g)
        return self.proj(ops.concat([u, v], axis=0))

    def zero_(self) -> None:
        for p in self.parameters():
            p.data = np.zeros_like(p.data)


class CgbStream(Module):
    def __init__(self, rng: np.random.Generator, channels: int, cfg: MaaeConfig):
        self.norm = LayerNorm(channels)
        self.in_proj = Conv2d(rng, channels, channels)
        self.gate = SpatialGate(rng, channels, cfg)
        self.out_proj = Conv2d(rng, channels, channels)

    def features(self, x: Tensor) -> Tensor:
        return ops.gelu(self.in_proj(self.norm(x, axis=0)))


class CgbBlock(Module):
    """Cross-gating block: each stream is modulated by gates computed from the other."""

    def __init__(self, rng: np.random.Generator, channels: int, cfg: MaaeConfig):
        self.x = CgbStream(rng, channels, cfg)
        self.y = CgbStream(rng, channels, cfg)

    def swapped(self) -> "CgbBlock":
        other = object.__new__(CgbBlock)
        other.x, other.y = self.y, self.x
        return other

    def __call__(self, x: Tensor, y: Tensor) -> tuple[Tensor, Tensor]:
        return cgb_forward(x, y, self)


def cgb_forward(x: Tensor, y: Tensor, blk: CgbBlock) -> tuple[Tensor, Tensor]:
    if x.shape != y.shape:
        raise ShapeError(f"cross gating needs equal shapes, got {x.shape} and {y.shape}")
    xh = blk.x.features(x)
    yh = blk.y.features(y)
    gx = blk.x.gate(xh)
    gy = blk.y.gate(yh)
    x_out = x + blk.x.out_proj(xh * gy)
    y_out = y + blk.y.out_proj(yh * gx)
    return x_out, y_out


class SamBlock(Module):
    """Supervised attention between stages."""

    def __init__(self, rng: np.random.Generator, channels: int):
        self.conv_img = Conv2d(rng, channels, 3, kernel=3)
        self.conv_mask = Conv2d(rng, 3, channels, kernel=3)

    def __call__(self, feats: Tensor, image: Tensor) -> tuple[Tensor, Tensor]:
        return sam_forward(feats, image, self)


def sam_forward(feats: Tensor, image, blk: SamBlock) -> tuple[Tensor, Tensor]:
    image = as_tensor(image, like=feats)
    if feats.shape[1:] != image.shape[1:]:
        raise ShapeError(f"SAM features {feats.shape} and image {image.shape} differ in extent")
    restored = image + blk.conv_img(feats)
    mask = ops.sigmoid(blk.conv_mask(restored))
    return feats + feats * mask, restored


class MaaeStage(Module):
    """One encoder/decoder pass producing restored images at every scale."""

    def __init__(self, rng: np.random.Generator, cfg: MaaeConfig, takes_features: bool):
        self.cfg = cfg
        chans = [cfg.scale_channels(n) for n in range(cfg.scales)]
        self.stems = [Conv2d(rng, 3, c, kernel=3) for c in chans]
        self.feat_in = Conv2d(rng, chans[0], chans[0]) if takes_features else None
        self.enc = [[MabBlock(rng, c, cfg) for _ in range(cfg.depth)] for c in chans]
        self.down = [Conv2d(rng, chans[n], chans[n + 1], kernel=3, stride=2)
                     for n in range(cfg.scales - 1)]
        self.bottleneck = MabBlock(rng, chans[-1], cfg)
        self.up = [Conv2d(rng, chans[n + 1], chans[n]) for n in range(cfg.scales - 1)]
        self.cgb = [CgbBlock(rng, c, cfg) for c in chans]
        self.dec = [[MabBlock(rng, c, cfg) for _ in range(cfg.depth)] for c in chans]
        self.heads = [Conv2d(rng, c, 3, kernel=3) for c in chans]


def stage_forward(inputs: list[Tensor], stage: MaaeStage,
                  feats: Tensor | None = None) -> tuple[list[Tensor], Tensor]:
    """Run one stage on a multi-scale image pyramid (full resolution first).

    Returns the restored image at every scale and the full-resolution decoder
    features.
    """
    cfg = stage.cfg
    if len(inputs) != cfg.scales:
        raise ShapeError(f"stage expects {cfg.scales} input scales, got {len(inputs)}")
    cfg.check_extents(*inputs[0].shape[1:])
    for n, img in enumerate(inputs):
        expect = (3, inputs[0].shape[1] // 2 ** n, inputs[0].shape[2] // 2 ** n)
        if img.shape != expect:
            raise ShapeError(f"scale {n + 1} input has shape {img.shape}, expected {expect}")

    skips = []
    prev = None
    for n in range(cfg.scales):
        h = stage.stems[n](inputs[n])
        if n == 0 and feats is not None:
            if stage.feat_in is None:
                raise ValueError("this stage does not accept features from a previous stage")
            h = h + stage.feat_in(feats)
        if prev is not None:
            h = h + stage.down[n - 1](prev)
        for blk in stage.enc[n]:
            h = mab_forward(h, blk)
        skips.append(h)
        prev = h

    d = mab_forward(prev, stage.bottleneck)
    outs: list[Tensor | None] = [None] * cfg.scales
    for n in reversed(range(cfg.scales)):
        if n < cfg.scales - 1:
            _, hh, ww = skips[n].shape
            d = stage.up[n](ops.bilinear_resize(d, hh, ww))
        s, d = cgb_forward(skips[n], d, stage.cgb[n])
        d = s + d
        for blk in stage.dec[n]:
            d = mab_forward(d, blk)
        outs[n] = inputs[n] + stage.heads[n](d)
    return outs, d


def image_pyramid(image: Tensor, scales: int) -> list[Tensor]:
    _, h, w = image.shape
    return [image] + [ops.bilinear_resize(image, h // 2 ** n, w // 2 ** n) for n in range(1, scales)]


class MaaeModel(Module):
    def __init__(self, cfg: MaaeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.stages = [MaaeStage(rng, cfg, takes_features=s > 0) for s in range(cfg.stages)]
        self.sams = [SamBlock(rng, cfg.channels) for _ in range(cfg.stages - 1)]


def maae_forward(image: Tensor, model: MaaeModel) -> list[list[Tensor]]:
    """All stage outputs ``O[s][n]``; stage ``s > 0`` starts from the SAM-refined image."""
    rows = []
    feats = None
    current = image
    for s, stage in enumerate(model.stages):
        if s > 0:
            feats, current = sam_forward(feats, rows[-1][0], model.sams[s - 1])
        outs, feats = stage_forward(image_pyramid(current, model.cfg.scales), stage,
                                    feats if s > 0 else None)
        rows.append(outs)
    return rows


@dataclass
class ModelConfig:
    maae: MaaeConfig = field(default_factory=MaaeConfig)
    lut: LutConfig = field(default_factory=LutConfig)
    use_cltcc: bool = True
    use_maae: bool = True
    # steps of identity pre-fitting for the LUT on a 9^3 lattice (0 keeps the random init)
    lut_identity_steps: int = 300

    def __post_init__(self):
        if self.lut_identity_steps < 0:
            raise ValueError("lut_identity_steps must be non-negative")


def warm_start_identity(net: LutNetwork, steps: int, density: int = 9) -> float:
    """Fit the LUT to the identity colour map so training starts from a passthrough."""
    colors = sample_lattice(density).samples
    cond = np.full(net.cond_dim, 0.5) if net.cond_dim else None
    return fit_lut(net, colors, colors, steps, cond=cond)[-1]


class MacLookup(Module):
    """LUT color correction followed by multi-stage refinement; either part can be disabled."""

    def __init__(self, cfg: ModelConfig | None = None, seed: int = 0):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.lut = LutNetwork(cfg.lut, rng) if cfg.use_cltcc else None
        if self.lut is not None and cfg.lut_identity_steps:
            warm_start_identity(self.lut, cfg.lut_identity_steps)
        self.maae = MaaeModel(cfg.maae, rng) if cfg.use_maae else None


@dataclass
class ModelOutput:
    stages: list[list[Tensor]]
    lut_output: Tensor

    @property
    def final(self) -> Tensor:
        return self.stages[-1][0] if self.stages else self.lut_output


def model_forward(image: Tensor, model: MacLookup) -> ModelOutput:
    """Enhance a ``[3,H,W]`` image: per-pixel LUT, then the MAAE stages."""
    image = as_tensor(image)
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"expected an image of shape [3,H,W], got {image.shape}")
    corrected = lut_apply_image(model.lut, image) if model.lut is not None else image
    if model.maae is None:
        return ModelOutput(stages=[], lut_output=corrected)
    model.maae.cfg.check_extents(*image.shape[1:])
    return ModelOutput(stages=maae_forward(corrected, model.maae), lut_output=corrected)


def enhance_array(model: MacLookup, image_hwc: np.ndarray) -> np.ndarray:
    """Convenience wrapper: ``[H,W,3]`` array in, clipped ``[H,W,3]`` float64 array out."""
    x = Tensor(np.ascontiguousarray(np.transpose(image_hwc, (2, 0, 1))).astype(model_dtype(model)))
    out = model_forward(x, model).final.data
    return np.clip(np.transpose(out, (1, 2, 0)), 0.0, 1.0).astype(np.float64)


def model_dtype(model: Module):
    params = model.parameters()
    return params[0].dtype if params else np.float32
