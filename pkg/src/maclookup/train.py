"""Training loop: per-sample tapes, Adam with a cosine schedule, checkpoints, resume."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt_io
from . import ops
from . import config as config_io
from .autograd import NonFiniteError, Tape, Tensor, precision
from .data import AugmentConfig, PairedDataset, augment
from .data import quantize as quantize_image
from .losses import LossConfig, compose_total, gt_loss, maae_loss, psnr, ssim
from .lut import l1_per_sample
from .maae import MacLookup, ModelConfig, enhance_array, model_forward
from .optim import AdamState, adam_step, clip_grad_norm, cosine_lr

logger = logging.getLogger(__name__)

Pair = tuple[np.ndarray, np.ndarray]


class TrainingError(FloatingPointError):
    """A loss term or gradient became non-finite; ``term`` names the culprit."""

    def __init__(self, term: str, epoch: int, detail: str):
        super().__init__(f"non-finite {term} at epoch {epoch}: {detail}")
        self.term = term
        self.epoch = epoch


@dataclass
class TrainConfig:
    lr_init: float = 2e-4
    lr_min: float = 1e-6
    epochs: int = 200
    batch: int = 4
    seed: int = 0
    clip_norm: float = 1.0
    checkpoint_every: int = 0
    # 0 validates on the (unaugmented) training pairs, else holds out the last val_count pairs
    val_count: int = 0
    val_every: int = 1
    precision: str = "float32"
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    aug: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.lr_min > self.lr_init:
            raise ValueError("lr_min must not exceed lr_init")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.val_count < 0 or self.val_every < 1 or self.checkpoint_every < 0:
            raise ValueError("val_count and checkpoint_every must be >= 0, val_every >= 1")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")


def lr_at_epoch(epoch: int, cfg: TrainConfig) -> float:
    return cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_min)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    l_total: float
    l_cltcc: float
    l_maae: float
    l_gt: float
    val_psnr: float
    val_ssim: float


HISTORY_COLUMNS = [f.name for f in fields(EpochRecord)]


@dataclass
class TrainResult:
    model: MacLookup
    history: list[EpochRecord]
    adam: AdamState
    rng: np.random.Generator
    config: TrainConfig
    epoch: int = 0

    def to_checkpoint(self) -> ckpt_io.Checkpoint:
        return make_checkpoint(self.model, self.config, self.adam, self.rng, self.epoch, self.history)


# ---------------------------------------------------------------- per-sample step

def _chw(img: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(np.transpose(img, (2, 0, 1)), dtype=dtype))


def sample_losses(model: MacLookup, inp: Tensor, target: Tensor, cfg: LossConfig) -> dict[str, Tensor]:
    """Forward one pair and evaluate every term, naming whichever one turns non-finite."""
    term = "model output"
    try:
        out = model_forward(inp, model)
        zero = Tensor(np.zeros((), dtype=inp.dtype))
        term = "L_CLTCC"
        if model.lut is not None:
            c, h, w = target.shape
            pred = ops.transpose(ops.reshape(out.lut_output, (c, h * w)), (1, 0))
            l_cltcc = l1_per_sample(pred, target.data.reshape(c, h * w).T)
        else:
            l_cltcc = zero
        term = "L_MAAE"
        l_maae = maae_loss(out.stages, target, cfg) if out.stages else zero
        term = "L_GT"
        p = psnr(out.final, target, cfg.psnr_cap_db)
        s = ssim(out.final, target)
        l_gt = gt_loss(p, s, cfg)
        term = "L_total"
        total = compose_total(l_gt, l_cltcc, l_maae, cfg)
    except NonFiniteError as exc:
        raise _NamedNonFinite(term, str(exc)) from exc
    return {"total": total, "cltcc": l_cltcc, "maae": l_maae, "gt": l_gt}


class _NamedNonFinite(Exception):
    def __init__(self, term: str, detail: str):
        super().__init__(detail)
        self.term = term
        self.detail = detail


def train_step(model: MacLookup, batch: list[Pair], cfg: TrainConfig, adam: AdamState,
               lr: float) -> dict[str, float]:
    """One optimizer update on the batch mean of per-sample losses; returns mean term values."""
    params = model.parameters()
    dtype = params[0].dtype
    acc = [np.zeros_like(p.data) for p in params]
    sums = {"total": 0.0, "cltcc": 0.0, "maae": 0.0, "gt": 0.0}
    for inp, tgt in batch:
        with Tape() as tape:
            terms = sample_losses(model, _chw(inp, dtype), _chw(tgt, dtype), cfg.loss)
            try:
                grads = tape.backward(terms["total"], params)
            except NonFiniteError as exc:
                raise _NamedNonFinite("gradient", str(exc)) from exc
        for a, g in zip(acc, grads):
            a += g
        for k in sums:
            sums[k] += terms[k].item()
    n = len(batch)
    for a in acc:
        a /= n
    if cfg.clip_norm > 0:
        clip_grad_norm(acc, cfg.clip_norm)
    adam_step(params, acc, adam, lr)
    return {k: v / n for k, v in sums.items()}


# ---------------------------------------------------------------- evaluation

def evaluate_pairs(model: MacLookup, pairs: list[Pair], quantize: bool = False) -> list[tuple[float, float]]:
    """PSNR (dB) and SSIM of the clipped enhanced output for each pair, computed in 64-bit.

    ``quantize`` scores the 8-bit image that ``enhance`` would write.
    """
    rows = []
    for inp, tgt in pairs:
        out = enhance_array(model, inp)
        if quantize:
            out = quantize_image(out)
        with precision("float64"):
            o = np.transpose(out, (2, 0, 1))
            t = np.transpose(np.asarray(tgt, dtype=np.float64), (2, 0, 1))
            rows.append((psnr(o, t).item(), ssim(o, t).item()))
    return rows


def input_psnr(pairs: list[Pair]) -> float:
    with precision("float64"):
        vals = [psnr(np.transpose(i, (2, 0, 1)), np.transpose(t, (2, 0, 1))).item() for i, t in pairs]
    return float(np.mean(vals))


# ---------------------------------------------------------------- checkpoints

def make_checkpoint(model: MacLookup, cfg: TrainConfig, adam: AdamState | None,
                    rng: np.random.Generator | None, epoch: int,
                    history: list[EpochRecord]) -> ckpt_io.Checkpoint:
    meta = {"epoch": epoch, "history": [asdict(r) for r in history]}
    if rng is not None:
        meta["rng"] = rng.bit_generator.state
    return ckpt_io.Checkpoint(config_io.dumps(cfg), model.state_dict(), adam, meta)


def config_from_checkpoint(ck: ckpt_io.Checkpoint) -> TrainConfig:
    return config_io.apply(TrainConfig(), config_io.parse_lines(ck.config_text, "<checkpoint>"))


def model_from_checkpoint(ck: ckpt_io.Checkpoint, use_cltcc: bool | None = None,
                          use_maae: bool | None = None) -> MacLookup:
    """Rebuild the model; ablation flags may only switch off parts present in the checkpoint."""
    cfg = config_from_checkpoint(ck)
    mcfg = cfg.model
    want_cltcc = mcfg.use_cltcc if use_cltcc is None else use_cltcc
    want_maae = mcfg.use_maae if use_maae is None else use_maae
    if (want_cltcc and not mcfg.use_cltcc) or (want_maae and not mcfg.use_maae):
        raise ValueError("checkpoint lacks a component that was requested")
    with precision(cfg.precision):
        model = MacLookup(mcfg, seed=cfg.seed)
    model.load_state_dict(ck.params)
    if not want_cltcc:
        model.lut = None
    if not want_maae:
        model.maae = None
    return model


def load_model(path: str | Path, **kw) -> MacLookup:
    return model_from_checkpoint(ckpt_io.load(path), **kw)


def history_from_meta(meta: dict) -> list[EpochRecord]:
    return [EpochRecord(**row) for row in meta.get("history", [])]


def write_history_csv(path: str | Path, history: list[EpochRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in history:
            w.writerow([r.epoch] + [repr(getattr(r, c)) for c in HISTORY_COLUMNS[1:]])


# ---------------------------------------------------------------- loop

def _as_pairs(dataset) -> list[Pair]:
    if isinstance(dataset, PairedDataset):
        return dataset.load()
    return list(dataset)


def train_run(dataset, cfg: TrainConfig, out_dir: str | Path | None = None,
              resume: ckpt_io.Checkpoint | None = None, stop_epoch: int | None = None,
              on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train from scratch (or from ``resume``) for ``cfg.epochs`` epochs.

    ``stop_epoch`` ends the run early, after that many epochs in total, without
    changing the schedule, which is how an interrupted run is simulated.
    """
    pairs = _as_pairs(dataset)
    if not pairs:
        raise ValueError("dataset is empty")
    if 0 < cfg.val_count < len(pairs):
        train_pairs, val_pairs = pairs[:-cfg.val_count], pairs[-cfg.val_count:]
    else:
        train_pairs, val_pairs = pairs, pairs
    out_dir = Path(out_dir) if out_dir is not None else None

    with precision(cfg.precision):
        model = MacLookup(cfg.model, seed=cfg.seed)
        adam = AdamState()
        rng = np.random.default_rng(cfg.seed)
        history: list[EpochRecord] = []
        start = 0
        if resume is not None:
            model.load_state_dict(resume.params)
            if resume.adam is not None:
                adam = resume.adam
            if "rng" in resume.meta:
                rng.bit_generator.state = resume.meta["rng"]
            history = history_from_meta(resume.meta)
            start = int(resume.meta.get("epoch", 0))

        end = cfg.epochs if stop_epoch is None else min(stop_epoch, cfg.epochs)
        for epoch in range(start, end):
            lr = lr_at_epoch(epoch, cfg)
            order = rng.permutation(len(train_pairs))
            sums = {"total": 0.0, "cltcc": 0.0, "maae": 0.0, "gt": 0.0}
            steps = 0
            for b in range(0, len(order), cfg.batch):
                batch = [train_pairs[i] for i in order[b:b + cfg.batch]]
                batch = augment(batch, cfg.aug, rng)
                try:
                    means = train_step(model, batch, cfg, adam, lr)
                except _NamedNonFinite as exc:
                    raise TrainingError(exc.term, epoch, exc.detail) from None
                for k in sums:
                    sums[k] += means[k]
                steps += 1
            vp = vs = math.nan
            if (epoch + 1) % cfg.val_every == 0 or epoch == end - 1:
                scores = evaluate_pairs(model, val_pairs)
                vp = float(np.mean([s[0] for s in scores]))
                vs = float(np.mean([s[1] for s in scores]))
            rec = EpochRecord(epoch, lr, sums["total"] / steps, sums["cltcc"] / steps,
                              sums["maae"] / steps, sums["gt"] / steps, vp, vs)
            history.append(rec)
            if on_epoch is not None:
                on_epoch(rec)
            logger.debug("epoch %d lr %.3g loss %.5f val_psnr %.3f", epoch, lr, rec.l_total, vp)
            if out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                ck = make_checkpoint(model, cfg, adam, rng, epoch + 1, history)
                ckpt_io.save(out_dir / f"epoch{epoch + 1:04d}.macl", ck)

        result = TrainResult(model, history, adam, rng, cfg, epoch=max(start, end))
        if out_dir is not None:
            ckpt_io.save(out_dir / "model.macl", result.to_checkpoint())
            write_history_csv(out_dir / "history.csv", history)
    return result
