"""Training and evaluation for the entropy model.

Training is teacher-forced: every batch is a set of aligned (lossy patch,
original patch) crops plus the full lossy reconstructions they came from,
the model predicts mixture parameters for all residual positions in one
pass, and the discretized-CDF cross-entropy is minimized with AdamW under
global-norm gradient clipping.  Runs are reproducible from the seed alone.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .autodiff import AdamW, backward, global_norm_clip, rng
from .errors import CodecError, OptimizerError, TrainingDivergedError
from .model import EntropyModel, ModelCheckpoint, ModelConfig, load_checkpoint, save_checkpoint
from .ppm import read_image


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    steps: int = 200
    seed: int = 0
    backend: str = "qdown:2"  # data-generation backend(s), comma separated
    patch_size: int = 16
    val_fraction: float = 0.1
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 20
    checkpoint_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.lr < 0:
            raise CodecError("learning rate must be nonnegative")
        if self.steps < 1 or self.batch_size < 1:
            raise CodecError("steps and batch_size must be >= 1")
        if not 0.0 <= self.val_fraction < 1.0:
            raise CodecError("val_fraction must lie in [0, 1)")


class PatchDataset:
    """Aligned (lossy patch, original patch, full reconstruction) sampler.

    Every corpus image is run through each data-generation backend once; a
    sample is a seeded, fully-in-bounds p x p crop of one (image, backend)
    reconstruction pair.  The same seed always yields the same crop stream.
    """

    def __init__(self, corpus_dir, backends, patch_size: int, seed: int = 0,
                 val_fraction: float = 0.0):
        self.patch_size = int(patch_size)
        if isinstance(backends, str):
            backends = [pl.resolve_backend(s) for s in backends.split(",") if s.strip()]
        elif not isinstance(backends, (list, tuple)):
            backends = [backends]
        if not backends:
            raise CodecError("at least one data-generation backend is required")
        self.backends = list(backends)

        paths = sorted(
            p for p in Path(corpus_dir).iterdir()
            if p.suffix.lower() in (".ppm", ".pgm")
        )
        if not paths:
            raise CodecError(f"no PPM/PGM images in {corpus_dir}")
        images = []
        for p in paths:
            img = read_image(p)
            if img.shape[0] >= patch_size and img.shape[1] >= patch_size:
                images.append((p.name, img))
        if not images:
            raise CodecError(f"no corpus image is at least {patch_size}x{patch_size}")
        channels = {img.shape[2] for _, img in images}
        if len(channels) != 1:
            raise CodecError(f"corpus mixes channel counts {sorted(channels)}")
        self.channels = channels.pop()

        order = rng(seed).permutation(len(images))
        n_val = int(round(len(images) * val_fraction))
        if val_fraction > 0 and n_val == 0:
            n_val = 1
        val_ids = set(order[:n_val].tolist()) if n_val else set()
        self.train_items = []
        self.val_items = []
        for i, (name, img) in enumerate(images):
            recons = [bk.encode(img)[1] for bk in self.backends]
            entry = (name, img, recons)
            (self.val_items if i in val_ids else self.train_items).append(entry)
        if not self.train_items:
            raise CodecError("validation split leaves no training images")

    def sample_batch(self, batch_size: int, generator, items=None):
        """Returns (recon_images, image_idx, lossy_patches, original_patches)."""
        items = self.train_items if items is None else items
        p = self.patch_size
        recons: list[np.ndarray] = []
        recon_key: dict[tuple[int, int], int] = {}
        image_idx = np.empty(batch_size, dtype=np.int64)
        lossy = np.empty((batch_size, self.channels, p, p), dtype=np.uint8)
        orig = np.empty((batch_size, self.channels, p, p), dtype=np.uint8)
        for b in range(batch_size):
            i = int(generator.integers(0, len(items)))
            k = int(generator.integers(0, len(self.backends)))
            _, img, recs = items[i]
            rec = recs[k]
            y = int(generator.integers(0, img.shape[0] - p + 1))
            x = int(generator.integers(0, img.shape[1] - p + 1))
            key = (i, k)
            if key not in recon_key:
                recon_key[key] = len(recons)
                recons.append(rec)
            image_idx[b] = recon_key[key]
            lossy[b] = rec[y : y + p, x : x + p].transpose(2, 0, 1)
            orig[b] = img[y : y + p, x : x + p].transpose(2, 0, 1)
        return recons, image_idx, lossy, orig


@dataclass
class TrainReport:
    steps: int
    losses: list[tuple[int, float]]  # (step, mean nats per subpixel)
    wall_time: float
    checkpoint_hash: str
    final_loss: float
    initial_loss: float
    log_lines: list[str] = field(default_factory=list)


def _batch_loss(model: EntropyModel, batch):
    recons, image_idx, lossy, orig = batch
    residual = orig.astype(np.int16) - lossy.astype(np.int16)
    loss = model.training_loss(recons, lossy, residual, image_idx)
    per_subpix = float(loss.data) / residual.size
    return loss, per_subpix


def train(config: TrainConfig, dataset: PatchDataset, checkpoint_out,
          model_config: ModelConfig | None = None) -> TrainReport:
    """Optimize a fresh model on the dataset; writes checkpoints and logs."""
    if model_config is None:
        model_config = ModelConfig(patch_size=config.patch_size, channels=dataset.channels)
    if model_config.patch_size != config.patch_size:
        raise CodecError(
            f"model patch size {model_config.patch_size} != training crop {config.patch_size}"
        )
    if model_config.channels != dataset.channels:
        raise CodecError(
            f"model channels {model_config.channels} != corpus channels {dataset.channels}"
        )
    checkpoint_out = Path(checkpoint_out)

    model = EntropyModel.initialize(model_config, seed=config.seed, dtype=np.float64)
    tensors = model.tensors()
    opt = AdamW(tensors, lr=config.lr, weight_decay=config.weight_decay)
    data_gen = rng(config.seed + 1)  # distinct stream from the init seed

    lines: list[str] = []
    losses: list[tuple[int, float]] = []
    t0 = time.time()

    def log(msg: str):
        lines.append(msg)

    def save(step: int) -> str:
        ckpt = model.to_checkpoint(seed=config.seed, step_count=step)
        h = save_checkpoint(ckpt, checkpoint_out)
        return h.hex()

    initial_loss = None
    final_loss = None
    for step in range(1, config.steps + 1):
        batch = dataset.sample_batch(config.batch_size, data_gen)
        opt.zero_grad()
        loss, per_subpix = _batch_loss(model, batch)
        if not np.isfinite(per_subpix):
            save(step - 1)
            log(f"step {step}: non-finite loss, aborting (last good checkpoint kept)")
            _write_report(checkpoint_out, lines, losses, time.time() - t0)
            raise TrainingDivergedError(f"loss became non-finite at step {step}")
        if initial_loss is None:
            initial_loss = per_subpix
        final_loss = per_subpix
        backward(loss)
        grads = global_norm_clip(opt.grads(), config.grad_clip)
        try:
            opt.step(grads)
        except OptimizerError as e:
            save(step - 1)
            log(f"step {step}: {e}; aborting (last good checkpoint kept)")
            _write_report(checkpoint_out, lines, losses, time.time() - t0)
            raise TrainingDivergedError(str(e)) from e
        if step % config.log_every == 0 or step == 1 or step == config.steps:
            losses.append((step, per_subpix))
            log(f"step {step}/{config.steps} loss {per_subpix:.4f} nats/subpixel "
                f"({time.time() - t0:.1f}s)")
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            save(step)

    ckpt_hash = save(config.steps)
    wall = time.time() - t0
    log(f"done: {config.steps} steps in {wall:.1f}s, checkpoint {ckpt_hash}")
    _write_report(checkpoint_out, lines, losses, wall)
    return TrainReport(config.steps, losses, wall, ckpt_hash,
                       final_loss if final_loss is not None else float("nan"),
                       initial_loss if initial_loss is not None else float("nan"),
                       lines)


def _write_report(checkpoint_out: Path, lines, losses, wall):
    pl.write_atomic(checkpoint_out.with_suffix(".log"), ("\n".join(lines) + "\n").encode())
    summary = {
        "losses": [{"step": s, "loss_nats_per_subpixel": v} for s, v in losses],
        "wall_time_seconds": wall,
    }
    pl.write_atomic(checkpoint_out.with_suffix(".summary.json"),
                    json.dumps(summary, indent=2).encode())


def validation_nll(model: EntropyModel, dataset: PatchDataset, batches: int = 4,
                   batch_size: int = 16, seed: int = 9) -> float:
    """Teacher-forced mean NLL (nats/subpixel) on the validation split."""
    items = dataset.val_items or dataset.train_items
    g = rng(seed)
    total, count = 0.0, 0
    for _ in range(batches):
        batch = dataset.sample_batch(batch_size, g, items=items)
        loss, _ = _batch_loss(model, batch)
        total += float(loss.data)
        count += batch[3].size
    return total / count


def image_nll(model: EntropyModel, image: np.ndarray, backend) -> float:
    """Teacher-forced NLL (nats/subpixel) over the exact encode patch grid.

    This is the model's estimate of the residual coding cost of one image;
    it relates to the measured residual bpsp up to quantization and the
    per-patch flush overhead.
    """
    img = pl.check_image(image)
    _, recon = backend.encode(img)
    residual = img.astype(np.int16) - recon.astype(np.int16)
    regions = pl.patch_grid(img.shape[0], img.shape[1], model.config.patch_size)
    groups: dict[tuple[int, int], list[pl.PatchRegion]] = {}
    for reg in regions:
        groups.setdefault((reg.h, reg.w), []).append(reg)
    total = 0.0
    for (h, w), regs in groups.items():
        lossy = np.stack([
            recon[r.y0 : r.y0 + r.h, r.x0 : r.x0 + r.w].transpose(2, 0, 1) for r in regs
        ])
        res = np.stack([
            residual[r.y0 : r.y0 + r.h, r.x0 : r.x0 + r.w].transpose(2, 0, 1) for r in regs
        ])
        loss = model.training_loss([recon], lossy, res, image_idx=np.zeros(len(regs), np.int64))
        total += float(loss.data)
    return total / img.size


@dataclass
class EvalRow:
    name: str
    lossy: float
    residual: float
    total: float
    error: str = ""


@dataclass
class EvalReport:
    rows: list[EvalRow]
    backend_id: str

    @property
    def mean_total(self) -> float:
        ok = [r.total for r in self.rows if not r.error]
        return float(np.mean(ok)) if ok else float("nan")

    @property
    def mean_residual(self) -> float:
        ok = [r.residual for r in self.rows if not r.error]
        return float(np.mean(ok)) if ok else float("nan")

    @property
    def mean_lossy(self) -> float:
        ok = [r.lossy for r in self.rows if not r.error]
        return float(np.mean(ok)) if ok else float("nan")

    def __str__(self):
        width = max([len(r.name) for r in self.rows] + [5])
        out = [f"backend: {self.backend_id}",
               f"{'image':<{width}}  {'lossy':>8}  {'residual':>8}  {'total':>8}"]
        for r in self.rows:
            if r.error:
                out.append(f"{r.name:<{width}}  skipped: {r.error}")
            else:
                out.append(f"{r.name:<{width}}  {r.lossy:>8.4f}  {r.residual:>8.4f}  {r.total:>8.4f}")
        out.append(f"{'mean':<{width}}  {self.mean_lossy:>8.4f}  "
                   f"{self.mean_residual:>8.4f}  {self.mean_total:>8.4f}")
        return "\n".join(out)


def evaluate(checkpoint, corpus_dir, backend="qdown:2", *, workers: int | None = None,
             limit: int | None = None) -> EvalReport:
    """Full encode of every corpus image; per-image and mean bpsp table."""
    if isinstance(checkpoint, (str, Path)):
        checkpoint = load_checkpoint(checkpoint)
    if isinstance(checkpoint, ModelCheckpoint):
        model = EntropyModel.from_checkpoint(checkpoint, dtype=np.float32)
    else:
        model = checkpoint
    if isinstance(backend, str):
        backend = pl.resolve_backend(backend)

    paths = sorted(
        p for p in Path(corpus_dir).iterdir()
        if p.suffix.lower() in (".ppm", ".pgm")
    )
    if limit:
        paths = paths[:limit]
    rows = []
    for p in paths:
        try:
            img = read_image(p)
            data = pl.encode(img, backend, model, workers=workers)
            rep = pl.bpsp(data)
            rows.append(EvalRow(p.name, rep.lossy, rep.residual, rep.total))
        except (CodecError, OSError) as e:
            rows.append(EvalRow(p.name, 0.0, 0.0, 0.0, error=str(e)))
    return EvalReport(rows, backend.id)
