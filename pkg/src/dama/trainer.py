"""Dual-branch pretraining: configuration, schedules, optimizer, training loop, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import apply_augment, draw_augment
from .errors import ConfigError, FormatError, NumericError
from .losses import LossReport, pixel_loss, smooth_l1, total_loss
from .masking import adaptive_mask, random_mask, random_overlap_mask
from .model import DamaViT, ViTConfig, ema_update, feature_target
from .patching import patch_targets, patchify

log = logging.getLogger(__name__)

COUPLINGS = ("student_ema", "shared_weights", "two_students")
STRATEGIES = ("random_overlap", "adaptive_no_overlap", "adaptive_overlap")
METRIC_FIELDS = ("step", "epoch", "lr", "lambda", "L_p1", "L_p2", "L_f", "L_total")

CKPT_MAGIC = b"DAMA"
CKPT_VERSION = 1


@dataclass
class ModelSize:
    dim: int = 64
    depth: int = 6
    heads: int = 4
    decoder_dim: int = 48
    decoder_depth: int = 2
    decoder_heads: int = 4
    mlp_ratio: int = 4


@dataclass
class TrainConfig:
    coupling: str = "two_students"
    mask_strategy: str = "adaptive_overlap"
    mask_ratio: float = 0.8
    overlap_ratio: float = 0.5
    alpha: float = 1.0
    beta: float = 2.0
    k_blocks: int = 6
    lr: float = 1.5e-4
    min_lr: float = 0.0
    weight_decay: float = 0.05
    adam_betas: tuple = (0.9, 0.95)
    warmup_epochs: float = 1.0
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    image_size: int = 64
    patch_size: int = 8
    channels: int = 7
    normalize_targets: bool = False
    augment: bool = True
    ema_start: float = 0.996
    model: ModelSize = field(default_factory=ModelSize)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        model = d.pop("model", {}) or {}
        bad = set(model) - set(ModelSize.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown model keys: {sorted(bad)}")
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        cfg = cls(**d, model=ModelSize(**model))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, TypeError) as exc:
            raise ConfigError(f"{path}: {exc}") from exc

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    def validate(self):
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"coupling must be one of {COUPLINGS}, got {self.coupling!r}")
        if self.mask_strategy not in STRATEGIES:
            raise ConfigError(f"mask_strategy must be one of {STRATEGIES}, got {self.mask_strategy!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        # every strategy builds m2 by exchanging patches of m1, which needs ratio >= 0.5
        if self.mask_ratio < 0.5:
            raise ConfigError(f"{self.mask_strategy} needs mask_ratio >= 0.5, got {self.mask_ratio}")
        if not 0.0 <= self.overlap_ratio <= 1.0:
            raise ConfigError(f"overlap_ratio must lie in [0, 1], got {self.overlap_ratio}")
        if self.alpha < 0 or self.beta <= 0:
            raise ConfigError("alpha must be >= 0 and beta > 0")
        if not 1 <= self.k_blocks <= self.model.depth:
            raise ConfigError(f"k_blocks={self.k_blocks} exceeds encoder depth {self.model.depth}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image size {self.image_size} not divisible by patch {self.patch_size}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.warmup_epochs < 0 or self.warmup_epochs > self.epochs:
            raise ConfigError(f"warmup_epochs={self.warmup_epochs} outside [0, epochs]")
        n = (self.image_size // self.patch_size) ** 2
        if int(n * (1 - self.mask_ratio)) < 1:
            raise ConfigError(f"mask_ratio {self.mask_ratio} leaves no visible patch out of {n}")

    def vit_config(self):
        g = self.image_size // self.patch_size
        m = self.model
        return ViTConfig(
            num_patches=g * g, patch_dim=self.patch_size ** 2 * self.channels, grid=(g, g),
            dim=m.dim, depth=m.depth, heads=m.heads, mlp_ratio=m.mlp_ratio,
            decoder_dim=m.decoder_dim, decoder_depth=m.decoder_depth,
            decoder_heads=m.decoder_heads, k_blocks=self.k_blocks,
        )


# -- schedules -----------------------------------------------------------------


def lr_at(step, base_lr, warmup_steps, total_steps, min_lr=0.0):
    """Linear warmup from 0, then half-cosine decay to ``min_lr`` at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return min_lr + (base_lr - min_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


def lambda_at(step, total_steps, start=0.996):
    """EMA coefficient rising from ``start`` to 1 on a cosine."""
    if total_steps <= 0:
        return 1.0
    t = min(max(step, 0), total_steps)
    return 1.0 - (1.0 - start) * (1.0 + math.cos(math.pi * t / total_steps)) / 2.0


# -- optimizer -----------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay on matrices (biases, norms and the mask token are not decayed)."""

    def __init__(self, named_params, betas=(0.9, 0.95), eps=1e-8, weight_decay=0.05):
        self.params = list(named_params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m, v = self.m[name], self.v[name]
            m *= p.dtype.type(self.b1)
            m += p.dtype.type(1.0 - self.b1) * g
            v *= p.dtype.type(self.b2)
            v += p.dtype.type(1.0 - self.b2) * g * g
            if p.ndim >= 2 and self.weight_decay:
                p.data = p.data * p.dtype.type(1.0 - lr * self.weight_decay)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - p.dtype.type(lr) * update.astype(p.dtype, copy=False)

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None


# -- training state ------------------------------------------------------------


@dataclass
class TrainState:
    config: TrainConfig
    branch1: DamaViT
    branch2: DamaViT
    optimizer: AdamW
    rng: np.random.Generator
    step: int = 0
    steps_per_epoch: int = 0
    metrics: list = field(default_factory=list)

    @property
    def total_steps(self):
        return self.config.epochs * self.steps_per_epoch

    @property
    def epoch(self):
        return self.step // self.steps_per_epoch if self.steps_per_epoch else 0

    def named_parameters(self):
        """Parameters as stored on disk; branch 2 is omitted when it aliases branch 1."""
        out = [(f"b1/{n}", p) for n, p in self.branch1.named_parameters()]
        if self.branch2 is not self.branch1:
            out += [(f"b2/{n}", p) for n, p in self.branch2.named_parameters()]
        return out


def init_state(cfg, n_images):
    """Fresh models and optimizer for ``cfg``; the seed fixes everything."""
    cfg.validate()
    vit = cfg.vit_config()
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    branch1 = DamaViT(vit, np.random.default_rng(seeds[0]))
    if cfg.coupling == "shared_weights":
        branch2 = branch1
        trainable = [(f"b1/{n}", p) for n, p in branch1.named_parameters()]
    elif cfg.coupling == "student_ema":
        branch2 = branch1.clone().requires_grad_(False)
        trainable = [(f"b1/{n}", p) for n, p in branch1.named_parameters()]
    else:
        branch2 = DamaViT(vit, np.random.default_rng(seeds[1]))
        trainable = ([(f"b1/{n}", p) for n, p in branch1.named_parameters()]
                     + [(f"b2/{n}", p) for n, p in branch2.named_parameters()])
    opt = AdamW(trainable, betas=cfg.adam_betas, weight_decay=cfg.weight_decay)
    spe = max(1, math.ceil(n_images / cfg.batch_size))
    return TrainState(cfg, branch1, branch2, opt, np.random.default_rng(seeds[2]), 0, spe)


def _second_mask(cfg, m1, losses, rng):
    if cfg.mask_strategy == "random_overlap":
        return random_overlap_mask(m1, cfg.mask_ratio, cfg.overlap_ratio, rng)
    overlap = 0.0 if cfg.mask_strategy == "adaptive_no_overlap" else cfg.overlap_ratio
    return adaptive_mask(m1, losses, cfg.mask_ratio, overlap)


def train_step(state, images):
    """One optimization step on a batch of ``(B, H, W, C)`` images."""
    cfg = state.config
    rng = state.rng
    if len(images) == 0:
        raise ConfigError("empty batch")
    if cfg.augment:
        images = np.stack([apply_augment(img, draw_augment(rng, max_shift=cfg.patch_size - 1))
                           for img in images])
    grid = patchify(images, cfg.patch_size)
    tokens = grid.tokens
    targets = patch_targets(grid, normalize=cfg.normalize_targets)
    b1, b2 = state.branch1, state.branch2
    n = tokens.shape[1]

    m1 = random_mask(n, cfg.mask_ratio, rng, batch=len(tokens))
    enc1 = b1.encode(tokens, m1)
    pred1, dec_feats1 = b1.decode(enc1)
    lp1, losses1 = pixel_loss(pred1, targets, m1)
    if not np.all(np.isfinite(losses1)):
        raise NumericError(f"L_p1 is not finite at step {state.step}", step=state.step)

    m2 = _second_mask(cfg, m1, losses1, rng)
    if cfg.coupling == "student_ema":
        with T.no_grad():
            enc2 = b2.encode(tokens, m2)
            pred2, _ = b2.decode(enc2)
            lp2, losses2 = pixel_loss(pred2, targets, m2)
    else:
        enc2 = b2.encode(tokens, m2)
        pred2, _ = b2.decode(enc2)
        lp2, losses2 = pixel_loss(pred2, targets, m2)

    target = feature_target(enc2.blocks, cfg.k_blocks)
    pred_f = b1.feature_predict(dec_feats1, enc2.ids_keep)
    lf = smooth_l1(pred_f, target, cfg.beta)
    total = total_loss(lp1, lp2, lf, cfg.alpha, step=state.step)

    lr = lr_at(state.step, cfg.lr, cfg.warmup_epochs * state.steps_per_epoch,
               state.total_steps, cfg.min_lr)
    lam = lambda_at(state.step, state.total_steps, cfg.ema_start)
    T.backward(total)
    state.optimizer.step(lr)
    state.optimizer.zero_grad()
    if cfg.coupling == "student_ema":
        ema_update(b2, b1, lam)

    report = LossReport(lp1.item(), lp2.item(), lf.item(), total.item(), losses1, losses2)
    state.metrics.append({
        "step": state.step, "epoch": state.epoch, "lr": lr, "lambda": lam,
        "L_p1": report.L_p1, "L_p2": report.L_p2, "L_f": report.L_f, "L_total": report.L_total,
    })
    state.step += 1
    return report


def epoch_order(seed, epoch, n):
    return np.random.default_rng([seed, epoch]).permutation(n)


def pretrain(cfg, dataset, epochs=None, seed=None, state=None, max_steps=None,
             checkpoint_path=None, save_every=None, metrics_path=None):
    """Train until ``cfg.epochs`` are done (or ``max_steps`` more steps); returns the state.

    ``epochs`` / ``seed`` override the config.  Passing ``state`` resumes a
    previous run.  With ``checkpoint_path`` a checkpoint is written every
    ``save_every`` epochs and at the end.
    """
    if epochs is not None or seed is not None:
        cfg = TrainConfig.from_dict({**cfg.to_dict(),
                                     **({"epochs": epochs} if epochs is not None else {}),
                                     **({"seed": seed} if seed is not None else {})})
    images = dataset.images if hasattr(dataset, "images") else np.asarray(dataset)
    if len(images) == 0:
        raise ConfigError("dataset is empty")
    if images.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
        raise ConfigError(
            f"dataset images {images.shape[1:]} do not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.channels})"
        )
    if state is None:
        state = init_state(cfg, len(images))
    spe = state.steps_per_epoch
    stop = state.total_steps if max_steps is None else min(state.total_steps, state.step + max_steps)
    order_epoch, order = None, None
    while state.step < stop:
        epoch, pos = divmod(state.step, spe)
        if epoch != order_epoch:
            order_epoch, order = epoch, epoch_order(state.config.seed, epoch, len(images))
        idx = order[pos * state.config.batch_size:(pos + 1) * state.config.batch_size]
        report = train_step(state, images[idx])
        if state.step % spe == 0:
            log.info("epoch %d done: L_total=%.5f", epoch, report.L_total)
            if checkpoint_path and save_every and (epoch + 1) % save_every == 0:
                save_checkpoint(state, checkpoint_path)
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    if metrics_path:
        write_metrics(state.metrics, metrics_path)
    return state


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([r["step"], r["epoch"]] + [repr(float(r[k])) for k in METRIC_FIELDS[2:]])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in r.items()} for r in rows]


# -- checkpoints ---------------------------------------------------------------


def _write_records(fh, records):
    fh.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f4")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise FormatError(f"{self.path}: truncated checkpoint", offset=self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def records(self):
        out = {}
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode()
            rank = self.u32()
            dims = struct.unpack(f"<{rank}I", self.take(4 * rank))
            n = int(np.prod(dims)) if rank else 1
            out[name] = np.frombuffer(self.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
        return out


def save_checkpoint(state, path):
    meta = {
        "config": state.config.to_dict(),
        "step": state.step,
        "steps_per_epoch": state.steps_per_epoch,
        "optimizer_t": state.optimizer.t,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    params = [(n, p.data) for n, p in state.named_parameters()]
    moments = ([(f"m/{n}", a) for n, a in state.optimizer.m.items()]
               + [(f"v/{n}", a) for n, a in state.optimizer.v.items()])
    rng_blob = json.dumps(state.rng.bit_generator.state).encode()
    try:
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<II", CKPT_VERSION, len(blob)))
            fh.write(blob)
            _write_records(fh, params)
            _write_records(fh, moments)
            fh.write(struct.pack("<I", len(rng_blob)))
            fh.write(rng_blob)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path):
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf, path)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)", offset=0)
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}", offset=4)
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt config blob", offset=12) from exc
    params = r.records()
    moments = r.records()
    rng_state = json.loads(r.take(r.u32()).decode())
    if r.pos != len(buf):
        raise FormatError(f"{path}: trailing bytes", offset=r.pos)

    cfg = TrainConfig.from_dict(meta["config"])
    state = init_state(cfg, 1)
    state.steps_per_epoch = meta["steps_per_epoch"]
    state.step = meta["step"]
    for name, p in state.named_parameters():
        if name not in params or params[name].shape != p.shape:
            raise FormatError(f"{path}: missing or misshapen parameter {name}")
        p.data = params[name]
    opt = state.optimizer
    opt.t = meta["optimizer_t"]
    for name in opt.m:
        opt.m[name] = moments[f"m/{name}"].copy()
        opt.v[name] = moments[f"v/{name}"].copy()
    state.rng.bit_generator.state = rng_state
    return state
