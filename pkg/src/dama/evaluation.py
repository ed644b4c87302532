"""Downstream classification: linear probe and finetuning, fold protocol, ablation grids."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .patching import patchify
from .tensor import Tensor
from .trainer import AdamW, TrainConfig, init_state, lr_at, pretrain

log = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    mode: str = "linear_probe"
    fraction: float = 1.0
    folds: int = 10
    epochs: int = 100
    lr: float = 1e-2
    batch_size: int = 64
    weight_decay: float = 0.0
    warmup_epochs: int = 5
    min_lr: float = 1e-5
    train_split: float = 0.6
    seed: int = 0

    def validate(self, n_images, n_classes):
        if self.mode not in ("linear_probe", "finetune"):
            raise ConfigError(f"mode must be linear_probe or finetune, got {self.mode!r}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"label fraction must lie in (0, 1], got {self.fraction}")
        if self.folds < 1:
            raise ConfigError("need at least one fold")
        if self.fraction * n_images < n_classes or self._n_train(n_images) < n_classes:
            raise ConfigError(
                f"label fraction {self.fraction} of {n_images} images cannot cover {n_classes} classes"
            )

    def _n_train(self, n_images):
        return int(self.fraction * int(self.train_split * n_images))


@dataclass
class EvalReport:
    fold_accuracy: list = field(default_factory=list)

    @property
    def mean(self):
        return float(np.mean(self.fold_accuracy))

    @property
    def std(self):
        acc = np.asarray(self.fold_accuracy, dtype=np.float64)
        return float(acc.std(ddof=1)) if len(acc) > 1 else 0.0


class ClassifierHead:
    """Linear map from pooled encoder features to class logits."""

    def __init__(self, dim, n_classes, rng):
        bound = 1.0 / math.sqrt(dim)
        self.w = Tensor(rng.uniform(-bound, bound, (dim, n_classes)).astype(np.float32),
                        requires_grad=True, name="head.w")
        self.b = Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True, name="head.b")

    def __call__(self, feats):
        return feats @ self.w + self.b

    def named_parameters(self):
        return [("head.w", self.w), ("head.b", self.b)]


def classify_logits(model, head, tokens):
    """Mean-pool every token of the encoder output and apply the linear head."""
    return head(model.features(tokens))


def cross_entropy(logits, labels):
    labels = np.asarray(labels)
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return T.scale(T.sum_(T.log_softmax(logits) * Tensor(onehot)), -1.0 / len(labels))


def extract_features(model, images, patch, batch_size=128):
    out = []
    with T.no_grad():
        for i in range(0, len(images), batch_size):
            tokens = patchify(images[i:i + batch_size], patch).tokens
            out.append(model.features(tokens).data)
    return np.concatenate(out)


def fold_split(n, seed, fold, train_split=0.6):
    perm = np.random.default_rng([seed, fold]).permutation(n)
    n_train = int(train_split * n)
    return perm[:n_train], perm[n_train:]


def _minibatches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def train_probe(feats, labels, n_classes, cfg, rng):
    """Fit a linear head on standardized frozen features; returns a predict function."""
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0) + 1e-6
    x = ((feats - mu) / sd).astype(np.float32)
    head = ClassifierHead(x.shape[1], n_classes, rng)
    opt = AdamW(head.named_parameters(), betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        for idx in _minibatches(len(x), cfg.batch_size, rng):
            loss = cross_entropy(head(Tensor(x[idx])), labels[idx])
            T.backward(loss)
            opt.step(lr_at(step, cfg.lr, 0, total, cfg.min_lr))
            opt.zero_grad()
            step += 1

    def predict(f):
        with T.no_grad():
            z = Tensor(((f - mu) / sd).astype(np.float32))
            return head(z).data.argmax(axis=1)

    return predict


def finetune(model, images, labels, n_classes, cfg, patch, rng):
    """Train a copy of the encoder together with a linear head; returns the tuned copy and head."""
    model = model.clone().requires_grad_(True)
    head = ClassifierHead(model.cfg.dim, n_classes, rng)
    enc_params = [(n, p) for n, p in model.named_parameters() if not n.startswith(("dec", "mask_token",
                                                                                     "pixel_head", "feature_head"))]
    opt = AdamW(enc_params + head.named_parameters(), betas=(0.9, 0.999), weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(images) / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    warmup = min(cfg.warmup_epochs, cfg.epochs) * steps_per_epoch
    step = 0
    for _ in range(cfg.epochs):
        for idx in _minibatches(len(images), cfg.batch_size, rng):
            tokens = patchify(images[idx], patch).tokens
            loss = cross_entropy(classify_logits(model, head, tokens), labels[idx])
            T.backward(loss)
            opt.step(lr_at(step, cfg.lr, warmup, total, cfg.min_lr))
            opt.zero_grad()
            step += 1
    return model, head


def evaluate(model, dataset, cfg, patch, n_classes=5):
    """Run the fold protocol and return per-fold test accuracy."""
    if dataset.labels is None:
        raise ConfigError("evaluation needs a labeled dataset")
    images, labels = dataset.images, np.asarray(dataset.labels)
    cfg.validate(len(images), n_classes)
    report = EvalReport()
    feats = extract_features(model, images, patch) if cfg.mode == "linear_probe" else None
    for fold in range(cfg.folds):
        train_idx, test_idx = fold_split(len(images), cfg.seed, fold, cfg.train_split)
        train_idx = train_idx[:cfg._n_train(len(images))]
        rng = np.random.default_rng([cfg.seed, fold, 1])
        if cfg.mode == "linear_probe":
            predict = train_probe(feats[train_idx], labels[train_idx], n_classes, cfg, rng)
            pred = predict(feats[test_idx])
        else:
            tuned, head = finetune(model, images[train_idx], labels[train_idx], n_classes, cfg, patch, rng)
            pred = []
            with T.no_grad():
                for i in range(0, len(test_idx), 128):
                    tokens = patchify(images[test_idx[i:i + 128]], patch).tokens
                    pred.append(classify_logits(tuned, head, tokens).data.argmax(axis=1))
            pred = np.concatenate(pred)
        acc = float((pred == labels[test_idx]).mean())
        log.info("fold %d: accuracy %.4f", fold, acc)
        report.fold_accuracy.append(acc)
    return report


def random_init_model(train_cfg):
    """Branch-1 encoder exactly as initialized before pretraining."""
    return init_state(train_cfg, 1).branch1


# -- ablation ------------------------------------------------------------------

ABLATION_FIELDS = ("mask_strategy", "coupling", "mask_ratio", "seeds", "accuracy_mean", "accuracy_std",
                   "status")


def expand_grid(grid):
    """Cartesian product of the list-valued keys of ``grid`` over strategy, coupling and ratio."""
    strategies = grid.get("mask_strategy", ["adaptive_overlap"])
    couplings = grid.get("coupling", ["two_students"])
    ratios = grid.get("mask_ratio", [0.8])
    return list(itertools.product(strategies, couplings, ratios))


def ablate(grid, dataset, base=None, eval_cfg=None, seeds=(0,), eval_dataset=None):
    """Pretrain and evaluate every grid cell; invalid cells are reported and skipped.

    Returns one row per cell with the mean/std accuracy over ``seeds``.  The
    evaluation split seed is shared across cells so comparisons are paired.
    ``eval_dataset`` defaults to the pretraining set.
    """
    base = base or TrainConfig()
    eval_dataset = dataset if eval_dataset is None else eval_dataset
    eval_cfg = eval_cfg or EvalConfig()
    rows = []
    for strategy, coupling, ratio in expand_grid(grid):
        row = {"mask_strategy": strategy, "coupling": coupling, "mask_ratio": ratio, "seeds": len(seeds)}
        try:
            cfg = TrainConfig.from_dict({**base.to_dict(), "mask_strategy": strategy,
                                         "coupling": coupling, "mask_ratio": ratio})
        except ConfigError as exc:
            log.warning("skipping cell %s/%s/%.2f: %s", strategy, coupling, ratio, exc)
            rows.append({**row, "accuracy_mean": "", "accuracy_std": "", "status": f"skipped: {exc}"})
            continue
        accs = []
        for seed in seeds:
            state = pretrain(cfg, dataset, seed=seed)
            accs.append(evaluate(state.branch1, eval_dataset, eval_cfg, cfg.patch_size).mean)
        rows.append({**row, "accuracy_mean": float(np.mean(accs)),
                     "accuracy_std": float(np.std(accs, ddof=1)) if len(accs) > 1 else 0.0,
                     "status": "ok"})
    return rows


# -- mask tracing --------------------------------------------------------------


@dataclass
class TraceRecord:
    step: int
    m1: np.ndarray
    loss: np.ndarray
    m2: np.ndarray


def mask_trace(model, cfg, image, steps, rng):
    """Branch-1 forward on fresh random masks followed by adaptive masking, ``steps`` times."""
    from .losses import pixel_loss
    from .masking import adaptive_mask, random_mask
    from .patching import patch_targets

    grid = patchify(np.asarray(image)[None], cfg.patch_size)
    targets = patch_targets(grid, normalize=cfg.normalize_targets)
    overlap = 0.0 if cfg.mask_strategy == "adaptive_no_overlap" else cfg.overlap_ratio
    n = grid.tokens.shape[1]
    records = []
    for step in range(steps):
        m1 = random_mask(n, cfg.mask_ratio, rng, batch=1)
        with T.no_grad():
            pred, _ = model.decode(model.encode(grid.tokens, m1))
            _, losses = pixel_loss(pred, targets, m1)
        m2 = adaptive_mask(m1, losses, cfg.mask_ratio, overlap)
        records.append(TraceRecord(step, m1[0], losses[0].astype(np.float64), m2[0]))
    return records
