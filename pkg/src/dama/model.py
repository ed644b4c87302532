"""Masked-autoencoder Vision Transformer used by both branches.

The encoder sees only visible patches.  The decoder scatters the encoded
tokens back to their grid positions, fills the remaining positions with a
learnable mask embedding, and predicts pixels for every patch.  A separate
linear feature head maps decoder tokens to encoder-width feature predictions
for the feature-regression objective.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

LN_EPS = 1e-6


@dataclass
class ViTConfig:
    num_patches: int = 64
    patch_dim: int = 8 * 8 * 7
    grid: tuple = (8, 8)
    dim: int = 64
    depth: int = 6
    heads: int = 4
    mlp_ratio: int = 4
    decoder_dim: int = 48
    decoder_depth: int = 2
    decoder_heads: int = 4
    k_blocks: int = 6

    def validate(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder dim {self.decoder_dim} not divisible by {self.decoder_heads} heads")
        if not 1 <= self.k_blocks <= self.depth:
            raise ConfigError(f"k_blocks={self.k_blocks} must lie in [1, depth={self.depth}]")
        if self.dim % 4 or self.decoder_dim % 4:
            raise ConfigError("2-D sinusoidal positions need widths divisible by 4")
        if self.grid[0] * self.grid[1] != self.num_patches:
            raise ConfigError(f"grid {self.grid} does not hold {self.num_patches} patches")

    def to_dict(self):
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def sincos_1d(dim, pos):
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_2d(dim, grid):
    """Fixed 2-D sine/cosine table of shape ``(gh*gw, dim)``."""
    gh, gw = grid
    yy, xx = np.meshgrid(np.arange(gh, dtype=np.float64), np.arange(gw, dtype=np.float64), indexing="ij")
    return np.concatenate([sincos_1d(dim // 2, yy), sincos_1d(dim // 2, xx)], axis=1)


@dataclass
class EncoderOutput:
    latent: Tensor  # (B, k, d) after the final norm
    blocks: list  # per-block outputs, each (B, k, d)
    ids_keep: np.ndarray  # (B, k) ascending visible indices
    ids_masked: np.ndarray  # (B, N - k)


def visible_indices(mask):
    """Split a ``(B, N)`` mask into ascending visible and masked index arrays."""
    mask = np.atleast_2d(np.asarray(mask)).astype(bool)
    order = np.argsort(mask, axis=1, kind="stable")
    n_keep = (~mask).sum(axis=1)
    if np.any(n_keep != n_keep[0]):
        raise ContractError("every row of a batched mask must keep the same number of patches")
    k = int(n_keep[0])
    return order[:, :k], order[:, k:]


def _xavier(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(np.float32)


def linear(x, params, name):
    return x @ params[name + ".w"] + params[name + ".b"]


def attention(x, params, name, heads):
    b, t, d = x.shape
    dh = d // heads

    def split(z):
        return z.reshape(b, t, heads, dh).transpose(0, 2, 1, 3)

    q = split(linear(x, params, name + ".q"))
    k = split(linear(x, params, name + ".k"))
    v = split(linear(x, params, name + ".v"))
    att = T.softmax(T.scale(q @ k.transpose(), 1.0 / np.sqrt(dh)), axis=-1)
    out = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return linear(out, params, name + ".o")


def block(x, params, name, heads):
    h = T.layer_norm(x, params[name + ".ln1.g"], params[name + ".ln1.b"], LN_EPS)
    x = x + attention(h, params, name + ".attn", heads)
    h = T.layer_norm(x, params[name + ".ln2.g"], params[name + ".ln2.b"], LN_EPS)
    h = linear(T.gelu(linear(h, params, name + ".fc1")), params, name + ".fc2")
    return x + h


class DamaViT:
    """Parameters of one branch plus its forward passes."""

    def __init__(self, cfg, rng=None, params=None):
        cfg.validate()
        self.cfg = cfg
        self.pos = sincos_2d(cfg.dim, cfg.grid).astype(np.float32)
        self.dec_pos = sincos_2d(cfg.decoder_dim, cfg.grid).astype(np.float32)
        if params is None:
            params = self._init(rng if rng is not None else np.random.default_rng(0))
        self.params = params

    def _init(self, rng):
        c = self.cfg
        shapes = {}

        def lin(name, i, o):
            shapes[name + ".w"] = ("xavier", (i, o))
            shapes[name + ".b"] = ("zeros", (o,))

        def norm(name, d):
            shapes[name + ".g"] = ("ones", (d,))
            shapes[name + ".b"] = ("zeros", (d,))

        def blk(name, d, ratio):
            norm(name + ".ln1", d)
            for p in "qkvo":
                lin(f"{name}.attn.{p}", d, d)
            norm(name + ".ln2", d)
            lin(name + ".fc1", d, d * ratio)
            lin(name + ".fc2", d * ratio, d)

        lin("patch_embed", c.patch_dim, c.dim)
        for i in range(c.depth):
            blk(f"enc.{i}", c.dim, c.mlp_ratio)
        norm("enc_norm", c.dim)
        lin("dec_embed", c.dim, c.decoder_dim)
        shapes["mask_token"] = ("normal", (c.decoder_dim,))
        for i in range(c.decoder_depth):
            blk(f"dec.{i}", c.decoder_dim, c.mlp_ratio)
        norm("dec_norm", c.decoder_dim)
        lin("pixel_head", c.decoder_dim, c.patch_dim)
        lin("feature_head", c.decoder_dim, c.dim)

        params = {}
        for name, (kind, shape) in shapes.items():
            if kind == "xavier":
                arr = _xavier(rng, *shape)
            elif kind == "normal":
                arr = (0.02 * rng.standard_normal(shape)).astype(np.float32)
            elif kind == "ones":
                arr = np.ones(shape, dtype=np.float32)
            else:
                arr = np.zeros(shape, dtype=np.float32)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return params

    # -- parameter management ---------------------------------------------
    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def clone(self):
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad, name=n)
                  for n, p in self.params.items()}
        return DamaViT(copy.deepcopy(self.cfg), params=params)

    def astype(self, dtype):
        out = self.clone()
        for p in out.params.values():
            p.data = p.data.astype(dtype)
        out.pos = out.pos.astype(dtype)
        out.dec_pos = out.dec_pos.astype(dtype)
        return out

    def requires_grad_(self, flag):
        for p in self.params.values():
            p.requires_grad = flag
        return self

    # -- forward passes ----------------------------------------------------
    def _check_tokens(self, tokens):
        tokens = np.asarray(tokens)
        if tokens.ndim == 2:
            tokens = tokens[None]
        if tokens.shape[1:] != (self.cfg.num_patches, self.cfg.patch_dim):
            raise ShapeError(
                f"tokens {tokens.shape} do not match ({self.cfg.num_patches}, {self.cfg.patch_dim})"
            )
        return tokens

    def encode(self, tokens, mask):
        """Run the encoder on the visible patches of ``tokens`` (B, N, P*P*C)."""
        tokens = self._check_tokens(tokens)
        mask = np.atleast_2d(np.asarray(mask))
        if mask.shape != tokens.shape[:2]:
            raise ShapeError(f"mask {mask.shape} does not match tokens {tokens.shape[:2]}")
        ids_keep, ids_masked = visible_indices(mask)
        if ids_keep.shape[1] == 0:
            raise ContractError("every patch is masked; the encoder needs at least one visible patch")
        dtype = self.params["patch_embed.w"].dtype
        rows = np.arange(tokens.shape[0])[:, None]
        x = Tensor(tokens[rows, ids_keep].astype(dtype, copy=False))
        x = linear(x, self.params, "patch_embed") + Tensor(self.pos[ids_keep].astype(dtype, copy=False))
        blocks = []
        for i in range(self.cfg.depth):
            x = block(x, self.params, f"enc.{i}", self.cfg.heads)
            blocks.append(x)
        latent = T.layer_norm(x, self.params["enc_norm.g"], self.params["enc_norm.b"], LN_EPS)
        return EncoderOutput(latent, blocks, ids_keep, ids_masked)

    def decode(self, enc):
        """Predict pixels (B, N, P*P*C) and decoder features (B, N, decoder_dim)."""
        b, k, _ = enc.latent.shape
        n = self.cfg.num_patches
        dtype = enc.latent.dtype
        x = linear(enc.latent, self.params, "dec_embed")
        fill = Tensor(np.zeros((b, n - k, self.cfg.decoder_dim), dtype=dtype)) + self.params["mask_token"]
        x = T.concat([x, fill], axis=1)
        restore = np.argsort(np.concatenate([enc.ids_keep, enc.ids_masked], axis=1), axis=1)
        x = T.gather_rows(x, restore) + Tensor(self.dec_pos.astype(dtype, copy=False))
        for i in range(self.cfg.decoder_depth):
            x = block(x, self.params, f"dec.{i}", self.cfg.decoder_heads)
        feats = T.layer_norm(x, self.params["dec_norm.g"], self.params["dec_norm.b"], LN_EPS)
        return linear(feats, self.params, "pixel_head"), feats

    def feature_predict(self, dec_feats, positions):
        """Map decoder tokens at ``positions`` (B, k) to encoder-width features."""
        positions = np.atleast_2d(np.asarray(positions))
        if positions.shape[1] == 0:
            raise ContractError("feature prediction needs at least one selected position")
        return linear(T.gather_rows(dec_feats, positions), self.params, "feature_head")

    def features(self, tokens):
        """Mean-pooled encoder output over all patches (no masking)."""
        tokens = self._check_tokens(tokens)
        enc = self.encode(tokens, np.zeros(tokens.shape[:2], dtype=np.int8))
        return T.mean(enc.latent, axis=1)


def feature_target(blocks, k):
    """Average of the last ``k`` block outputs, each layer-normalized without affine. Detached."""
    if not 1 <= k <= len(blocks):
        raise ConfigError(f"k={k} must lie in [1, {len(blocks)}]")
    acc = None
    for blk in blocks[-k:]:
        x = blk.data if isinstance(blk, Tensor) else np.asarray(blk)
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        normed = (x - mu) / np.sqrt(var + x.dtype.type(LN_EPS))
        acc = normed if acc is None else acc + normed
    return Tensor(acc / acc.dtype.type(k))


def ema_update(teacher, student, lam):
    """In place: teacher <- lam * teacher + (1 - lam) * student."""
    if not 0.0 <= lam <= 1.0:
        raise ContractError(f"EMA coefficient must lie in [0, 1], got {lam}")
    if teacher.params.keys() != student.params.keys():
        raise ContractError("teacher and student have different parameter sets")
    for name, t in teacher.params.items():
        s = student.params[name]
        if t.shape != s.shape:
            raise ContractError(f"parameter {name}: teacher {t.shape} vs student {s.shape}")
        a = t.dtype.type(lam)
        t.data = a * t.data + (t.dtype.type(1.0) - a) * s.data
