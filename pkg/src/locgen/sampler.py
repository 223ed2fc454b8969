"""Top-k / temperature sampling of boxes, with validity and region masks.

Decoding uses a numpy-only inference path with a key/value cache: the scene
prefix is encoded once per (scene, class) and all draws for that pair are
decoded together. Each draw owns a counter-based random stream keyed by its
index, so draw ``i`` is the same whether 1 or 1000 boxes are requested.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import BBox
from .model import ModelParams, _scene_patches
from .rng import counter_uniforms


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class SamplerConfig:
    top_k: int = 8
    temperature: float = 1.0
    max_draws: int = 100
    min_box_bins: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.top_k < 1:
            raise SamplingError("top_k must be >= 1")
        if not self.temperature > 0:
            raise SamplingError("temperature must be > 0")
        if self.max_draws < 1 or self.min_box_bins < 1:
            raise SamplingError("max_draws and min_box_bins must be >= 1")


@dataclass(frozen=True)
class Region:
    """Allowed sampling rectangle in pixels, inclusive of its edges."""
    rx1: int
    ry1: int
    rx2: int
    ry2: int

    def __post_init__(self):
        if not (0 <= self.rx1 < self.rx2 and 0 <= self.ry1 < self.ry2):
            raise SamplingError(f"region {self.as_list()} must be canonical with positive area")

    def as_list(self):
        return [self.rx1, self.ry1, self.rx2, self.ry2]

    @classmethod
    def full(cls, image_size: int) -> "Region":
        return cls(0, 0, image_size, image_size)

    @classmethod
    def parse(cls, text: str) -> "Region":
        parts = text.split(",")
        if len(parts) != 4:
            raise SamplingError(f"region must be rx1,ry1,rx2,ry2; got {text!r}")
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise SamplingError(f"region must be four integers; got {text!r}") from None
        return cls(*vals)


# -- distributions ------------------------------------------------------------

def next_token_distribution(logits: np.ndarray, config: SamplerConfig, allowed: np.ndarray | None = None,
                            num_bins: int | None = None) -> np.ndarray:
    """Probabilities over the vocabulary for one step, or rows of a (B, V) batch.

    Special tokens (SOS, EOS: ids >= ``num_bins``) and tokens outside
    ``allowed`` are dropped first, then the ``top_k`` largest remaining
    logits are kept (ties go to the lower id), scaled by the temperature
    and normalised.
    """
    logits = np.asarray(logits, dtype=np.float64)
    single = logits.ndim == 1
    z = np.atleast_2d(logits).copy()
    B, V = z.shape
    if not np.isfinite(z).all():
        raise SamplingError("logits must be finite")
    nb = V - 2 if num_bins is None else num_bins
    keep = np.zeros((B, V), dtype=bool)
    keep[:, :nb] = True
    if allowed is not None:
        keep &= np.atleast_2d(allowed)
    if not keep.any(axis=1).all():
        raise SamplingError("every token is masked")
    z[~keep] = -np.inf
    order = np.argsort(-z, axis=1, kind="stable")
    k = min(config.top_k, V)
    drop = order[:, k:]
    np.put_along_axis(z, drop, -np.inf, axis=1)
    z = z / config.temperature
    z -= z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[0] if single else p


def _bounds(region: Region, num_bins: int):
    """Inclusive token ranges allowed by the region on each axis."""
    return (max(0, region.rx1), min(num_bins - 1, region.rx2),
            max(0, region.ry1), min(num_bins - 1, region.ry2))


def step_mask(step: int, prev: np.ndarray, num_bins: int, vocab: int, m: int, region: Region) -> np.ndarray:
    """(B, vocab) boolean mask of admissible tokens for coordinate ``step`` (0..3).

    Steps 0/1 leave room for a box of at least ``m`` bins; steps 2/3 enforce
    ``x2 >= x1 + m`` and ``y2 >= y1 + m``. All coordinates stay inside the region.
    """
    B = prev.shape[0]
    lox, hix, loy, hiy = _bounds(region, num_bins)
    t = np.arange(vocab)[None, :]
    lo, hi = (lox, hix) if step in (0, 2) else (loy, hiy)
    if step < 2:
        mask = (t >= lo) & (t <= hi - m)
        return np.broadcast_to(mask, (B, vocab))
    start = prev[:, step - 2][:, None]
    return (t >= np.maximum(lo, start + m)) & (t <= hi)


# -- cached inference -----------------------------------------------------------

def _ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    return xc / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps) * g + b


_GC = math.sqrt(2.0 / math.pi)


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GC * (x + 0.044715 * (x * x * x))))


class Decoder:
    """Incremental decoder for one (scene, class) prefix shared by a batch of draws."""

    def __init__(self, params: ModelParams, scene, cls: int):
        cfg = self.cfg = params.config
        self.W = W = params.tensors
        if not 0 <= int(cls) < cfg.num_classes:
            raise SamplingError(f"class id {cls} outside [0, {cfg.num_classes})")
        patches = _scene_patches(scene, cfg)[0].astype(W["patch_w"].dtype)
        x = patches @ W["patch_w"] + W["patch_b"] + W["patch_pos"]
        x = np.concatenate([x, W["class_emb"][int(cls)][None]], axis=0)  # (T0, d)
        self.cache = []
        T0 = x.shape[0]
        mask = np.triu(np.full((T0, T0), -1e9, dtype=x.dtype), k=1)
        for i in range(cfg.n_layers):
            q, k, v = self._qkv(x, i)
            att = q @ k.transpose(0, 2, 1) / math.sqrt(cfg.d_model // cfg.n_heads) + mask
            y = self._attend(att, v)
            x = self._finish_block(x, y, i)
            self.cache.append((k, v))
        self.n_tok = 0
        self.tok_cache = [(None, None)] * cfg.n_layers

    def _qkv(self, x, i):
        cfg, W = self.cfg, self.W
        H, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        h = _ln(x, W[f"h{i}.ln1_g"], W[f"h{i}.ln1_b"])
        qkv = h @ W[f"h{i}.qkv_w"] + W[f"h{i}.qkv_b"]
        qkv = qkv.reshape(qkv.shape[:-1] + (3, H, dh))  # (..., T, 3, H, dh)
        qkv = np.swapaxes(np.moveaxis(qkv, -3, 0), -3, -2)  # (3, ..., H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        return q, k, v

    @staticmethod
    def _attend(att, v):
        att = att - att.max(-1, keepdims=True)
        e = np.exp(att)
        return (e / e.sum(-1, keepdims=True)) @ v

    def _finish_block(self, x, y, i):
        W = self.W
        y = np.moveaxis(y, -3, -2)
        y = y.reshape(y.shape[:-2] + (-1,))
        x = x + y @ W[f"h{i}.proj_w"] + W[f"h{i}.proj_b"]
        h = _ln(x, W[f"h{i}.ln2_g"], W[f"h{i}.ln2_b"])
        return x + _gelu(h @ W[f"h{i}.fc_w"] + W[f"h{i}.fc_b"]) @ W[f"h{i}.out_w"] + W[f"h{i}.out_b"]

    def start(self, batch: int) -> np.ndarray:
        """Reset to ``batch`` empty sequences; returns logits (batch, vocab) for b1."""
        self.n_tok = 0
        self.tok_cache = [(None, None)] * self.cfg.n_layers
        return self.feed(np.full(batch, self.cfg.sos))

    def feed(self, tokens: np.ndarray) -> np.ndarray:
        """Append one token per sequence; returns next-token logits (B, vocab)."""
        cfg, W = self.cfg, self.W
        B = len(tokens)
        x = (W["tok_emb"][tokens] + W["tok_pos"][self.n_tok])[:, None, :]  # (B, 1, d)
        dh = cfg.d_model // cfg.n_heads
        for i in range(cfg.n_layers):
            q, k, v = self._qkv(x, i)  # (B, H, 1, dh)
            pk, pv = self.cache[i]
            tk, tv = self.tok_cache[i]
            tk = k if tk is None else np.concatenate([tk, k], axis=2)
            tv = v if tv is None else np.concatenate([tv, v], axis=2)
            self.tok_cache[i] = (tk, tv)
            scale = 1.0 / math.sqrt(dh)
            qh = q[:, :, 0].transpose(1, 0, 2)  # (H, B, dh)
            s_pre = (qh @ pk.transpose(0, 2, 1)).transpose(1, 0, 2)[:, :, None] * scale
            s_tok = (q @ tk.transpose(0, 1, 3, 2)) * scale
            att = np.concatenate([s_pre, s_tok], axis=-1)
            att = att - att.max(-1, keepdims=True)
            e = np.exp(att)
            e /= e.sum(-1, keepdims=True)
            Tp = pk.shape[1]
            y_pre = (e[:, :, 0, :Tp].transpose(1, 0, 2) @ pv).transpose(1, 0, 2)[:, :, None]
            y = y_pre + e[..., Tp:] @ tv
            x = self._finish_block(x, y, i)
        self.n_tok += 1
        x = _ln(x[:, 0], W["lnf_g"], W["lnf_b"])
        return x @ W["head_w"] + W["head_b"]


# -- sampling -----------------------------------------------------------------

def _decode(params: ModelParams, scene, cls: int, config: SamplerConfig, region: Region,
            draw_ids, stream: tuple) -> tuple[np.ndarray, np.ndarray]:
    """Tokens (B, 4) and their log-probabilities under the sampling distribution."""
    cfg = params.config
    m = config.min_box_bins
    lox, hix, loy, hiy = _bounds(region, cfg.num_bins)
    if hix - lox < m or hiy - loy < m:
        raise SamplingError(f"region {region.as_list()} cannot hold a box of {m} bins per side")
    u = counter_uniforms(config.seed, stream, draw_ids, 4)
    B = len(draw_ids)
    dec = Decoder(params, scene, cls)
    logits = dec.start(B)
    toks = np.zeros((B, 4), dtype=np.int64)
    logp = np.zeros(B)
    for step in range(4):
        allowed = step_mask(step, toks, cfg.num_bins, cfg.vocab_size, m, region)
        p = next_token_distribution(logits, config, allowed, cfg.num_bins)
        cdf = np.cumsum(p, axis=1)
        t = (cdf <= (u[:, step] * cdf[:, -1])[:, None]).sum(axis=1)
        t = np.minimum(t, cfg.num_bins - 1)
        # cumulative round-off can land on a zero-probability token
        bad = p[np.arange(B), t] == 0
        if bad.any():
            t[bad] = np.argmax(p[bad] > 0, axis=1)
        toks[:, step] = t
        logp += np.log(p[np.arange(B), t])
        if step < 3:
            logits = dec.feed(t)
    return toks, logp


def _to_boxes(toks: np.ndarray, image_size: int) -> list:
    return [BBox(int(a), int(b), int(c), int(d), image_size) for a, b, c, d in toks]


def sample_k_locations(params: ModelParams, scene, cls: int, config: SamplerConfig, K: int,
                       region: Region | None = None, stream: tuple = (), first_draw: int = 0,
                       return_logprob: bool = False):
    """``K`` independent draws; draw ``i`` uses the random stream ``(*stream, i)``."""
    if K < 1:
        raise SamplingError("K must be >= 1")
    region = region or Region.full(params.config.image_size)
    key = tuple(stream) or (scene.scene_id, int(cls))
    ids = range(first_draw, first_draw + K)
    toks, logp = _decode(params, scene, cls, config, region, ids, key)
    boxes = _to_boxes(toks, params.config.image_size)
    return (boxes, logp) if return_logprob else boxes


def sample_location(params: ModelParams, scene, cls: int, config: SamplerConfig, draw: int = 0,
                    stream: tuple = ()) -> BBox:
    return sample_k_locations(params, scene, cls, config, 1, stream=stream, first_draw=draw)[0]


def constrained_sample(params: ModelParams, scene, cls: int, config: SamplerConfig, region: Region,
                       K: int = 1, stream: tuple = (), first_draw: int = 0) -> list:
    """Like :func:`sample_k_locations` with every coordinate confined to ``region``."""
    return sample_k_locations(params, scene, cls, config, K, region=region, stream=stream,
                              first_draw=first_draw)


def random_baseline(scene, cls: int, K: int, seed: int, classes, stream: tuple = ()) -> list:
    """Uniform random placement: class-range size, position uniform over the image."""
    from .rng import substream

    S = scene.image_size
    spec = classes[int(cls)]
    rs = substream(seed, "random-baseline", *(tuple(stream) or (scene.scene_id, int(cls))))
    out = []
    for _ in range(K):
        area = rs.uniform(*spec.area_frac) * S * S
        aspect = math.exp(rs.uniform(math.log(spec.aspect[0]), math.log(spec.aspect[1])))
        w = min(max(int(round(math.sqrt(area * aspect))), 1), S - 1)
        h = min(max(int(round(area / w)), 1), S - 1)
        x1 = int(rs.integers(0, S - w))
        y1 = int(rs.integers(0, S - h))
        out.append(BBox(x1, y1, x1 + w, y1 + h, S))
    return out
