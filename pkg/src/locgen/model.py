"""Conditional autoregressive location model.

The decoder sees ``[patch tokens | class token | SOS | b1 b2 b3]`` under a
single causal mask and predicts the four box coordinates ``b1..b4``
(``x1, y1, x2, y2``). Token ids ``0..num_bins-1`` are coordinate bins,
``num_bins`` is SOS and ``num_bins + 1`` is EOS.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    patch_size: int = 8
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    num_bins: int = 64
    num_classes: int = 4
    in_channels: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if min(self.image_size, self.patch_size, self.d_model, self.n_layers, self.n_heads,
               self.num_bins, self.num_classes, self.in_channels) <= 0:
            raise ConfigError("all sizes must be positive")

    @property
    def vocab_size(self) -> int:
        return self.num_bins + 2

    @property
    def sos(self) -> int:
        return self.num_bins

    @property
    def eos(self) -> int:
        return self.num_bins + 1

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def prefix_len(self) -> int:
        return self.n_patches + 1

    @property
    def patch_dim(self) -> int:
        return self.in_channels * self.patch_size ** 2


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def n_params(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k]).tobytes())
        return h.hexdigest()[:16]


def param_shapes(cfg: ModelConfig) -> dict:
    d, V = cfg.d_model, cfg.vocab_size
    shapes = {
        "patch_w": (cfg.patch_dim, d),
        "patch_b": (d,),
        "patch_pos": (cfg.n_patches, d),
        "class_emb": (cfg.num_classes, d),
        "tok_emb": (V, d),
        "tok_pos": (4, d),
    }
    for i in range(cfg.n_layers):
        shapes.update({
            f"h{i}.ln1_g": (d,), f"h{i}.ln1_b": (d,),
            f"h{i}.qkv_w": (d, 3 * d), f"h{i}.qkv_b": (3 * d,),
            f"h{i}.proj_w": (d, d), f"h{i}.proj_b": (d,),
            f"h{i}.ln2_g": (d,), f"h{i}.ln2_b": (d,),
            f"h{i}.fc_w": (d, 4 * d), f"h{i}.fc_b": (4 * d,),
            f"h{i}.out_w": (4 * d, d), f"h{i}.out_b": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "head_w": (d, V), "head_b": (V,)})
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32) -> ModelParams:
    """N(0, 0.02^2) weights, unit layernorm gains, zero biases and a zero output head."""
    from .rng import substream

    rs = substream(cfg.seed, "init_params")
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.endswith("_b") or name.startswith("head_"):
            arr = np.zeros(shape)
        else:
            arr = rs.normal(0.0, 0.02, size=shape)
        tensors[name] = arr.astype(dtype)
    return ModelParams(cfg, tensors)


def patchify(grids: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, n_patches, C * p * p), patches in row-major order."""
    B, C, H, W = grids.shape
    p = patch_size
    x = grids.reshape(B, C, H // p, p, W // p, p)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, (H // p) * (W // p), C * p * p)


def _causal_mask(T: int, dtype) -> np.ndarray:
    m = np.triu(np.full((T, T), -1e9), k=1)
    return m.astype(dtype)


def shared_prefix_mask(prefix_len: int, n_cont: int, cont_len: int, dtype=np.float64) -> np.ndarray:
    """Additive mask for a prefix followed by ``n_cont`` independent continuations.

    The prefix is causal over itself; each continuation sees the whole prefix
    and, causally, its own tokens only. With ``n_cont == 1`` this is the plain
    causal mask.
    """
    T = prefix_len + n_cont * cont_len
    m = _causal_mask(T, np.float64)
    grp = np.repeat(np.arange(n_cont), cont_len)
    other = grp[:, None] != grp[None, :]
    m[prefix_len:, prefix_len:][other] = -1e9
    return m.astype(dtype)


def _attention(x: Tensor, P: dict, i: int, cfg: ModelConfig, mask: np.ndarray) -> Tensor:
    B, T, d = x.shape
    H, dh = cfg.n_heads, d // cfg.n_heads
    qkv = ad.matmul(x, P[f"h{i}.qkv_w"]) + P[f"h{i}.qkv_b"]
    qkv = ad.transpose(ad.reshape(qkv, (B, T, 3, H, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = ad.softmax(ad.mask_add(att, mask), axis=-1)
    y = ad.matmul(att, v)
    y = ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (B, T, d))
    return ad.matmul(y, P[f"h{i}.proj_w"]) + P[f"h{i}.proj_b"]


def _block(x: Tensor, P: dict, i: int, cfg: ModelConfig, mask: np.ndarray, keep_from: int = 0) -> Tensor:
    """One pre-norm block; positions before ``keep_from`` are dropped after attention."""
    x = x + _attention(ad.layernorm(x, P[f"h{i}.ln1_g"], P[f"h{i}.ln1_b"]), P, i, cfg, mask)
    if keep_from:
        x = x[:, keep_from:]
    h = ad.layernorm(x, P[f"h{i}.ln2_g"], P[f"h{i}.ln2_b"])
    h = ad.gelu(ad.matmul(h, P[f"h{i}.fc_w"]) + P[f"h{i}.fc_b"])
    return x + ad.matmul(h, P[f"h{i}.out_w"]) + P[f"h{i}.out_b"]


def encode_prefix(P: dict, cfg: ModelConfig, patches: np.ndarray, classes: np.ndarray) -> Tensor:
    """Patch embeddings plus positions, followed by the class embedding: (B, n_patches + 1, d)."""
    B = patches.shape[0]
    if patches.shape[1:] != (cfg.n_patches, cfg.patch_dim):
        raise ConfigError(f"expected patches of shape (B, {cfg.n_patches}, {cfg.patch_dim}), "
                          f"got {patches.shape}; channel count mismatch?")
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= cfg.num_classes):
        raise ConfigError(f"class id outside [0, {cfg.num_classes})")
    dt = P["patch_w"].data.dtype
    x = ad.matmul(Tensor.wrap(patches.astype(dt, copy=False)), P["patch_w"]) + P["patch_b"]
    x = x + P["patch_pos"]
    c = ad.reshape(ad.embedding_lookup(P["class_emb"], classes), (B, 1, cfg.d_model))
    return ad.concat([x, c], axis=1)


def decoder_logits(P: dict, cfg: ModelConfig, patches: np.ndarray, classes: np.ndarray,
                   coords: np.ndarray, allow_special: bool = False) -> Tensor:
    """Logits for the next coordinate at SOS and after each given coordinate.

    ``coords`` is (B, n) with 0 <= n <= 3, giving (B, n + 1, vocab). It may
    also be (B, S, n): S continuations of the same scene and class share one
    pass over the prefix, and the result is (B, S, n + 1, vocab).
    ``allow_special`` admits SOS/EOS ids among the fed tokens (used when
    enumerating the full sequence space).
    """
    coords = np.asarray(coords, dtype=np.int64)
    flat = coords.ndim == 2
    if flat:
        coords = coords[:, None, :]
    if coords.ndim != 3:
        raise ConfigError(f"coords must be (B, n) or (B, S, n), got {coords.shape}")
    B, S, n = coords.shape
    if n > 3:
        raise ConfigError("at most 3 coordinate tokens are ever fed back")
    top = cfg.vocab_size if allow_special else cfg.num_bins
    if coords.size and (coords.min() < 0 or coords.max() >= top):
        raise ConfigError(f"coordinate token outside [0, {top})")
    m = n + 1
    prefix = encode_prefix(P, cfg, patches, classes)
    ids = np.concatenate([np.full((B, S, 1), cfg.sos), coords], axis=2)
    tok = ad.embedding_lookup(P["tok_emb"], ids) + P["tok_pos"][:m]
    x = ad.concat([prefix, ad.reshape(tok, (B, S * m, cfg.d_model))], axis=1)
    Tp = cfg.prefix_len
    mask = shared_prefix_mask(Tp, S, m, x.data.dtype)
    for i in range(cfg.n_layers - 1):
        x = _block(x, P, i, cfg, mask)
    # nothing downstream reads the prefix after the last attention
    x = _block(x, P, cfg.n_layers - 1, cfg, mask, keep_from=Tp)
    x = ad.layernorm(x, P["lnf_g"], P["lnf_b"])
    out = ad.matmul(x, P["head_w"]) + P["head_b"]
    shape = (B, m, cfg.vocab_size) if flat else (B, S, m, cfg.vocab_size)
    return ad.reshape(out, shape)


def as_tensors(params: ModelParams, requires_grad: bool = False) -> dict:
    return {k: Tensor.wrap(v, requires_grad=requires_grad, name=k) for k, v in params.tensors.items()}


def sequence_logprob_batch(P: dict, cfg: ModelConfig, patches: np.ndarray, classes: np.ndarray,
                           tokens: np.ndarray, allow_special: bool = False) -> Tensor:
    """Summed log-probabilities of the four coordinate tokens.

    ``tokens`` (B, 4) gives (B,); (B, S, 4) scores S boxes per scene with a
    shared prefix pass and gives (B, S).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim not in (2, 3) or tokens.shape[-1] != 4:
        raise ConfigError(f"tokens must be (B, 4) or (B, S, 4), got {tokens.shape}")
    logits = decoder_logits(P, cfg, patches, classes, tokens[..., :3], allow_special)
    nll = ad.cross_entropy_with_logits(logits, tokens)
    return -ad.sum(nll, axis=-1)


def _scene_patches(scene, cfg: ModelConfig) -> np.ndarray:
    if scene.image_size != cfg.image_size:
        raise ConfigError(f"scene image_size {scene.image_size} != model image_size {cfg.image_size}")
    if scene.grid.shape[0] != cfg.in_channels:
        raise ConfigError(f"scene has {scene.grid.shape[0]} channels, model expects {cfg.in_channels}")
    return patchify(scene.grid[None].astype(np.float32), cfg.patch_size)


def forward_logits(params: ModelParams, scene, cls: int, prefix_coords=()) -> np.ndarray:
    """Next-coordinate logits (vocab,) given up to three previous coordinates."""
    cfg = params.config
    coords = np.asarray(prefix_coords, dtype=np.int64).reshape(1, -1)
    out = decoder_logits(as_tensors(params), cfg, _scene_patches(scene, cfg), np.array([cls]), coords)
    return out.data[0, -1]


def sequence_logprob(params: ModelParams, scene, cls: int, tokens) -> float:
    cfg = params.config
    toks = tokens.tokens if hasattr(tokens, "tokens") else tokens
    lp = sequence_logprob_batch(as_tensors(params), cfg, _scene_patches(scene, cfg),
                                np.array([cls]), np.asarray([toks]))
    return float(lp.data[0])


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"LOCGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """JSON header then a little-endian float32 payload, written atomically."""
    names = sorted(params.tensors)
    entries, offset = [], 0
    for k in names:
        a = params.tensors[k]
        entries.append({"name": k, "shape": list(a.shape), "offset": offset})
        offset += a.size * 4
    header = {"format_version": CHECKPOINT_VERSION, "config": asdict(params.config),
              "tensors": entries, "extra": extra or {}}
    hb = json.dumps(header, sort_keys=True).encode()
    payload = b"".join(np.ascontiguousarray(params.tensors[k], dtype="<f4").tobytes() for k in names)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(hb)))
        f.write(hb)
        f.write(payload)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a location-model checkpoint")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    if header["format_version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header['format_version']}")
    base = 16 + hlen
    tensors = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        tensors[e["name"]] = np.frombuffer(raw, dtype="<f4", count=n, offset=start).reshape(e["shape"]).astype(np.float32)
    return ModelParams(ModelConfig(**header["config"]), tensors), header.get("extra", {})
