"""Preference fine-tuning against a frozen reference model.

The target starts as a copy of the pretrained weights and the reference is
a second, never-updated copy. For a pair (preferred, rejected) with
``r(Y) = log pi_target(Y) - log pi_ref(Y)`` the preference probability is
``sigmoid(beta * (r(Y+) - r(Y-)))`` and the loss is its negative log, averaged
over the batch. Updates are plain SGD.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import quantize
from .model import ModelParams, sequence_logprob_batch
from .pretrain import NumericError, PatchCache
from .rng import substream

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DpoConfig:
    beta: float = 0.1
    learning_rate: float = 5e-4
    total_steps: int = 1000
    batch_size: int = 32
    seed: int = 0
    log_every: int = 100

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be > 0")
        if min(self.learning_rate, self.total_steps, self.batch_size) <= 0:
            raise ValueError("learning_rate, total_steps and batch_size must be positive")


class PairBatch:
    def __init__(self, cache: PatchCache, pairs):
        self.patches = np.stack([cache[p.scene_id] for p in pairs])
        self.classes = np.array([p.cls.id for p in pairs], dtype=np.int64)
        self.chosen = np.array([quantize(p.preferred).tokens for p in pairs], dtype=np.int64)
        self.rejected = np.array([quantize(p.rejected).tokens for p in pairs], dtype=np.int64)

    def __len__(self):
        return len(self.classes)


def _pair_logprobs(P: dict, params_cfg, b: PairBatch):
    """(chosen, rejected) sequence log-probs, each (B,); both boxes share one prefix pass."""
    lp = sequence_logprob_batch(P, params_cfg, b.patches, b.classes, np.stack([b.chosen, b.rejected], axis=1))
    return lp[:, 0], lp[:, 1]


def reference_logprobs(ref: ModelParams, b: PairBatch) -> tuple[np.ndarray, np.ndarray]:
    P = {k: ad.Tensor.wrap(v) for k, v in ref.tensors.items()}
    c, r = _pair_logprobs(P, ref.config, b)
    return c.data.copy(), r.data.copy()


def dpo_margin(P: dict, cfg, b: PairBatch, ref_chosen: np.ndarray, ref_rejected: np.ndarray, beta: float):
    """beta * (r(Y+) - r(Y-)) per pair, as a Tensor."""
    c, r = _pair_logprobs(P, cfg, b)
    return (c - r - (ref_chosen - ref_rejected).astype(c.data.dtype)) * beta


def dpo_loss_tensor(P: dict, cfg, b: PairBatch, ref_chosen, ref_rejected, beta: float):
    return ad.mean(-ad.log_sigmoid(dpo_margin(P, cfg, b, ref_chosen, ref_rejected, beta)))


def _as_cache(params: ModelParams, scenes) -> PatchCache:
    if isinstance(scenes, PatchCache):
        return scenes
    if hasattr(scenes, "scenes"):
        scenes = scenes.scenes
    return PatchCache(scenes, params.config.patch_size)


def dpo_loss(target: ModelParams, ref: ModelParams, pairs, beta: float, scenes) -> float:
    """Mean preference loss over ``pairs``; ``scenes`` resolves scene ids (Dataset, scenes or PatchCache)."""
    b = PairBatch(_as_cache(target, scenes), pairs)
    rc, rr = reference_logprobs(ref, b)
    P = {k: ad.Tensor.wrap(v) for k, v in target.tensors.items()}
    m = dpo_margin(P, target.config, b, rc, rr, beta).data.astype(np.float64)
    v = float(np.mean(np.logaddexp(0.0, -m)))  # -log sigmoid, in double precision
    if not math.isfinite(v):
        raise NumericError("non-finite DPO loss")
    return v


def preference_probs(target: ModelParams, ref: ModelParams, pairs, beta: float, scenes) -> np.ndarray:
    """Bradley-Terry probability that each pair's preferred box wins."""
    b = PairBatch(_as_cache(target, scenes), pairs)
    rc, rr = reference_logprobs(ref, b)
    tc, tr = reference_logprobs(target, b)
    if not all(np.isfinite(x).all() for x in (tc, tr, rc, rr)):
        raise NumericError("non-finite log-probabilities")
    z = beta * ((tc.astype(np.float64) - rc) - (tr.astype(np.float64) - rr))
    return 1.0 / (1.0 + np.exp(-z))


def preference_prob(target: ModelParams, ref: ModelParams, pair, beta: float, scenes) -> float:
    return float(preference_probs(target, ref, [pair], beta, scenes)[0])


class PairSampler:
    """Epoch-wise shuffled preference pairs; pairs are redrawn every epoch by ``pair_fn(epoch)``."""

    def __init__(self, pair_fn, seed: int):
        self.pair_fn, self.seed = pair_fn, seed
        self.epoch, self._pairs, self._order, self._pos = -1, None, None, 0

    def next(self, n: int) -> list:
        out = []
        while len(out) < n:
            if self._order is None or self._pos >= len(self._order):
                self.epoch += 1
                self._pairs = self.pair_fn(self.epoch)
                if not self._pairs:
                    raise ValueError("no preference pairs")
                self._order = substream(self.seed, "dpo", "epoch", self.epoch).permutation(len(self._pairs))
                self._pos = 0
            out.append(self._pairs[int(self._order[self._pos])])
            self._pos += 1
        return out


def dpo_finetune(pretrained: ModelParams, pairs, config: DpoConfig, scenes, progress=None,
                 return_ref: bool = False):
    """SGD on the preference loss; ``pairs`` is a list or a callable ``epoch -> list``.

    ``progress`` receives rows ``(step, dpo_loss, mean_preference_prob, ref_hash)``.
    """
    pair_fn = pairs if callable(pairs) else (lambda epoch, _p=list(pairs): _p)
    first = pair_fn(0)
    if not first:
        raise ValueError("empty preference pair list")
    cache = _as_cache(pretrained, scenes)
    ref = pretrained.copy()
    for a in ref.tensors.values():
        a.flags.writeable = False
    ref_hash = ref.digest()
    target = pretrained.copy()
    cfg = target.config
    sampler = PairSampler(pair_fn, config.seed)
    losses, probs = [], []
    for step in range(1, config.total_steps + 1):
        b = PairBatch(cache, sampler.next(config.batch_size))
        rc, rr = reference_logprobs(ref, b)
        holder = {}

        def f(P):
            m = dpo_margin(P, cfg, b, rc, rr, config.beta)
            holder["m"] = m.data
            return ad.mean(-ad.log_sigmoid(m))

        loss, grads = ad.value_and_grad(f, target.tensors)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite DPO loss at step {step}")
        for k, g in grads.items():
            target.tensors[k] -= (config.learning_rate * g).astype(target.tensors[k].dtype)
        losses.append(loss)
        probs.append(float(np.mean(1.0 / (1.0 + np.exp(-holder["m"].astype(np.float64))))))
        if step % config.log_every == 0 or step == config.total_steps:
            row = (step, float(np.mean(losses)), float(np.mean(probs)), ref.digest())
            losses, probs = [], []
            log.info("dpo step %d loss %.4f pref %.4f ref %s", *row)
            if progress is not None:
                progress(row)
    if ref.digest() != ref_hash:
        raise AssertionError("reference parameters changed during DPO")
    return (target, ref) if return_ref else target
