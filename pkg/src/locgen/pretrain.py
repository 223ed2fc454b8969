"""Maximum-likelihood pretraining on positive locations.

Each step draws a batch of annotation sets; every item contributes exactly
one positive box, chosen uniformly from its set and resampled each epoch.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .geometry import quantize
from .model import ModelConfig, ModelParams, init_params, patchify, save_checkpoint, sequence_logprob_batch
from .rng import substream

log = logging.getLogger(__name__)


class NumericError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    total_steps: int = 5000
    learning_rate: float = 2e-3
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 1000

    def __post_init__(self):
        if min(self.batch_size, self.total_steps, self.learning_rate, self.eval_every) <= 0:
            raise ValueError("batch_size, total_steps, learning_rate and eval_every must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("warmup_steps must be within [0, total_steps]")


@dataclass
class TrainState:
    params: ModelParams
    m: dict
    v: dict
    step: int = 0
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        return cls(params, {k: np.zeros_like(a) for k, a in params.tensors.items()},
                   {k: np.zeros_like(a) for k, a in params.tensors.items()})


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 over ``warmup_steps``, then constant."""
    if cfg.warmup_steps == 0:
        return cfg.learning_rate
    return cfg.learning_rate * min(1.0, step / cfg.warmup_steps)


class Batch:
    """Stacked model inputs: patches (B, P, D), classes (B,), tokens (B, 4)."""

    def __init__(self, patches: np.ndarray, classes: np.ndarray, tokens: np.ndarray):
        self.patches, self.classes, self.tokens = patches, classes, tokens

    def __len__(self):
        return len(self.classes)


class PatchCache:
    """Patchified float32 scene grids, computed once per scene."""

    def __init__(self, scenes, patch_size: int):
        self._p = {s.scene_id: patchify(s.grid[None].astype(np.float32), patch_size)[0] for s in scenes}

    def __getitem__(self, scene_id):
        return self._p[scene_id]


def make_batch(cache: PatchCache, items) -> Batch:
    """``items`` is a sequence of (scene_id, class_id, BBox)."""
    return Batch(np.stack([cache[sid] for sid, _, _ in items]),
                 np.array([c for _, c, _ in items], dtype=np.int64),
                 np.array([quantize(b).tokens for _, _, b in items], dtype=np.int64))


def nll_loss(P: dict, cfg: ModelConfig, batch: Batch):
    """Mean over the batch of the negative sequence log-likelihood (a scalar Tensor)."""
    return ad.mean(-sequence_logprob_batch(P, cfg, batch.patches, batch.classes, batch.tokens))


def adam_update(state: TrainState, grads: dict, lr: float, cfg: TrainConfig) -> None:
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for k, g in grads.items():
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        state.params.tensors[k] -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)).astype(m.dtype)


def train_step(state: TrainState, batch: Batch, cfg: TrainConfig) -> TrainState:
    lr = lr_at(state.step, cfg)
    mcfg = state.params.config
    loss, grads = ad.value_and_grad(lambda P: nll_loss(P, mcfg, batch), state.params.tensors)
    if not math.isfinite(loss):
        norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
        raise NumericError(f"non-finite loss at step {state.step} (lr={lr:g}); grad norms: {norms}")
    adam_update(state, grads, lr, cfg)
    state.step += 1
    state.history.append(loss)
    return state


class EpochSampler:
    """Deterministic epoch-wise shuffling of annotation sets with one positive each."""

    def __init__(self, samples, seed: int, stream: str = "pretrain"):
        if any(not a.positives for a in samples):
            raise ValueError("every annotation set used for pretraining needs a positive")
        self.samples, self.seed, self.stream = samples, seed, stream
        self.epoch, self._order, self._pos = -1, None, 0

    def _new_epoch(self):
        self.epoch += 1
        rs = substream(self.seed, self.stream, "epoch", self.epoch)
        self._order = rs.permutation(len(self.samples))
        self._choice = [int(rs.integers(0, len(a.positives))) for a in self.samples]
        self._pos = 0

    def next(self, n: int) -> list:
        out = []
        while len(out) < n:
            if self._order is None or self._pos >= len(self._order):
                self._new_epoch()
            i = int(self._order[self._pos])
            self._pos += 1
            a = self.samples[i]
            out.append((a.scene_id, a.cls.id, a.positives[self._choice[i]]))
        return out


def heldout_nll(params: ModelParams, dataset, cache: PatchCache | None = None,
                max_items: int = 512, batch_size: int = 128) -> float:
    """Mean NLL over (up to ``max_items``) annotation sets, scoring each set's first positive."""
    cfg = params.config
    cache = cache or PatchCache(dataset.scenes, cfg.patch_size)
    items = [(a.scene_id, a.cls.id, a.positives[0]) for a in dataset.samples[:max_items]]
    P = {k: ad.Tensor.wrap(v) for k, v in params.tensors.items()}
    total = 0.0
    for i in range(0, len(items), batch_size):
        b = make_batch(cache, items[i:i + batch_size])
        total += float(-sequence_logprob_batch(P, cfg, b.patches, b.classes, b.tokens).data.sum())
    return total / max(len(items), 1)


def pretrain(dataset, model_config: ModelConfig, train_config: TrainConfig,
             heldout=None, checkpoint_dir=None, progress=None) -> ModelParams:
    """Run ``total_steps`` Adam steps; optionally checkpoint every ``eval_every`` steps.

    ``progress`` receives CSV-ready rows ``(step, lr, train_loss, heldout_loss)``.
    """
    if not dataset.samples:
        raise ValueError("empty training set")
    cache = PatchCache(dataset.scenes, model_config.patch_size)
    hcache = PatchCache(heldout.scenes, model_config.patch_size) if heldout is not None else None
    state = TrainState.fresh(init_params(model_config))
    sampler = EpochSampler(dataset.samples, train_config.seed)
    window = []
    for _ in range(train_config.total_steps):
        lr = lr_at(state.step, train_config)
        train_step(state, make_batch(cache, sampler.next(train_config.batch_size)), train_config)
        window.append(state.history[-1])
        if state.step % train_config.eval_every == 0 or state.step == train_config.total_steps:
            h = heldout_nll(state.params, heldout, hcache) if heldout is not None else float("nan")
            row = (state.step, lr, float(np.mean(window)), h)
            window = []
            log.info("step %d lr %.2e train %.4f heldout %.4f", *row)
            if progress is not None:
                progress(row)
            if checkpoint_dir is not None:
                save_checkpoint(state.params, Path(checkpoint_dir) / f"step{state.step:06d}.ckpt",
                                extra={"step": state.step})
    return state.params
