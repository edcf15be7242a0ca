"""PSNR-loss training: optimizer, schedule, data sampling, checkpoints.

The data pipeline operates on plain numpy (C,H,W) float arrays in [0,1];
tensors enter only at batch assembly.  Every random decision at iteration i
comes from a counter-based generator keyed by (seed, i), so a resumed run
draws exactly the same samples as an uninterrupted one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import model as model_mod
from . import tensor as T
from .tensor import ContractViolation, NonFiniteError, ParamStore, Tape, Tensor, backward

ADAM_EPS = 1e-8
MSE_FLOOR = 1e-12
_LOG10_SCALE = 10.0 / math.log(10.0)


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    lr_final: float = 1e-6
    total_iters: int = 2000
    adam_beta1: float = 0.9
    adam_beta2: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    patch_size: int = 64
    aug_prob: float = 0.5
    seed: int = 0
    log_interval: int = 100
    checkpoint_interval: int = 500

    def __post_init__(self):
        if self.lr_final > self.lr_init:
            raise ContractViolation(
                f"lr_final {self.lr_final} exceeds lr_init {self.lr_init}"
            )
        if not 0.0 <= self.aug_prob <= 1.0:
            raise ContractViolation(f"aug_prob {self.aug_prob} outside [0,1]")
        for name in ("total_iters", "batch_size", "patch_size", "log_interval",
                     "checkpoint_interval"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ContractViolation(f"{name} must be in [0,1)")


def psnr_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Batch mean of per-image 10*log10(MSE); lower is better.

    A perfect batch saturates at the MSE floor, giving exactly -120.
    """
    if pred.shape != target.shape:
        raise ContractViolation(
            f"psnr_loss: shapes {tuple(pred.shape)} and {tuple(target.shape)} differ"
        )
    diff = T.sub(pred, target)
    mse = T.mean_per_image(T.mul(diff, diff))
    floored = T.clamp_min(mse, MSE_FLOOR)
    return T.mean_all(T.scale(T.log(floored), _LOG10_SCALE))


def sample_patch(pair: Tuple[np.ndarray, np.ndarray], patch_size: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One shared random window from both images of a pair."""
    a, b = pair
    h, w = a.shape[-2:]
    if a.shape[-2:] != b.shape[-2:]:
        raise ContractViolation("sample_patch: pair spatial extents differ")
    if h < patch_size or w < patch_size:
        raise ContractViolation(
            f"sample_patch: image {h}x{w} smaller than patch {patch_size}"
        )
    top = int(rng.integers(0, h - patch_size + 1))
    left = int(rng.integers(0, w - patch_size + 1))
    sl = (..., slice(top, top + patch_size), slice(left, left + patch_size))
    return a[sl], b[sl]


def augment(pair: Tuple[np.ndarray, np.ndarray], rng: np.random.Generator,
            prob: float = 0.5) -> Tuple[np.ndarray, np.ndarray]:
    """Shared random horizontal flip and quarter-turn rotation."""
    a, b = pair
    if rng.random() < prob:
        a = np.flip(a, axis=-1)
        b = np.flip(b, axis=-1)
    if rng.random() < prob:
        k = int(rng.integers(1, 4))
        a = np.rot90(a, k, axes=(-2, -1))
        b = np.rot90(b, k, axes=(-2, -1))
    return np.ascontiguousarray(a), np.ascontiguousarray(b)


def cosine_lr(iteration: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_init at 0 to lr_final at total_iters."""
    t = min(max(iteration, 0), cfg.total_iters) / cfg.total_iters
    return cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + math.cos(math.pi * t))


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def clone(self) -> "OptimizerState":
        return OptimizerState(
            m={k: a.copy() for k, a in self.m.items()},
            v={k: a.copy() for k, a in self.v.items()},
            step=self.step,
        )


def init_optimizer(store: ParamStore) -> OptimizerState:
    state = OptimizerState()
    for name, t in store.items():
        state.m[name] = np.zeros_like(t.data)
        state.v[name] = np.zeros_like(t.data)
    return state


def adamw_step(store: ParamStore, state: OptimizerState, lr: float,
               cfg: TrainConfig) -> None:
    """Decoupled-weight-decay moment update, in place on the parameters."""
    state.step += 1
    t = state.step
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in store.items():
        g = p.grad
        if g is None:
            raise ContractViolation(f"adamw_step: parameter {name} has no gradient")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


@dataclass
class Checkpoint:
    """Live snapshot of a training run: consumers must copy before mutating."""

    iteration: int
    store: ParamStore
    opt_state: OptimizerState
    config: TrainConfig
    diagnostic: bool = False


def _iteration_rng(seed: int, iteration: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, iteration]))


def make_batch(dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
               cfg: TrainConfig, iteration: int) -> Tuple[Tensor, Tensor]:
    """Deterministic batch for one iteration: sample, crop, augment, stack."""
    rng = _iteration_rng(cfg.seed, iteration)
    idx = rng.integers(0, len(dataset), size=cfg.batch_size)
    ins, outs = [], []
    for i in idx:
        pair = sample_patch(dataset[int(i)], cfg.patch_size, rng)
        filt, orig = augment(pair, rng, cfg.aug_prob)
        ins.append(filt)
        outs.append(orig)
    x = Tensor(np.stack(ins).astype(np.float32, copy=False))
    y = Tensor(np.stack(outs).astype(np.float32, copy=False))
    return x, y


def train(model, dataset, cfg: TrainConfig,
          forward_fn: Optional[Callable] = None,
          opt_state: Optional[OptimizerState] = None,
          start_iter: int = 0,
          log_fn: Optional[Callable[[str], None]] = None):
    """Run the optimization loop; yields checkpoints at the configured cadence.

    ``model`` must expose ``.store``; the per-batch prediction comes from
    ``forward_fn(x, model)`` (defaults to the restoration network's forward).
    ``start_iter`` + ``opt_state`` resume a run; with the same seed the
    continuation is sample-for-sample identical to the uninterrupted one.
    """
    if len(dataset) == 0:
        raise ContractViolation("train: empty dataset")
    if forward_fn is None:
        forward_fn = model_mod.forward
    if opt_state is None:
        opt_state = init_optimizer(model.store)

    for it in range(start_iter, cfg.total_iters):
        x, y = make_batch(dataset, cfg, it)
        model.store.zero_grads()
        with Tape() as tape:
            pred = forward_fn(x, model)
            loss = psnr_loss(pred, y)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            if log_fn:
                log_fn(f"iter={it + 1} non-finite loss, aborting")
            yield Checkpoint(it, model.store, opt_state, cfg, diagnostic=True)
            raise NonFiniteError(f"training diverged at iteration {it + 1}")
        backward(loss, tape)
        lr = cosine_lr(it, cfg)
        adamw_step(model.store, opt_state, lr, cfg)
        done = it + 1
        if log_fn and (done % cfg.log_interval == 0 or done == cfg.total_iters):
            log_fn(f"iter={done} lr={lr:.6e} loss={loss_val:.6f} psnr={-loss_val:.6f}")
        if done % cfg.checkpoint_interval == 0 or done == cfg.total_iters:
            yield Checkpoint(done, model.store, opt_state, cfg)
