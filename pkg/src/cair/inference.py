"""Inference-time machinery: dihedral self-ensemble, local-statistics view,
and the two-model fusion network.

Everything here runs outside the autodiff tape except ensemble training,
which reuses the standard training loop on precomputed model outputs.
"""

from __future__ import annotations

import dataclasses
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import blocks as B
from . import model as model_mod
from . import tensor as T
from . import training as TR
from .blocks import Conv2dParams, NafBlockParams
from .model import CairModel
from .tensor import ContractViolation, ParamStore, Tensor

ENSEMBLE_WIDTH = 32
ENSEMBLE_BLOCKS = 3


def _dihedral(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if flip:
        a = np.flip(a, axis=-1)
    if k:
        a = np.rot90(a, k, axes=(-2, -1))
    return np.ascontiguousarray(a)


def _dihedral_inverse(a: np.ndarray, k: int, flip: bool) -> np.ndarray:
    if k:
        a = np.rot90(a, -k, axes=(-2, -1))
    if flip:
        a = np.flip(a, axis=-1)
    return np.ascontiguousarray(a)


def _worker_count() -> int:
    raw = os.environ.get("CAIR_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def self_ensemble(model_fn: Callable[[Tensor], Tensor], img: Tensor) -> Tensor:
    """Average the model over the 8 flip/rotation copies of the input.

    Branches may run on a small thread pool (CAIR_THREADS); the average is
    always reduced in fixed branch order, so the result is deterministic.
    """
    variants = [(k, f) for f in (False, True) for k in range(4)]

    def run(kf):
        k, f = kf
        out = model_fn(Tensor(_dihedral(img.data, k, f)))
        return _dihedral_inverse(out.data, k, f)

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, variants))
    else:
        outs = [run(kf) for kf in variants]

    acc = np.zeros(outs[0].shape, dtype=np.float64)
    for o in outs:
        acc += o
    return Tensor((acc / len(outs)).astype(img.dtype))


def tlsc_apply(model: CairModel, window: int) -> CairModel:
    """View of the model whose pooled statistics are local at inference.

    Shares parameter storage with the original; only the configured window
    changes, so parameter counts and training state are untouched.
    """
    if window < 1:
        raise ContractViolation(f"tlsc_apply: window must be >= 1, got {window}")
    cfg = dataclasses.replace(model.config, tlsc_window=window)
    return CairModel(config=cfg, store=model.store, params=model.params)


@dataclass
class EnsembleNetParams:
    conv_in: Conv2dParams
    blocks: List[NafBlockParams]
    conv_out: Conv2dParams


@dataclass
class EnsembleNet:
    store: ParamStore
    params: EnsembleNetParams


def make_ensemble_net(seed: int = 0, dtype=np.float32) -> EnsembleNet:
    """Fusion net over two stacked predictions; starts as their exact mean."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    conv_in = B.make_conv(store, "conv_in", 6, ENSEMBLE_WIDTH, 3, rng,
                          dtype=dtype)
    blocks = [
        B.make_naf_block(store, f"block{i}", ENSEMBLE_WIDTH, rng, dtype)
        for i in range(ENSEMBLE_BLOCKS)
    ]
    conv_out = B.make_conv(store, "conv_out", ENSEMBLE_WIDTH, 3, 3, rng,
                           zero=True, dtype=dtype)
    return EnsembleNet(store, EnsembleNetParams(conv_in, blocks, conv_out))


def ensemble_forward(out_s: Tensor, out_m: Tensor,
                     p: EnsembleNetParams) -> Tensor:
    """conv -> 3 gated blocks -> conv, plus the mean of the two inputs."""
    if out_s.shape != out_m.shape:
        raise ContractViolation(
            f"ensemble_forward: shapes {tuple(out_s.shape)} and "
            f"{tuple(out_m.shape)} differ"
        )
    x = B.conv(T.concat_channels([out_s, out_m]), p.conv_in)
    for bp in p.blocks:
        x = B.naf_block(x, bp, None)
    residual = B.conv(x, p.conv_out)
    mean_skip = T.scale(T.add(out_s, out_m), 0.5)
    return T.add(residual, mean_skip)


def _ensemble_train_forward(x: Tensor, net: EnsembleNet) -> Tensor:
    halves = T.split_channels(x, [3, 3])
    return ensemble_forward(halves[0], halves[1], net.params)


def predict_pairs(model_s: CairModel, model_m: CairModel,
                  dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
                  ) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Frozen-model predictions stacked to 6 channels, paired with targets."""
    out = []
    for filt, orig in dataset:
        x = Tensor(filt[None].astype(np.float32))
        pred_s = model_mod.forward(x, model_s).data[0]
        pred_m = model_mod.forward(x, model_m).data[0]
        stacked = np.concatenate([pred_s, pred_m], axis=0)
        out.append((stacked, orig.astype(np.float32)))
    return out


def ensemble_train(model_s: CairModel, model_m: CairModel,
                   dataset: Sequence[Tuple[np.ndarray, np.ndarray]],
                   cfg: TR.TrainConfig,
                   net: Optional[EnsembleNet] = None,
                   log_fn=None) -> EnsembleNet:
    """Fit the fusion net on frozen base-model outputs with the usual recipe."""
    if net is None:
        net = make_ensemble_net()
    pred_data = predict_pairs(model_s, model_m, dataset)
    for _ in TR.train(net, pred_data, cfg,
                      forward_fn=_ensemble_train_forward, log_fn=log_fn):
        pass
    return net


def cair_star_pipeline(img: Tensor, model_s: CairModel, model_m: CairModel,
                       net: EnsembleNet, use_tta: bool = True,
                       tlsc_window: Optional[int] = None) -> Tensor:
    """Full two-model inference path; output clamped to [0,1]."""
    def runner(m: CairModel) -> Callable[[Tensor], Tensor]:
        view = tlsc_apply(m, tlsc_window) if tlsc_window else m
        return lambda x: model_mod.forward(x, view)

    run_s, run_m = runner(model_s), runner(model_m)
    if use_tta:
        out_s = self_ensemble(run_s, img)
        out_m = self_ensemble(run_m, img)
    else:
        out_s = run_s(img)
        out_m = run_m(img)
    fused = ensemble_forward(out_s, out_m, net.params)
    return Tensor(np.clip(fused.data, 0.0, 1.0))
