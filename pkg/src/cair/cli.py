"""Command-line surface.

Subcommands: train, infer, eval, ensemble-train, gradcheck, gen-data,
params.  Every failure is a one-line `error: <kind>: <message>` on stderr
with a nonzero exit code; successful commands print machine-parseable
lines on stdout.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from typing import List, Optional

import numpy as np

from . import config as C
from . import dataset as DS
from . import filters as F
from . import inference as INF
from . import metrics as MX
from . import model as M
from . import tensor as T
from . import training as TR
from . import weights as W
from .tensor import ContractViolation, NonFiniteError, Tensor


def _build_model(model_cfg: M.CairConfig, variant: Optional[str],
                 tlsc: Optional[int]) -> M.CairModel:
    cfg = model_cfg
    if variant is not None:
        cfg = dataclasses.replace(cfg, variant=variant)
    if tlsc is not None:
        cfg = dataclasses.replace(cfg, tlsc_window=tlsc)
    return M.make_cair(cfg, seed=0)


def _restore_one(img: np.ndarray, model: M.CairModel, tta: bool) -> np.ndarray:
    x = Tensor(img[None].astype(np.float32))
    if tta:
        out = INF.self_ensemble(lambda t: M.forward(t, model), x)
    else:
        out = M.forward(x, model)
    return np.clip(out.data[0], 0.0, 1.0)


def cmd_train(args) -> int:
    run = C.load_run_config(args.config)
    os.makedirs(args.out_dir, exist_ok=True)
    model = _build_model(run.model, None, None)

    index = DS.DatasetIndex.load(run.data.index)
    data = DS.load_pairs(index, run.data.root, split=run.data.train_split)
    if not data:
        raise ContractViolation(
            f"train: no pairs in split {run.data.train_split!r}"
        )

    start_iter = 0
    opt_state = None
    if args.resume:
        start_iter, opt_state = W.load_checkpoint(args.resume, model.store)
        print(f"resumed iter={start_iter} from {args.resume}")

    log_path = os.path.join(args.out_dir, "train.log")
    ck_path = os.path.join(args.out_dir, "checkpoint.cairw")
    with open(log_path, "a" if args.resume else "w") as logf:
        def log(line):
            print(line)
            logf.write(line + "\n")
            logf.flush()

        for ck in TR.train(model, data, run.train, opt_state=opt_state,
                           start_iter=start_iter, log_fn=log):
            W.save_checkpoint(ck_path, ck)

    out_path = os.path.join(args.out_dir, "weights.cairw")
    W.save_store(out_path, model.store)
    print(f"saved {out_path}")
    return 0


def _collect_inputs(path: str) -> List[str]:
    if os.path.isdir(path):
        names = sorted(os.listdir(path))
        files = [os.path.join(path, n) for n in names
                 if os.path.splitext(n)[1].lower() in (".png", ".ppm")]
        if not files:
            raise ContractViolation(f"infer: no images under {path}")
        return files
    return [path]


def cmd_infer(args) -> int:
    run = C.load_run_config(args.config)
    tta = args.tta or run.infer.tta
    tlsc = args.tlsc if args.tlsc is not None else run.infer.tlsc_window
    model = _build_model(run.model, args.variant, tlsc)
    W.load_into_store(args.weights, model.store)
    os.makedirs(args.out_dir, exist_ok=True)
    for src in _collect_inputs(args.input):
        img = DS.load_image(src)
        restored = _restore_one(img, model, tta)
        stem = os.path.splitext(os.path.basename(src))[0]
        dst = os.path.join(args.out_dir, f"{stem}_restored.png")
        DS.save_png(dst, restored)
        print(f"wrote {dst}")
    return 0


def cmd_eval(args) -> int:
    run = C.load_run_config(args.config)
    tlsc = args.tlsc if args.tlsc is not None else run.infer.tlsc_window
    model = _build_model(run.model, args.variant, tlsc)
    W.load_into_store(args.weights, model.store)

    index = DS.DatasetIndex.load(args.index)
    root = args.root if args.root else run.data.root
    subset = index.subset(args.split)
    if not subset.entries:
        raise ContractViolation(f"eval: split {args.split!r} is empty")

    lines = []
    psnrs, ssims = [], []
    for e in subset.entries:
        filt = DS.load_image(os.path.join(root, e.filtered))
        orig = DS.load_image(os.path.join(root, e.original))
        restored = _restore_one(filt, model, args.tta)
        p = MX.psnr(restored, orig)
        s = MX.ssim(restored, orig)
        psnrs.append(p)
        ssims.append(s)
        lines.append(f"{e.filtered} psnr={p:.4f} ssim={s:.6f}")
    lines.append(
        f"summary psnr={np.mean(psnrs):.4f} ssim={np.mean(ssims):.6f} "
        f"n={len(psnrs)}"
    )
    out_path = args.out or "metrics.txt"
    with open(out_path, "w") as f:
        f.write("\n".join(lines) + "\n")
    print(lines[-1])
    print(f"wrote {out_path}")
    return 0


def cmd_ensemble_train(args) -> int:
    run = C.load_run_config(args.config)
    model_s = _build_model(run.model, "S", None)
    model_m = _build_model(run.model, "M", None)
    W.load_into_store(args.weights_s, model_s.store)
    W.load_into_store(args.weights_m, model_m.store)

    index = DS.DatasetIndex.load(run.data.index)
    data = DS.load_pairs(index, run.data.root, split=run.data.train_split)
    os.makedirs(args.out_dir, exist_ok=True)
    log_path = os.path.join(args.out_dir, "ensemble.log")
    with open(log_path, "w") as logf:
        def log(line):
            print(line)
            logf.write(line + "\n")

        net = INF.ensemble_train(model_s, model_m, data, run.train, log_fn=log)
    out_path = os.path.join(args.out_dir, "ensemble.cairw")
    W.save_store(out_path, net.store)
    print(f"saved {out_path}")
    return 0


def cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(0)
    worst = 0.0
    checks = []

    x = T.Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)

    def loss_of(fn):
        return lambda *ts: T.sum_all(T.mul(fn(*ts), fn(*ts)))

    from . import blocks as B
    store = T.ParamStore()
    cp = B.make_conv(store, "c", 3, 4, 3, rng, dtype=np.float64)
    checks.append(("conv3x3", loss_of(lambda t: B.conv(t, cp)), [x]))
    ln = B.make_layer_norm(store, "ln", 3, dtype=np.float64)
    checks.append(("layer_norm", loss_of(lambda t: B.layer_norm(t, ln)), [x]))
    checks.append(("gaussian_blur",
                   loss_of(lambda t: T.gaussian_blur(t, 1.5, 3)), [x]))
    checks.append(("pixel_unshuffle",
                   loss_of(lambda t: T.pixel_unshuffle(t, 2)), [x]))
    checks.append(("avg_pool_local",
                   loss_of(lambda t: T.avg_pool_local(t, 3)), [x]))

    for name, fn, inputs in checks:
        rep = T.grad_check(fn, inputs)
        worst = max(worst, rep.max_rel_error)
        print(f"gradcheck op={name} max_rel_error={rep.max_rel_error:.3e}")

    if args.full:
        cfg = M.CairConfig(levels=2, width=4, block_counts=(1, 1, 1),
                           variant="M")
        mdl = M.make_cair(cfg, seed=0, dtype=np.float64)
        for n, t in mdl.store.items():
            if n.endswith(("beta_scale", "gamma_scale")):
                t.data[:] = 0.5
        w = mdl.store["ending.weight"]
        w.data[:] = rng.uniform(-0.05, 0.05, size=w.data.shape)
        img = T.Tensor(rng.random((1, 3, 16, 16)), requires_grad=True)
        rep = T.grad_check(
            lambda t: T.sum_all(T.mul(M.forward(t, mdl), M.forward(t, mdl))),
            [img])
        worst = max(worst, rep.max_rel_error)
        print(f"gradcheck op=full_model max_rel_error={rep.max_rel_error:.3e}")

    ok = worst <= 1e-6
    print(f"gradcheck max_rel_error={worst:.3e} tol=1.0e-06 "
          f"status={'ok' if ok else 'fail'}")
    return 0 if ok else 1


def cmd_gen_data(args) -> int:
    if args.synthesize:
        os.makedirs(args.sources, exist_ok=True)
        DS.make_source_images(args.sources, args.synthesize, args.seed)
    names = sorted(os.listdir(args.sources)) if os.path.isdir(args.sources) else []
    sources = [os.path.join(args.sources, n) for n in names
               if os.path.splitext(n)[1].lower() in (".png", ".ppm")]
    if not sources:
        raise ContractViolation(f"gen-data: no source images under {args.sources}")
    index = DS.generate_corpus(sources, F.builtin_filters(), args.out,
                               seed=args.seed)
    print(f"generated {len(index.entries)} pairs under {args.out}")
    return 0


def cmd_params(args) -> int:
    if args.net == "ensemble":
        count = INF.make_ensemble_net().store.total_size()
    else:
        run = C.load_run_config(args.config)
        count = M.count_params(M.make_cair(run.model, seed=0).store)
    print(f"params={count}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="cair",
        description="Multi-scale color-attention filter removal toolkit",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint file to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="restore one image or a directory")
    p.add_argument("input")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--tta", action="store_true")
    p.add_argument("--tlsc", type=int)
    p.add_argument("--variant", choices=M.VARIANTS)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="PSNR/SSIM report over an index split")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--root", help="corpus root (defaults to [data] root)")
    p.add_argument("--split", default="val")
    p.add_argument("--out", help="report path (default metrics.txt)")
    p.add_argument("--tta", action="store_true")
    p.add_argument("--tlsc", type=int)
    p.add_argument("--variant", choices=M.VARIANTS)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ensemble-train",
                       help="fit the fusion net on two trained models")
    p.add_argument("--config", required=True)
    p.add_argument("--weights-s", required=True)
    p.add_argument("--weights-m", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_ensemble_train)

    p = sub.add_parser("gradcheck", help="finite-difference spot checks")
    p.add_argument("--full", action="store_true",
                   help="include the end-to-end tiny-model check")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-data", help="build the synthetic filter corpus")
    p.add_argument("--sources", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--synthesize", type=int, metavar="N",
                   help="first write N procedural source images")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("params", help="report a configuration's weight count")
    p.add_argument("--config")
    p.add_argument("--net", choices=("cair", "ensemble"), default="cair")
    p.set_defaults(fn=cmd_params)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "params" and args.net == "cair" and not args.config:
        print("error: config: params --net cair requires --config",
              file=sys.stderr)
        return 1
    try:
        return args.fn(args)
    except (ContractViolation, W.WeightsError, NonFiniteError, OSError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
