"""Command-line entry point: verification, budget reports, gradient checks,
toy training, inference, and scan benchmarks.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as mio
from .data import CLASS_NAMES
from .eval import decode_predictions
from .gradcheck import block_gradcheck_suite
from .model import (BUDGET_TARGETS, MddcNet, VARIANT_NAMES, count_params,
                    estimate_flops, variant_config)
from .ssm import MambaBlockConfig, SsmParams, selective_scan_par, \
    selective_scan_seq
from .tensor import Tensor, bilinear_resize, no_grad
from .train import TrainConfig, train_loop
from .verify import default_seed, run_checks

__all__ = ["main"]

GRADCHECK_TOL = 1e-4
_PRECISIONS = {"f32": np.float32, "f64": np.float64}


class UsageError(ValueError):
    pass


def _parse_config_file(path) -> dict[str, str]:
    """Plain key=value lines; '#' starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip().replace("-", "_")] = val.strip()
    return out


def _csv_tuple(text: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _build_variant(args):
    overrides = {}
    if args.stage_kinds:
        kinds = _csv_tuple(args.stage_kinds)
        if len(kinds) != 4:
            raise UsageError("--stage-kinds needs 4 comma-separated entries")
        overrides["stage_kinds"] = kinds
    if args.dilations:
        try:
            overrides["dilations"] = tuple(int(d) for d in _csv_tuple(args.dilations))
        except ValueError as exc:
            raise UsageError(f"--dilations must be integers: {exc}") from exc
    if args.ffn:
        overrides["ffn_kind"] = args.ffn
    if args.neck_attn:
        overrides["neck_attention"] = args.neck_attn
    try:
        return variant_config(args.variant, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------

def cmd_verify(args) -> int:
    results = run_checks(args.filter, args.seed)
    if not results:
        print(f"no checks match filter {args.filter!r}")
        return 2
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  {r.seconds:6.2f}s  {r.detail}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        print("failing:", ", ".join(r.name for r in failed))
        return 1
    return 0


def cmd_report(args) -> int:
    cfg = _build_variant(args)
    model = MddcNet(cfg, np.random.default_rng(args.seed),
                    dtype=_PRECISIONS[args.precision])
    params = count_params(model)
    flops = estimate_flops(cfg, input_size=640)
    print(f"variant {cfg.name}: dims {cfg.embed_dims}, depths {cfg.depths}, "
          f"stages {cfg.stage_kinds}")
    print(f"{'section':<10}{'params':>12}{'flops@640':>16}")
    for sec in ("stem", "stage1", "stage2", "stage3", "stage4", "neck", "head"):
        print(f"{sec:<10}{params[sec]:>12,}{flops[sec]:>16,}")
    print(f"{'total':<10}{params['total']:>12,}{flops['total']:>16,}")
    target = BUDGET_TARGETS.get(cfg.name)
    if target:
        tp, tf = target
        dp = 100.0 * (params["total"] - tp) / tp
        df = 100.0 * (flops["total"] - tf) / tf
        print(f"targets   {tp:>12,.0f}{tf:>16,.0f}")
        print(f"delta     {dp:>+11.1f}%{df:>+15.1f}%")
    else:
        print("targets   (none published for this variant)")
    return 0


def cmd_gradcheck(args) -> int:
    # finite differences are only meaningful in double precision
    report = block_gradcheck_suite(seed=args.seed)
    width = max(len(k) for k in report)
    ok = True
    for name, err in report.items():
        status = "PASS" if err <= GRADCHECK_TOL else "FAIL"
        ok &= err <= GRADCHECK_TOL
        print(f"{status}  {name:<{width}}  max rel err {err:.3e}")
    print(f"tolerance {GRADCHECK_TOL:g} (double precision)")
    return 0 if ok else 1


def cmd_train(args) -> int:
    cfg = _build_variant(args)
    dtype = _PRECISIONS[args.precision]
    model = MddcNet(cfg, np.random.default_rng(args.seed), dtype=dtype)
    tcfg = TrainConfig(epochs=args.epochs, batch=args.batch, lr=args.lr,
                       seed=args.seed, input_size=args.input_size,
                       train_scenes=args.train_scenes,
                       val_scenes=args.val_scenes,
                       early_stop_map=args.early_stop_map)
    out = _out_dir(args)
    log_path = out / "metrics.jsonl"
    ckpt_path = out / "checkpoint.bin"
    if args.epochs > 0:
        history = train_loop(model, tcfg, log_path=log_path, verbose=True)
        if history and "map50" in history[-1]:
            print(f"final mAP@50 {history[-1]['map50']:.4f}")
    else:
        log_path.write_text("")
        print("0 epochs requested: writing the initialized checkpoint")
    mio.save_checkpoint(ckpt_path, model.state_dict())
    print(f"checkpoint: {ckpt_path}")
    print(f"metrics:    {log_path}")
    return 0


def _letterbox(img: np.ndarray, size: int, dtype):
    """Aspect-preserving bilinear resize onto a gray size x size canvas.

    Returns (canvas, scale, pad_x, pad_y) for mapping boxes back.
    """
    _, h, w = img.shape
    scale = min(size / h, size / w)
    nh, nw = max(int(round(h * scale)), 1), max(int(round(w * scale)), 1)
    with no_grad():
        resized = bilinear_resize(Tensor(img[None].astype(dtype)), nh, nw).data[0]
    canvas = np.full((3, size, size), 0.5, dtype=dtype)
    py, px = (size - nh) // 2, (size - nw) // 2
    canvas[:, py:py + nh, px:px + nw] = resized
    return canvas, scale, px, py


def _draw_box(img: np.ndarray, box, color):
    _, h, w = img.shape
    x1 = int(np.clip(round(box[0]), 0, w - 1))
    y1 = int(np.clip(round(box[1]), 0, h - 1))
    x2 = int(np.clip(round(box[2]), 0, w - 1))
    y2 = int(np.clip(round(box[3]), 0, h - 1))
    for c in range(3):
        img[c, y1, x1:x2 + 1] = color[c]
        img[c, y2, x1:x2 + 1] = color[c]
        img[c, y1:y2 + 1, x1] = color[c]
        img[c, y1:y2 + 1, x2] = color[c]


_BOX_COLORS = ((1.0, 0.2, 0.2), (0.2, 1.0, 0.2), (0.3, 0.5, 1.0))


def cmd_infer(args) -> int:
    cfg = _build_variant(args)
    dtype = _PRECISIONS[args.precision]
    model = MddcNet(cfg, np.random.default_rng(args.seed), dtype=dtype)
    if args.checkpoint:
        model.load_state_dict({k: np.asarray(v)
                               for k, v in mio.load_checkpoint(args.checkpoint).items()})
    model.eval()
    img = mio.read_ppm(args.image)
    size = args.input_size
    canvas, scale, px, py = _letterbox(img, size, dtype)
    with no_grad():
        preds = model(Tensor(canvas[None]))
    dets = decode_predictions(preds, cfg.strides,
                              score_threshold=args.score_threshold)[0]
    out = _out_dir(args)
    det_path = out / "detections.jsonl"
    annotated = img.copy()
    with det_path.open("w") as f:
        for d in dets:
            box = [(d.box[0] - px) / scale, (d.box[1] - py) / scale,
                   (d.box[2] - px) / scale, (d.box[3] - py) / scale]
            f.write(json.dumps({"class_id": d.class_id,
                                "class_name": CLASS_NAMES[d.class_id]
                                if d.class_id < len(CLASS_NAMES)
                                else str(d.class_id),
                                "score": round(d.score, 6),
                                "box": [round(v, 3) for v in box]}) + "\n")
            _draw_box(annotated, box, _BOX_COLORS[d.class_id % len(_BOX_COLORS)])
    ann_path = out / "annotated.ppm"
    mio.write_ppm(ann_path, annotated)
    print(f"{len(dets)} detections above score {args.score_threshold}")
    print(f"detections: {det_path}")
    print(f"annotated:  {ann_path}")
    return 0


def cmd_bench(args) -> int:
    lengths = [int(v) for v in _csv_tuple(args.lengths)]
    d_inner = args.d_inner
    rng = np.random.default_rng(args.seed)
    scfg = MambaBlockConfig(d_model=d_inner // max(args.expand, 1),
                            expand=max(args.expand, 1), d_state=args.d_state)
    params = SsmParams(scfg, rng)
    rows = []
    print(f"selective scan, D_inner={scfg.d_inner}, S={args.d_state}, "
          f"threads={args.threads}")
    print(f"{'L':>8}{'seq ns/op':>14}{'par ns/op':>14}")
    for length in lengths:
        u = Tensor(rng.standard_normal((1, length, scfg.d_inner)))
        with no_grad():
            for fn in (lambda: selective_scan_seq(u, params),
                       lambda: selective_scan_par(u, params, args.threads)):
                fn()                                   # warm up
            reps = max(1, args.reps)
            t0 = time.perf_counter()
            for _ in range(reps):
                selective_scan_seq(u, params)
            t_seq = (time.perf_counter() - t0) / reps
            t0 = time.perf_counter()
            for _ in range(reps):
                selective_scan_par(u, params, args.threads)
            t_par = (time.perf_counter() - t0) / reps
        rows.append((length, t_seq, t_par))
        ops = length * scfg.d_inner
        print(f"{length:>8}{1e9 * t_seq / ops:>14.1f}{1e9 * t_par / ops:>14.1f}")
    print(f"{'L -> 2L':>12}{'seq ratio':>12}{'par ratio':>12}")
    ok = True
    for (l1, s1, p1), (l2, s2, p2) in zip(rows, rows[1:]):
        if l2 != 2 * l1:
            continue
        rs, rp = s2 / s1, p2 / p1
        ok &= 1.6 <= rs <= 2.6
        print(f"{l1:>5}->{l2:<6}{rs:>11.2f}{rp:>12.2f}")
    print("sequential scaling is linear" if ok
          else "sequential scaling OUTSIDE the linear band [1.6, 2.6]")
    return 0 if ok else 1


# -- argument plumbing ---------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--variant", default="n-toy", choices=VARIANT_NAMES)
    common.add_argument("--stage-kinds", default=None,
                        help="4 comma-separated mixers, e.g. msddc,msddc,mamba,mamba")
    common.add_argument("--dilations", default=None,
                        help="comma-separated branch dilations, e.g. 1,2,4")
    common.add_argument("--ffn", default=None,
                        choices=("vanilla", "ca", "residual_ca", "gated_ca", "ce_ffn"))
    common.add_argument("--neck-attn", default=None,
                        choices=("concat", "mlca", "csca"))
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--precision", default="f64", choices=("f32", "f64"))
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default="out")
    common.add_argument("--config", default=None,
                        help="key=value file supplying flag defaults")

    parser = argparse.ArgumentParser(
        prog="mddcnet",
        description="hybrid deformable-conv / state-space detector toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", parents=[common],
                       help="run the named property-check suite")
    p.add_argument("--filter", default=None,
                   help="only run checks whose name contains this substring")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("report", parents=[common],
                       help="per-section parameter/FLOP budget vs targets")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference checks of every block family")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train", parents=[common],
                       help="train on the synthetic shape benchmark")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--train-scenes", type=int, default=800)
    p.add_argument("--val-scenes", type=int, default=200)
    p.add_argument("--early-stop-map", type=float, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", parents=[common],
                       help="detect objects in a PPM (P6) image")
    p.add_argument("image")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--input-size", type=int, default=64)
    p.add_argument("--score-threshold", type=float, default=0.25)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("bench", parents=[common],
                       help="selective-scan timing and L-scaling table")
    p.add_argument("--lengths", default="1024,2048,4096,8192")
    p.add_argument("--d-inner", type=int, default=64)
    p.add_argument("--d-state", type=int, default=16)
    p.add_argument("--expand", type=int, default=2)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(fn=cmd_bench)
    return parser


def _apply_config_defaults(args):
    if not getattr(args, "config", None):
        return
    overrides = _parse_config_file(args.config)
    casts = {"seed": int, "threads": int, "epochs": int, "batch": int,
             "input_size": int, "train_scenes": int, "val_scenes": int,
             "d_inner": int, "d_state": int, "expand": int, "reps": int,
             "lr": float, "early_stop_map": float, "score_threshold": float}
    for key, val in overrides.items():
        if not hasattr(args, key):
            raise UsageError(f"config file sets unknown option {key!r}")
        try:
            setattr(args, key, casts.get(key, str)(val))
        except ValueError as exc:
            raise UsageError(f"config value {key}={val!r}: {exc}") from exc


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        _apply_config_defaults(args)
        if args.seed is None:
            args.seed = default_seed()
        if args.command == "gradcheck":
            args.precision = "f64"
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, mio.CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
