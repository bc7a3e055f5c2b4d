"""Command-line entry point."""
from __future__ import annotations

import argparse
import csv
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import checks, complexity, distill, etm, io
from . import losses as L
from .model import SmallDepthConfig, build_smalldepth, disp_to_depth

FUSE_TOL = 1e-5


class CliError(Exception):
    pass


def parse_res(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 128x416, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return h, w


def _write(path, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text)


def cmd_init(a) -> int:
    cfg = SmallDepthConfig.load(a.config)
    model = build_smalldepth(cfg, etm_on=a.etm, seed=a.seed)
    io.save_model(model, a.out)
    print(f"wrote {a.out}: {len(model.state())} tensors, etm={'on' if model.has_etm else 'off'}")
    return 0


def cmd_profile(a) -> int:
    cfg = SmallDepthConfig.load(a.config)
    model = build_smalldepth(cfg, etm_on=a.etm)
    rep = complexity.profile_model(model, a.res)
    print(rep.table())
    if a.csv:
        _write(a.csv, rep.to_csv())
    if a.plot:
        from .plotting import plot_complexity

        plot_complexity(rep, a.plot)
    return 0


def site_deviations(model, seed: int, res=(64, 96)) -> dict[str, float]:
    """Per ETM site: max |branch-sum forward - fused forward| on a random probe."""
    gen = np.random.default_rng(seed)
    dims = model.site_dims(*res)
    out = {}
    for name, site in model.sites.items():
        if site.bank is None:
            continue
        (c, h, w), _ = dims[name]
        x = gen.normal(size=(1, c, h, w)).astype(site.bank.dtype)
        ref = etm.forward_branches(x, site.bank)
        got = etm.forward_fused(x, etm.fuse(site.bank))
        out[name] = float(np.max(np.abs(ref.astype(np.float64) - got)))
    return out


def cmd_fuse(a) -> int:
    store = io.read_weights(a.inp)
    model = io.load_model(store, "etm")
    devs = site_deviations(model, a.seed)
    fused = model.fuse_all()
    x = np.random.default_rng(a.seed).uniform(size=(1, 3, 64, 96)).astype(np.float32)
    end = max(float(np.max(np.abs(p - q))) for p, q in zip(model.forward(x).disp, fused.forward(x).disp))
    extra = {k: v for k, v in fused.state().items() if k.endswith(".fused")}
    io.save_model(model, a.out, extra)
    worst = max(devs.values()) if devs else 0.0
    print(f"fused {len(devs)} sites; max site deviation {worst:.3e}; max disparity deviation {end:.3e}")
    if worst > FUSE_TOL:
        print(f"error: deviation exceeds {FUSE_TOL:g}", file=sys.stderr)
        return 1
    return 0


def cmd_infer(a) -> int:
    model = io.load_model(a.weights)
    img = io.read_image(a.image)
    if img.shape[1] == 1:
        img = np.repeat(img, 3, axis=1)
    if not 0 <= a.scale < 4:
        raise CliError("--scale must be 0..3")
    disp = model.forward(img).disp[a.scale]
    if not a.native:
        disp = L.T.bilinear_resize(disp, *img.shape[2:])
    out = disp_to_depth(disp).astype(np.float32) if a.depth else disp
    io.write_pfm(a.out, out)
    if a.pgm16:
        io.write_pgm16(a.pgm16, out, a.pgm_factor)
    if a.plot:
        from .plotting import plot_depth

        plot_depth(out, a.plot, label="depth" if a.depth else "disparity")
    print(f"wrote {a.out} ({out.shape[2]}x{out.shape[3]}, {'depth' if a.depth else 'disparity'})")
    return 0


def cmd_verify(a) -> int:
    model = store = None
    if a.weights:
        store = io.read_weights(a.weights)
        model = io.load_model(store, "etm" if any(".etm." in n for n in store.names()) else "auto")
    results = checks.run_suite(a.seed, model, store)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_make_teacher(a) -> int:
    paths = distill.make_teacher(a.out, a.frames, a.res, a.seed)
    print(f"wrote {len(paths)} teacher frames to {a.out}")
    return 0


def cmd_distill_toy(a) -> int:
    with tempfile.TemporaryDirectory() as tmp:
        teacher_dir = a.teacher
        if teacher_dir is None:
            distill.make_teacher(tmp, a.frames, a.res, a.seed)
            teacher_dir = tmp
        frames = list(io.read_teacher_bundle(teacher_dir).values())
    student = build_smalldepth(SmallDepthConfig.load(a.config), etm_on=a.etm, seed=a.seed)
    coeffs = L.ApxCoeffs(a.lambda_enc, a.lambda_dec, a.lambda_disp)
    pyramid = None if a.pyramid == "none" else L.PyramidCoeffs.scheme(a.pyramid)

    def log(i, v):
        if i % a.log_every == 0 or i == a.iters - 1:
            print(f"iter {i:4d}  loss {v:.6g}", flush=True)

    res = distill.distill(student, frames, a.iters, a.lr, coeffs, a.seed, drops=not a.no_drops,
                          pyramid=pyramid, log=log)
    print(f"initial {res.initial:.6g}  final {res.final:.6g}  ratio {res.ratio:.4f}  ({res.seconds:.1f} s)")
    if a.csv:
        _write(a.csv, res.to_csv())
    if a.plot:
        from .plotting import plot_curve

        plot_curve(res.losses, a.plot, "training loss", "distillation")
    if a.save:
        io.save_model(student, a.save)
    return 0


def _read_map(path: Path) -> np.ndarray:
    if path.suffix.lower() == ".pfm":
        return io.read_pfm(path).astype(np.float64)
    if path.suffix.lower() in (".pgm", ".png16"):
        return io.read_pgm16(path)
    raise CliError(f"unsupported map file {path}")


def _maps(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise CliError(f"not a directory: {d}")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".pfm", ".pgm")}


def cmd_eval(a) -> int:
    preds, gts = _maps(a.pred), _maps(a.gt)
    common = sorted(set(preds) & set(gts))
    if not common:
        raise CliError("no frames with both a prediction and a ground-truth map")
    per_frame = {}
    for k in common:
        p = _read_map(preds[k])
        if a.pred_is_disp:
            p = disp_to_depth(p)
        g = _read_map(gts[k])
        if p.shape != g.shape:
            p = L.T.bilinear_resize(p[None, None], *g.shape)[0, 0]
        per_frame[k] = L.eval_depth(p, g, a.cap)
    mean = {m: float(np.mean([v[m] for v in per_frame.values()])) for m in L.METRIC_NAMES}
    print(f"{'frame':<16}" + "".join(f"{m:>10}" for m in L.METRIC_NAMES))
    for k, v in list(per_frame.items()) + [("mean", mean)]:
        print(f"{k:<16}" + "".join(f"{v[m]:>10.4f}" for m in L.METRIC_NAMES))
    if a.csv:
        Path(a.csv).parent.mkdir(parents=True, exist_ok=True)
        with open(a.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", *L.METRIC_NAMES])
            for k, v in list(per_frame.items()) + [("mean", mean)]:
                w.writerow([k, *(repr(v[m]) for m in L.METRIC_NAMES)])
    if a.plot:
        from .plotting import plot_metrics

        plot_metrics(per_frame, a.plot)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smalldepth", description="Lightweight depth network toolkit")
    sub = p.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("init", help="write freshly initialized weights")
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--etm", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_init)

    s = sub.add_parser("profile", help="parameter / FLOPs / memory-access report")
    s.add_argument("--config")
    s.add_argument("--res", type=parse_res, default=(128, 416))
    s.add_argument("--csv")
    s.add_argument("--plot")
    s.add_argument("--etm", action=argparse.BooleanOptionalAction, default=None)
    s.set_defaults(fn=cmd_profile)

    s = sub.add_parser("fuse", help="collapse ETM branch banks into single filters")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_fuse)

    s = sub.add_parser("infer", help="predict a disparity or depth map")
    s.add_argument("--weights", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=0)
    s.add_argument("--depth", action="store_true", help="write depth instead of disparity")
    s.add_argument("--native", action="store_true", help="keep the head's output size instead of the input size")
    s.add_argument("--pgm16")
    s.add_argument("--pgm-factor", type=float, default=256.0)
    s.add_argument("--plot")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("verify", help="run the randomized property suite")
    s.add_argument("--weights")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_verify)

    s = sub.add_parser("make-teacher", help="write synthetic teacher frames from a random frozen model")
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int, default=2)
    s.add_argument("--res", type=parse_res, default=(64, 96))
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_make_teacher)

    s = sub.add_parser("distill-toy", help="toy feature distillation against teacher frames")
    s.add_argument("--teacher")
    s.add_argument("--iters", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=2)
    s.add_argument("--res", type=parse_res, default=(64, 96))
    s.add_argument("--config")
    s.add_argument("--etm", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--lambda-enc", type=float, default=0.01)
    s.add_argument("--lambda-dec", type=float, default=0.01)
    s.add_argument("--lambda-disp", type=float, default=1.0)
    s.add_argument("--pyramid", choices=("none", *L.VIEW_KINDS[1:]), default="none")
    s.add_argument("--no-drops", action="store_true")
    s.add_argument("--log-every", type=int, default=10)
    s.add_argument("--csv")
    s.add_argument("--plot")
    s.add_argument("--save")
    s.set_defaults(fn=cmd_distill_toy)

    s = sub.add_parser("eval", help="depth metrics over matching prediction / ground-truth files")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--cap", type=float, default=80.0)
    s.add_argument("--pred-is-disp", action="store_true")
    s.add_argument("--csv")
    s.add_argument("--plot")
    s.set_defaults(fn=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, io.FormatError, ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
