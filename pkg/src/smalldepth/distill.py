"""Small training utilities: Adam, synthetic frames, teacher generation and
a feature-distillation loop."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import io
from . import losses as L
from .drop import INFER, TRAIN, DropSchedule, Rng
from .model import SmallDepthModel, build_smalldepth


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Updated copies of ``params``; names without a gradient get a zero one."""
        self.t += 1
        out = {}
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, p in params.items():
            g = grads.get(k)
            g = np.zeros(p.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(p.shape)
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            step = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            out[k] = (p - step).astype(p.dtype)
        return out


def apply_params(model: SmallDepthModel, params: dict[str, np.ndarray]) -> None:
    for k, v in params.items():
        model.set_param(k, v)


def synthetic_frames(n: int, h: int, w: int, seed: int = 0) -> np.ndarray:
    """Smooth random RGB scenes: a sky/ground gradient plus soft blobs, values in [0, 1]."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy /= max(h - 1, 1)
    xx /= max(w - 1, 1)
    out = np.empty((n, 3, h, w), dtype=np.float32)
    for i in range(n):
        base = rng.uniform(0.2, 0.8, 3)[:, None, None] * (0.6 + 0.4 * yy)
        for _ in range(4):
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.05, 0.3)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
            base = base + rng.uniform(-0.4, 0.4, 3)[:, None, None] * blob
        out[i] = np.clip(base, 0.0, 1.0)
    return out


def make_teacher(out_dir, frames: int = 2, res: tuple[int, int] = (64, 96), seed: int = 0,
                 teacher: SmallDepthModel | None = None) -> list[Path]:
    """Write one bundle file per synthetic frame, produced by a frozen random model."""
    teacher = teacher or build_smalldepth(seed=seed + 1000)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    imgs = synthetic_frames(frames, *res, seed=seed)
    paths = []
    for i in range(frames):
        img = imgs[i:i + 1]
        o = teacher.forward(img)
        p = out_dir / f"frame{i:04d}.sdwt"
        io.write_teacher_frame(p, img, o.enc, o.dec, o.disp)
        paths.append(p)
    return paths


def _stack(frames: list[io.TeacherFrame]):
    img = np.concatenate([f.image for f in frames], axis=0)
    slots = {k: [np.concatenate([f.slots()[k][i] for f in frames], axis=0)
                 for i in range(len(frames[0].slots()[k]))] for k in io.TEACHER_SLOTS}
    return img, slots


@dataclass
class DistillResult:
    losses: list[float] = field(default_factory=list)
    initial: float = 0.0
    final: float = 0.0
    seconds: float = 0.0
    terms: list[dict] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.final / self.initial if self.initial else float("nan")

    def to_csv(self) -> str:
        lines = ["iter,apx_loss,enc,dec,disp"]
        for i, (v, t) in enumerate(zip(self.losses, self.terms)):
            lines.append(f"{i},{v!r},{t.get('enc', '')!r},{t.get('dec', '')!r},{t.get('disp', '')!r}")
        return "\n".join(lines) + "\n"


def apx_eval(model: SmallDepthModel, img: np.ndarray, teacher: dict, coeffs: L.ApxCoeffs) -> float:
    o = model.forward(img, model.ctx())
    return float(L.apx_loss({"enc": o.enc, "dec": o.dec, "disp": o.disp}, teacher, coeffs))


def distill(student: SmallDepthModel, frames: list[io.TeacherFrame], iters: int = 200, lr: float = 1e-3,
            coeffs: L.ApxCoeffs | None = None, seed: int = 0, drops: bool = True,
            pyramid: L.PyramidCoeffs | None = None, log=None) -> DistillResult:
    """Fit a student to teacher feature maps by minimizing the distillation loss.

    With ``drops`` the student trains under the scheduled sample drops; the
    reported initial/final values are drop-free evaluations.  ``pyramid``
    adds the flip/color/scale consistency terms of the reference plugin,
    using the teacher's finest disparity as the supervision target.
    """
    coeffs = coeffs or L.ApxCoeffs()
    if not frames:
        raise ValueError("no teacher frames")
    probe = student.forward(frames[0].image)
    shapes = {"enc": [a.shape for a in probe.enc], "dec": [a.shape for a in probe.dec],
              "disp": [a.shape for a in probe.disp]}
    img, teacher = _stack([f.matched({k: [(f.image.shape[0],) + s[1:] for s in v] for k, v in shapes.items()})
                           for f in frames])
    rng = Rng(seed)
    sched = DropSchedule(iters, pb_max=student.config.pb_dsr)
    sched_sd = DropSchedule(iters, pb_max=student.config.pb_sd)
    opt = Adam(lr)
    res = DistillResult()
    t0 = time.perf_counter()
    student.mode = INFER
    res.initial = apx_eval(student, img, teacher, coeffs)
    base = L.ReferencePlugin()
    for i in range(iters):
        step_rng, rng = rng.split(2)
        student.mode = TRAIN if drops else INFER

        def build(tape, view_img=img):
            ctx = student.ctx(rng=step_rng, tape=tape, update_stats=True,
                              pb_dsr=sched(i) if drops else 0.0, pb_sd=sched_sd(i) if drops else 0.0)
            return student.forward(view_img, ctx), ctx

        tape = ag.GradTape()
        out, _ = build(tape)
        terms: dict = {}
        loss = L.apx_loss({"enc": out.enc, "dec": out.dec, "disp": out.disp}, teacher, coeffs, terms)
        if pyramid is not None:
            outputs = {"cr": L.ViewOutput(out.disp[0], out.dec[0], {"target": teacher["disp"][0], "image": img})}
            for kind in pyramid.kinds():
                if kind == "cr":
                    continue
                view = L.DEFAULT_VIEWS[kind]
                vimg = view.apply(img)
                vout, _ = build(tape, vimg)
                target = teacher["disp"][0]
                if kind in ("lr", "hr"):
                    target = L.T.bilinear_resize(target, *vout.disp[0].shape[2:])
                elif kind == "flip":
                    target = np.flip(target, axis=3).copy()
                outputs[kind] = L.ViewOutput(vout.disp[0], vout.dec[0], {"target": target, "image": vimg})
            loss = ag.add(loss, L.pyramid_loss(outputs, pyramid, base).total)
        grads = tape.backward(loss)
        res.losses.append(loss.item())
        res.terms.append(terms)
        apply_params(student, opt.step(student.learnable(), grads))
        if log is not None:
            log(i, res.losses[-1])
    student.mode = INFER
    res.final = apx_eval(student, img, teacher, coeffs)
    res.seconds = time.perf_counter() - t0
    return res
