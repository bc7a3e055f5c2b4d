"""Pyramid loss over transformed views, distillation loss with a position
mask, and depth evaluation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from . import autograd as ag
from . import tensor as T

VIEW_KINDS = ("cr", "lr", "hr", "flip", "color")


@dataclass(frozen=True)
class ViewKind:
    tag: str
    scale: float = 1.0
    flip_axis: str = "width"
    color_seed: int = 0
    brightness: float = 0.2
    contrast: float = 0.2

    def __post_init__(self):
        if self.tag not in VIEW_KINDS:
            raise ValueError(f"unknown view kind {self.tag!r}")
        if self.tag == "cr" and self.scale != 1.0:
            raise ValueError("the cr view carries the identity transform")

    def apply(self, img: np.ndarray) -> np.ndarray:
        """Transform an NCHW image batch into this view."""
        if self.tag in ("lr", "hr"):
            h, w = img.shape[2:]
            return T.bilinear_resize(img, max(1, round(h * self.scale)), max(1, round(w * self.scale)))
        if self.tag == "flip":
            return np.flip(img, axis=T.AXES[self.flip_axis]).copy()
        if self.tag == "color":
            rng = np.random.default_rng(self.color_seed)
            b = 1.0 + rng.uniform(-self.brightness, self.brightness)
            c = 1.0 + rng.uniform(-self.contrast, self.contrast)
            mean = img.mean(axis=(1, 2, 3), keepdims=True)
            return np.clip((img * b - mean) * c + mean, 0.0, 1.0).astype(img.dtype)
        return img


DEFAULT_VIEWS = {
    "cr": ViewKind("cr"),
    "lr": ViewKind("lr", scale=0.75),
    "hr": ViewKind("hr", scale=1.25),
    "flip": ViewKind("flip"),
    "color": ViewKind("color", color_seed=1),
}


@dataclass
class PyramidCoeffs:
    alpha: dict[str, float] = field(default_factory=lambda: {"cr": 1.0})
    beta: dict[str, float] = field(default_factory=dict)
    gamma: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for table in (self.alpha, self.beta, self.gamma):
            for k, v in table.items():
                if k not in VIEW_KINDS:
                    raise ValueError(f"unknown view kind {k!r}")
                if v < 0:
                    raise ValueError(f"negative coefficient {k}={v}")
        if self.beta.get("cr", 0.0) or self.gamma.get("cr", 0.0):
            raise ValueError("consistency coefficients of the cr view must be 0")

    def kinds(self) -> list[str]:
        used = {k for t in (self.alpha, self.beta, self.gamma) for k, v in t.items() if v}
        return [k for k in VIEW_KINDS if k in used or k == "cr"]

    # best single-kind rows of the loss ablation
    @classmethod
    def scheme(cls, kind: str) -> "PyramidCoeffs":
        rows = {
            "cr": (0.0, 0.0, 0.0),
            "lr": (0.5, 1.0, 0.5),
            "hr": (0.5, 0.5, 0.1),
            "flip": (1.0, 0.1, 0.5),
            "color": (1.0, 0.1, 0.1),
        }
        a, b, g = rows[kind]
        alpha = {"cr": 1.0}
        if kind != "cr":
            alpha[kind] = a
        return cls(alpha, {kind: b} if kind != "cr" else {}, {kind: g} if kind != "cr" else {})


@dataclass
class ViewOutput:
    """Model outputs for one view: a disparity map, a feature map, and plugin inputs."""

    disp: object
    feat: object
    inputs: dict = field(default_factory=dict)


class BaseLossPlugin(Protocol):
    def __call__(self, out: ViewOutput) -> dict[str, object]:
        """Return scalar components keyed photo, depth, feat, smooth."""


@dataclass
class ReferencePlugin:
    """Stand-in base loss: L1 disparity supervision plus edge-aware smoothness.

    Expects ``inputs["target"]`` (disparity at the view's output size) and
    optionally ``inputs["image"]`` for the smoothness edge weights.
    """

    lambda_p: float = 1.0
    lambda_d: float = 1.0
    lambda_f: float = 1.0
    smooth_weight: float = 1e-3

    def __call__(self, out: ViewOutput) -> dict[str, object]:
        d = out.disp
        target = out.inputs["target"]
        photo = ag.reduce_mean(ag.abs(ag.sub(d, target)))
        smooth = np.zeros((), dtype=ag.value(d).dtype)
        img = out.inputs.get("image")
        if img is not None and self.smooth_weight:
            smooth = ag.mul(edge_aware_smoothness(d, img), self.smooth_weight)
        zero = np.zeros((), dtype=ag.value(d).dtype)
        return {"photo": photo, "depth": zero, "feat": zero, "smooth": smooth}

    def combine(self, parts: dict[str, object]):
        total = ag.mul(parts["photo"], self.lambda_p)
        total = ag.add(total, ag.mul(parts["depth"], self.lambda_d))
        total = ag.add(total, ag.mul(parts["feat"], self.lambda_f))
        return ag.add(total, parts["smooth"])


def edge_aware_smoothness(disp, img: np.ndarray):
    h, w = ag.value(disp).shape[2:]
    gray = T.bilinear_resize(np.asarray(img), h, w).mean(axis=1, keepdims=True)
    norm = ag.div(disp, ag.add(ag.reduce_mean(disp, ("height", "width")), 1e-7))
    wx = np.exp(-np.abs(np.diff(gray, axis=3)))
    wy = np.exp(-np.abs(np.diff(gray, axis=2)))
    sx = ag.reduce_mean(ag.mul(ag.abs(ag.diff(norm, "width")), wx))
    sy = ag.reduce_mean(ag.mul(ag.abs(ag.diff(norm, "height")), wy))
    return ag.add(sx, sy)


def _log_dist(x, axis: str):
    """Log-softmax over 'channel', 'height', 'width' or flattened 'spatial' positions."""
    if axis == "spatial":
        n, c, h, w = ag.value(x).shape
        return ag.reshape(ag.log_softmax(ag.reshape(x, (n, c, 1, h * w)), "width"), (n, c, h, w))
    return ag.log_softmax(x, axis)


def sym_kl(a, b, axis: str = "channel"):
    """Symmetric KL between softmax distributions, halved and summed over the map."""
    if ag.value(a).shape != ag.value(b).shape:
        raise ValueError(f"shape mismatch {ag.value(a).shape} vs {ag.value(b).shape}")
    la = _log_dist(a, axis)
    lb = _log_dist(b, axis)
    # pa*log(pa/pb) + pb*log(pb/pa) = (pa - pb)*(la - lb)
    return ag.mul(ag.reduce_sum(ag.mul(ag.sub(ag.exp(la), ag.exp(lb)), ag.sub(la, lb))), 0.5)


def directional_kl(a, b):
    """One-sided KL of softmax along height plus along width, halved."""
    if ag.value(a).shape != ag.value(b).shape:
        raise ValueError(f"shape mismatch {ag.value(a).shape} vs {ag.value(b).shape}")
    total = None
    for axis in ("height", "width"):
        la = ag.log_softmax(a, axis)
        lb = ag.log_softmax(b, axis)
        term = ag.reduce_sum(ag.mul(ag.exp(la), ag.sub(la, lb)))
        total = term if total is None else ag.add(total, term)
    return ag.mul(total, 0.5)


def consistency_axis(x) -> str:
    """Distribution support for the view-consistency term: channels, or pixels of 1-channel maps."""
    return "channel" if ag.value(x).shape[1] > 1 else "spatial"


def align_view(kind: str, cr, view, resample: str = "cr", views=None):
    """Bring a cr output and a view output onto a common grid."""
    views = views or DEFAULT_VIEWS
    if kind == "flip":
        return cr, ag.flip(view, views["flip"].flip_axis)
    if kind in ("lr", "hr"):
        ch, cw = ag.value(cr).shape[2:]
        vh, vw = ag.value(view).shape[2:]
        if resample == "cr":
            return ag.bilinear_resize(cr, vh, vw), view
        return cr, ag.bilinear_resize(view, ch, cw)
    return cr, view


def phi_k(kind: str, a, b, resample: str = "cr", views=None):
    """Consistency between the cr output ``a`` and the (unaligned) view output ``b``."""
    if kind == "cr":
        return np.zeros((), dtype=ag.value(a).dtype)
    a, b = align_view(kind, a, b, resample, views)
    if ag.value(a).shape != ag.value(b).shape:
        raise ValueError(f"{kind}: shapes differ after alignment")
    if kind == "color":
        return ag.reduce_sum(ag.abs(ag.sub(a, b)))
    return sym_kl(a, b, consistency_axis(a))


@dataclass
class LossReport:
    total: object
    terms: dict[str, dict[str, float]] = field(default_factory=dict)
    level_grads: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    grads: dict[str, np.ndarray] | None = None

    @property
    def value(self) -> float:
        return float(ag.value(self.total))

    def rows(self) -> list[dict]:
        return [{"level": k, **v} for k, v in self.terms.items()]

    def to_csv(self) -> str:
        cols = ["level", "L", "phi_d", "phi_f", "total"]
        lines = [",".join(cols)]
        for r in self.rows():
            lines.append(",".join(str(r.get(c, "")) for c in cols))
        return "\n".join(lines) + "\n"

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r) + "\n" for r in self.rows())


def level_loss(kind: str, outputs: dict[str, ViewOutput], coeffs: PyramidCoeffs, base,
               resample: str = "cr", views=None):
    """alpha_k*L_k + beta_k*phi(d) + gamma_k*phi(f) for one level; returns (scalar, terms)."""
    out = outputs[kind]
    cr = outputs["cr"]
    a = coeffs.alpha.get(kind, 0.0)
    b = coeffs.beta.get(kind, 0.0)
    g = coeffs.gamma.get(kind, 0.0)
    dtype = ag.value(out.disp).dtype
    total = np.zeros((), dtype=dtype)
    terms = {}
    if a:
        parts = base(out)
        combine = getattr(base, "combine", None)
        lk = combine(parts) if combine else sum_parts(parts)
        total = ag.add(total, ag.mul(lk, a))
        terms["L"] = float(ag.value(lk))
    if b:
        pd = phi_k(kind, cr.disp, out.disp, resample, views)
        total = ag.add(total, ag.mul(pd, b))
        terms["phi_d"] = float(ag.value(pd))
    if g:
        pf = phi_k(kind, cr.feat, out.feat, resample, views)
        total = ag.add(total, ag.mul(pf, g))
        terms["phi_f"] = float(ag.value(pf))
    terms["total"] = float(ag.value(total))
    return total, terms


def sum_parts(parts: dict[str, object]):
    total = None
    for v in parts.values():
        total = v if total is None else ag.add(total, v)
    return total


def pyramid_loss(outputs: dict[str, ViewOutput], coeffs: PyramidCoeffs, base,
                 resample: str = "cr", views=None) -> LossReport:
    if "cr" not in outputs:
        raise ValueError("pyramid loss needs the cr view")
    total = None
    terms = {}
    for kind in coeffs.kinds():
        if kind not in outputs:
            raise ValueError(f"missing outputs for view {kind!r}")
        lv, t = level_loss(kind, outputs, coeffs, base, resample, views)
        terms[kind] = t
        total = lv if total is None else ag.add(total, lv)
    return LossReport(total, terms)


def grad_accumulate(levels: Sequence[Callable[[ag.GradTape], object]],
                    weights: Sequence[float] | None = None):
    """Backward each level on its own tape and sum the gradients by leaf name.

    Each callable builds one level's scalar loss on the tape it is given.
    Returns (summed gradients, per-level loss values, per-level gradients).
    """
    weights = [1.0] * len(levels) if weights is None else list(weights)
    if len(weights) != len(levels):
        raise ValueError("one weight per level required")
    summed: dict[str, np.ndarray] = {}
    values, per_level = [], []
    for fn, wgt in zip(levels, weights):
        tape = ag.GradTape()
        loss = fn(tape)
        if not isinstance(loss, ag.Var):
            values.append(float(np.asarray(loss)) * wgt)
            per_level.append({})
            continue
        grads = tape.backward(loss)
        values.append(loss.item() * wgt)
        per_level.append(grads)
        for k, g in grads.items():
            summed[k] = g * wgt if k not in summed else summed[k] + g * wgt
    return summed, values, per_level


def pyramid_backward(build: Callable[[ag.GradTape], dict[str, ViewOutput]], coeffs: PyramidCoeffs, base,
                     resample: str = "cr", views=None) -> LossReport:
    """Per-level backward: each level rebuilds the view outputs on a fresh tape.

    ``build`` must be deterministic so every level sees the same outputs.
    """
    kinds = coeffs.kinds()
    terms = {}

    def level_fn(kind):
        def fn(tape):
            lv, t = level_loss(kind, build(tape), coeffs, base, resample, views)
            terms[kind] = t
            return lv
        return fn

    summed, values, per_level = grad_accumulate([level_fn(k) for k in kinds])
    rep = LossReport(float(sum(values)), terms, dict(zip(kinds, per_level)), summed)
    return rep


# distillation


@dataclass
class ApxCoeffs:
    lambda_enc: float = 0.01
    lambda_dec: float = 0.01
    lambda_disp: float = 1.0
    mask_threshold: float = 0.3

    def __post_init__(self):
        if min(self.lambda_enc, self.lambda_dec, self.lambda_disp) < 0:
            raise ValueError("distillation weights must be non-negative")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ValueError("mask threshold must lie in (0, 1)")


def apx_mask(teacher_disp: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Keep pixels whose teacher disparity exceeds threshold x (lower) median."""
    teacher_disp = np.asarray(teacher_disp)
    if teacher_disp.size == 0:
        raise ValueError("empty teacher disparity")
    return teacher_disp > threshold * T.reduce_median(teacher_disp)


def apx_loss(student: dict[str, Sequence], teacher: dict[str, Sequence], coeffs: ApxCoeffs | None = None,
             report: dict | None = None):
    """Masked distribution matching of features and disparities to a teacher.

    ``student``/``teacher`` map 'enc', 'dec', 'disp' to per-stage lists.
    """
    coeffs = coeffs or ApxCoeffs()
    total = None
    for key, lam in (("enc", coeffs.lambda_enc), ("dec", coeffs.lambda_dec), ("disp", coeffs.lambda_disp)):
        s_list, t_list = list(student.get(key, [])), list(teacher.get(key, []))
        if len(s_list) != len(t_list):
            raise ValueError(f"{key}: {len(s_list)} student vs {len(t_list)} teacher slots")
        part = None
        for s, t in zip(s_list, t_list):
            t = np.asarray(t)
            if ag.value(s).shape != t.shape:
                raise ValueError(f"{key}: student {ag.value(s).shape} vs teacher {t.shape}")
            if key == "disp":
                m = apx_mask(t, coeffs.mask_threshold).astype(t.dtype)
                term = directional_kl(ag.mul(s, m), t * m)
            else:
                term = directional_kl(s, t)
            part = term if part is None else ag.add(part, term)
        if part is None:
            continue
        if report is not None:
            report[key] = float(ag.value(part))
        weighted = ag.mul(part, lam)
        total = weighted if total is None else ag.add(total, weighted)
    if total is None:
        raise ValueError("no distillation slots")
    return total


# evaluation


METRIC_NAMES = ("abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3")


def eval_depth(pred: np.ndarray, gt: np.ndarray, cap: float = 80.0, mask: np.ndarray | None = None,
               min_depth: float = 1e-3) -> dict[str, float]:
    """Median-aligned depth metrics over valid pixels."""
    if cap <= 0:
        raise ValueError("cap must be positive")
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred {pred.shape} vs gt {gt.shape}")
    valid = (gt > min_depth) & (gt < cap)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValueError("no valid ground-truth pixels")
    g = gt[valid]
    p = pred[valid]
    p = p * (np.median(g) / np.median(p))
    p = np.clip(p, min_depth, cap)
    thresh = np.maximum(g / p, p / g)
    return {
        "abs_rel": float(np.mean(np.abs(g - p) / g)),
        "sq_rel": float(np.mean((g - p) ** 2 / g)),
        "rmse": float(math.sqrt(np.mean((g - p) ** 2))),
        "rmse_log": float(math.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        "a1": float(np.mean(thresh < 1.25)),
        "a2": float(np.mean(thresh < 1.25 ** 2)),
        "a3": float(np.mean(thresh < 1.25 ** 3)),
    }
