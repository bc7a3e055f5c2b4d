"""Equivalent transformation module.

Training uses a bank of parallel filters of different odd shapes (plus an
identity branch and two full-size branches). Because every branch is linear
in the input, the bank collapses to one filter of the largest shape, both
during training (one convolution with the summed aligned weights) and at
inference (a frozen fused filter).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import tensor as T
from .drop import INFER, TRAIN, Rng, batch_factors, weight_mask
from .tensor import ConvSpec

EPS = 1e-5
PB_T = 0.1
R1 = 0.1
R2 = 0.5
EMA_MOMENTUM = 0.1

IDENTITY = "identity"
SUB = "sub"
DROPCONV = "dropconv"
STANDARD = "standard"


@dataclass
class EtmBranch:
    shape_id: int
    kind: str
    k_h: int
    k_w: int
    weight: np.ndarray
    p: float
    var: float = 1.0

    @property
    def learned(self) -> bool:
        return self.kind != IDENTITY


@dataclass
class EtmBank:
    spec: ConvSpec
    branches: list[EtmBranch]
    pb_t: float = PB_T
    r1: float = R1
    r2: float = R2
    ema_momentum: float = EMA_MOMENTUM

    @property
    def T(self) -> int:
        return math.ceil(self.spec.k_h / 2) * math.ceil(self.spec.k_w / 2)

    @property
    def dtype(self):
        return self.branches[-1].weight.dtype

    def branch(self, shape_id: int) -> EtmBranch:
        for b in self.branches:
            if b.shape_id == shape_id:
                return b
        raise KeyError(shape_id)

    def lambdas(self) -> dict[int, float]:
        return {b.shape_id: b.p / math.sqrt(b.var + EPS) for b in self.branches}

    def aligned(self, b: EtmBranch) -> np.ndarray:
        return T.pad_kernel(b.weight, self.spec.k_h, self.spec.k_w)

    def branch_spec(self, b: EtmBranch) -> ConvSpec:
        return self.spec.with_kernel(b.k_h, b.k_w)

    def drop_rates(self, b: EtmBranch) -> tuple[float, float]:
        """(branch-level, element-level) drop probability of one branch."""
        t = b.shape_id
        if t < self.T:
            return self.pb_t, 0.0
        if t == self.T:
            return self.r1 * self.pb_t, self.r2 * self.pb_t
        return 0.0, 0.0


def etm_eligible(spec: ConvSpec) -> bool:
    return spec.stride == (1, 1) and spec.k_h % 2 == 1 and spec.k_w % 2 == 1


def sub_shapes(k_h_max: int, k_w_max: int) -> list[tuple[int, int]]:
    """Odd kernel shapes strictly inside the max shape, smallest area first."""
    shapes = [(kh, kw) for kh in range(1, k_h_max + 1, 2) for kw in range(1, k_w_max + 1, 2)]
    shapes.remove((k_h_max, k_w_max))
    return sorted(shapes, key=lambda s: (s[0] * s[1], s))


def enumerate_branches(
    k_h_max: int,
    k_w_max: int,
    spec: ConvSpec,
    rng: Rng | None = None,
    base_weight: np.ndarray | None = None,
    dtype=np.float32,
    **hyper,
) -> EtmBank:
    """Build the branch bank for one filter site.

    Cold start draws fresh weights; with ``base_weight`` every branch starts
    from (a centered crop of) that filter and the bank fuses back to it.
    """
    if k_h_max % 2 == 0 or k_w_max % 2 == 0:
        raise ValueError(f"kernel extents must be odd, got {k_h_max}x{k_w_max}")
    spec = spec.with_kernel(k_h_max, k_w_max)
    if spec.stride != (1, 1):
        raise ValueError("ETM applies to stride-1 filter sites only")
    rng = rng or Rng(0)
    cig = spec.c_in // spec.groups
    n_t = math.ceil(k_h_max / 2) * math.ceil(k_w_max / 2)

    def init(kh, kw):
        if base_weight is not None:
            return T.crop_kernel(base_weight, kh, kw).astype(dtype, copy=True)
        return rng.normal((spec.c_out, cig, kh, kw), math.sqrt(2.0 / (cig * kh * kw)), dtype)

    warm = base_weight is not None
    branches = []
    if spec.c_in == spec.c_out:
        delta = T.delta_kernel(spec.c_out, spec.groups, 1, 1, dtype)
        branches.append(EtmBranch(0, IDENTITY, 1, 1, delta, 0.0))
    for t, (kh, kw) in enumerate(sub_shapes(k_h_max, k_w_max), start=1):
        branches.append(EtmBranch(t, SUB, kh, kw, init(kh, kw), 0.0))
    branches.append(EtmBranch(n_t, DROPCONV, k_h_max, k_w_max, init(k_h_max, k_w_max), 0.0))
    # warm start: lambda of the standard branch is exactly 1 so the bank fuses to base_weight
    p_std = math.sqrt(1.0 + EPS) if warm else 1.0
    branches.append(EtmBranch(n_t + 1, STANDARD, k_h_max, k_w_max, init(k_h_max, k_w_max), p_std))
    return EtmBank(spec, branches, **hyper)


@dataclass
class DropDraw:
    """Random state of one training forward: per-branch factors and the element mask."""

    factors: dict[int, float] = field(default_factory=dict)
    mask: np.ndarray | None = None


def sample_drops(bank: EtmBank, rng: Rng | None, mode: str = TRAIN) -> DropDraw:
    draw = DropDraw()
    for b in bank.branches:
        pb, pw = bank.drop_rates(b)
        if mode == INFER or rng is None or pb == 0.0:
            draw.factors[b.shape_id] = 1.0
        else:
            draw.factors[b.shape_id] = float(batch_factors(1, pb, rng)[0])
        if b.kind == DROPCONV and mode != INFER and rng is not None and pw > 0.0:
            draw.mask = weight_mask(b.weight.shape, pw, rng).astype(bank.dtype)
    return draw


def _no_param(name, arr):
    return arr


def assemble_weight(bank: EtmBank, draw: DropDraw, param=_no_param):
    """Single equivalent training weight (tape-aware).

    ``param(name, array)`` turns stored tensors into tape leaves; names are
    ``b{t}.weight`` and ``b{t}.p``.
    """
    kh, kw = bank.spec.k_h, bank.spec.k_w
    total = None
    for b in bank.branches:
        f = draw.factors[b.shape_id]
        if f == 0.0:
            continue
        lam = ag.div(param(f"b{b.shape_id}.p", np.asarray(b.p, dtype=bank.dtype)), math.sqrt(b.var + EPS))
        w = b.weight if b.kind == IDENTITY else param(f"b{b.shape_id}.weight", b.weight)
        if b.kind == DROPCONV and draw.mask is not None:
            w = ag.mul(w, draw.mask)
        if (b.k_h, b.k_w) != (kh, kw):
            w = ag.pad_kernel(w, kh, kw)
        term = ag.mul(w, ag.mul(lam, np.asarray(f, dtype=bank.dtype)))
        total = term if total is None else ag.add(total, term)
    if total is None:
        return np.zeros(bank.spec.weight_shape, dtype=bank.dtype)
    return total


def update_stats(x: np.ndarray, bank: EtmBank):
    """EMA refresh of each branch's output variance from its own response to x."""
    m = bank.ema_momentum
    for b in bank.branches:
        y = x if b.kind == IDENTITY else T.conv2d(x, bank.branch_spec(b), b.weight)
        b.var = (1.0 - m) * b.var + m * float(T.reduce_var(y))


def forward_train(x, bank: EtmBank, rng: Rng | None = None, update_stats_: bool = False,
                  mode: str = TRAIN, param=_no_param):
    """Training forward as one convolution with the assembled weight."""
    xv = ag.value(x)
    if xv.shape[1] != bank.spec.c_in:
        raise ValueError(f"input has {xv.shape[1]} channels, bank expects {bank.spec.c_in}")
    if update_stats_:
        update_stats(xv, bank)
    draw = sample_drops(bank, rng, mode)
    return ag.conv2d(x, assemble_weight(bank, draw, param), bank.spec)


def forward_branches(x: np.ndarray, bank: EtmBank, draw: DropDraw | None = None) -> np.ndarray:
    """Literal multi-branch form: one convolution per branch, summed."""
    if x.shape[1] != bank.spec.c_in:
        raise ValueError(f"input has {x.shape[1]} channels, bank expects {bank.spec.c_in}")
    lams = bank.lambdas()
    out = None
    for b in bank.branches:
        f = 1.0 if draw is None else draw.factors[b.shape_id]
        if f == 0.0:
            continue
        if b.kind == IDENTITY:
            y = x
        else:
            w = b.weight
            if b.kind == DROPCONV and draw is not None and draw.mask is not None:
                w = w * draw.mask
            y = T.conv2d(x, bank.branch_spec(b), w)
        y = y * x.dtype.type(lams[b.shape_id] * f)
        out = y if out is None else out + y
    if out is None:
        n, _, h, w = x.shape
        return np.zeros((n, bank.spec.c_out) + bank.spec.out_hw(h, w), dtype=x.dtype)
    return out


@dataclass(frozen=True)
class FusedFilter:
    weight: np.ndarray
    spec: ConvSpec


def fuse(bank: EtmBank) -> FusedFilter:
    lams = bank.lambdas()
    if not all(np.isfinite(v) for v in lams.values()):
        raise ValueError(f"non-finite branch scale in {lams}")
    w_eq = np.zeros(bank.spec.weight_shape, dtype=np.float64)
    for b in bank.branches:
        w_eq += lams[b.shape_id] * bank.aligned(b).astype(np.float64)
    w_eq = w_eq.astype(bank.dtype)
    if not np.all(np.isfinite(w_eq)):
        raise ValueError("fused weights are not finite")
    return FusedFilter(w_eq, bank.spec)


def forward_fused(x, f: FusedFilter):
    if ag.value(x).shape[1] != f.spec.c_in:
        raise ValueError(f"input has {ag.value(x).shape[1]} channels, filter expects {f.spec.c_in}")
    return ag.conv2d(x, f.weight, f.spec)


@dataclass
class BranchGradCheck:
    shape_id: int
    kind: str
    factor: float
    max_err: float
    exact_zero: bool


@dataclass
class BranchGradReport:
    rows: list[BranchGradCheck]
    mask_zero_exact: bool
    fd_rel_err: float
    tol: float = 1e-6

    @property
    def ok(self) -> bool:
        dropped_ok = all(r.exact_zero for r in self.rows if r.factor == 0.0)
        prop_ok = all(r.max_err <= self.tol for r in self.rows)
        return dropped_ok and prop_ok and self.mask_zero_exact and self.fd_rel_err <= self.tol


def check_branch_gradients(bank: EtmBank, x: np.ndarray, rng: Rng, fd: bool = True) -> BranchGradReport:
    """Check the per-branch gradient structure of the training weight.

    With aligned weights as leaves and loss = sum(output), every surviving
    branch gradient equals lambda_t * factor_t * G (masked by the element
    mask on the drop-conv branch), where G is the gradient with respect to
    the assembled weight. Dropped branches must get exact zeros.
    """
    x = np.asarray(x, dtype=np.float64)
    draw = sample_drops(bank, rng, TRAIN)
    lams = bank.lambdas()
    kh, kw = bank.spec.k_h, bank.spec.k_w
    aligned = {b.shape_id: bank.aligned(b).astype(np.float64) for b in bank.branches}
    mask = None if draw.mask is None else draw.mask.astype(np.float64)

    def build(leaf):
        total = None
        for b in bank.branches:
            w = leaf(b.shape_id)
            if b.kind == DROPCONV and mask is not None:
                w = ag.mul(w, mask)
            term = ag.mul(w, lams[b.shape_id] * draw.factors[b.shape_id])
            total = term if total is None else ag.add(total, term)
        return total

    tape = ag.GradTape()
    w_eq = build(lambda t: tape.leaf(f"hat{t}", aligned[t]))
    loss = ag.reduce_sum(ag.conv2d(x, w_eq, bank.spec))
    grads = tape.backward(loss)
    g_shared = T.conv2d_grad_weight(np.ones((x.shape[0], bank.spec.c_out) + bank.spec.out_hw(*x.shape[2:])),
                                    bank.spec, x)

    rows = []
    for b in bank.branches:
        t = b.shape_id
        g = grads[f"hat{t}"]
        expect = lams[t] * draw.factors[t] * g_shared
        if b.kind == DROPCONV and mask is not None:
            expect = expect * mask
        scale = max(1.0, float(np.abs(expect).max()))
        rows.append(BranchGradCheck(t, b.kind, draw.factors[t], float(np.abs(g - expect).max()) / scale,
                                    bool(np.all(g == 0.0))))
    mask_ok = True
    if mask is not None:
        g_t = grads[f"hat{bank.T}"]
        mask_ok = bool(np.all(g_t[np.broadcast_to(mask, g_t.shape) == 0.0] == 0.0))

    fd_err = 0.0
    if fd:
        t_std = bank.T + 1

        def f(w_std):
            return float(T.conv2d(x, bank.spec, ag.value(build(lambda t: w_std if t == t_std else aligned[t]))).sum())

        num = ag.finite_difference_grad(f, aligned[t_std])
        ana = grads[f"hat{t_std}"]
        fd_err = float(np.abs(num - ana).max() / max(1.0, np.abs(ana).max()))
    return BranchGradReport(rows, mask_ok, fd_err)
