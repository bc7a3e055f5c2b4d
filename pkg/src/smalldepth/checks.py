"""Randomized property suite shared by the `verify` command and the tests."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from . import complexity as C
from . import etm
from . import losses as L
from . import tensor as T
from .drop import INFER, Rng


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str = ""

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail}"


def random_spec(gen: np.random.Generator, max_c: int = 6, odd: bool = True, stride1: bool = True) -> T.ConvSpec:
    g = int(gen.choice([1, 1, 2, 3]))
    c_in = g * int(gen.integers(1, max_c // g + 1)) if g <= max_c else g
    c_out = g * int(gen.integers(1, max_c // g + 1)) if g <= max_c else g
    ks = [1, 3, 5] if odd else [1, 2, 3, 4, 5]
    kh, kw = int(gen.choice(ks)), int(gen.choice(ks))
    d = int(gen.integers(1, 3))
    s = 1 if stride1 else int(gen.integers(1, 3))
    return T.ConvSpec.same(c_in, c_out, kh, kw, groups=g, dilation=d, stride=s)


def random_bank(gen: np.random.Generator, dtype=np.float64, spec: T.ConvSpec | None = None) -> etm.EtmBank:
    """ETM bank with random weights, random scales p and random running variances."""
    spec = spec or random_spec(gen)
    bank = etm.enumerate_branches(spec.k_h, spec.k_w, spec, Rng(int(gen.integers(1 << 31))), dtype=dtype)
    for b in bank.branches:
        b.p = float(gen.normal())
        b.var = float(gen.uniform(0.5, 2.0))
    return bank


def randomize_banks(model, gen: np.random.Generator, scale: float = 0.3) -> None:
    """Give every ETM branch of a model a random scale and running variance."""
    for site in model.sites.values():
        if site.bank is None:
            continue
        for b in site.bank.branches:
            b.p = float(gen.normal(0.0, scale)) + (1.0 if b.kind == etm.STANDARD else 0.0)
            b.var = float(gen.uniform(0.5, 2.0))


def _rel(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def check_conv_oracle(gen, n: int = 20) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        spec = random_spec(gen, odd=False, stride1=False)
        x = gen.normal(size=(2, spec.c_in, int(gen.integers(3, 9)), int(gen.integers(3, 9))))
        w = gen.normal(size=spec.weight_shape)
        worst = max(worst, _rel(T.conv2d(x, spec, w), T.conv2d_reference(x, spec, w)))
    return CheckResult("conv2d vs loop oracle", worst <= 1e-10, f"max rel err {worst:.2e}")


def check_conv_grads(gen, n: int = 5) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        spec = random_spec(gen, max_c=4, odd=False, stride1=False)
        x = gen.normal(size=(1, spec.c_in, 5, 6))
        w = gen.normal(size=spec.weight_shape)
        r = gen.normal(size=(1, spec.c_out) + spec.out_hw(5, 6))
        tape = ag.GradTape()
        loss = ag.reduce_sum(ag.mul(ag.conv2d(tape.leaf("x", x), tape.leaf("w", w), spec), r))
        g = tape.backward(loss)
        fx = ag.finite_difference_grad(lambda v: np.sum(T.conv2d(v, spec, w) * r), x)
        fw = ag.finite_difference_grad(lambda v: np.sum(T.conv2d(x, spec, v) * r), w)
        worst = max(worst, _rel(g["x"], fx), _rel(g["w"], fw))
    return CheckResult("conv2d gradients vs finite differences", worst <= 1e-6, f"max rel err {worst:.2e}")


def check_fusion(gen, n: int = 20, dtype=np.float64, tol: float = 1e-10) -> CheckResult:
    worst = 0.0
    for _ in range(n):
        bank = random_bank(gen, dtype)
        x = gen.normal(size=(2, bank.spec.c_in, 7, 8)).astype(dtype)
        ref = etm.forward_branches(x, bank)
        got = etm.forward_fused(x, etm.fuse(bank))
        worst = max(worst, float(np.max(np.abs(ref.astype(np.float64) - got))))
    name = f"ETM fusion equivalence ({np.dtype(dtype).name})"
    return CheckResult(name, worst <= tol, f"max abs dev {worst:.2e} (tol {tol:g})")


def check_branch_grads(gen, n: int = 5) -> CheckResult:
    bad = []
    for i in range(n):
        bank = random_bank(gen, np.float64, random_spec(gen, max_c=3))
        x = gen.normal(size=(1, bank.spec.c_in, 5, 5))
        rep = etm.check_branch_gradients(bank, x, Rng(i))
        if not rep.ok:
            bad.append(i)
    return CheckResult("ETM branch gradient structure", not bad, f"{n - len(bad)}/{n} banks ok")


def check_complexity(gen, n: int = 30) -> CheckResult:
    problems = 0
    for _ in range(n):
        spec = random_spec(gen, max_c=8, odd=False, stride1=False)
        h, w = int(gen.integers(4, 20)), int(gen.integers(4, 20))
        oh, ow = spec.out_hw(h, w)
        row = C.site_row("s", "x", spec, (h, w), (oh, ow))
        if row.param != int(np.prod(spec.weight_shape)):
            problems += 1
        if row.mac_bound > row.mac:
            problems += 1
        if spec.c_in == spec.c_out and (h, w) == (oh, ow) and row.mac_bound != row.mac:
            problems += 1
    return CheckResult("complexity oracles", problems == 0, f"{problems} violations over {n} sites")


def check_losses(gen, n: int = 50) -> CheckResult:
    problems = 0
    for _ in range(n):
        a = gen.normal(size=(1, 3, 4, 5))
        b = gen.normal(size=(1, 3, 4, 5))
        for f in (L.sym_kl, L.directional_kl):
            if f(a, b) < 0 or abs(f(a, a)) > 1e-12:
                problems += 1
    # per-level backward equals summed backward
    x = gen.normal(size=(1, 2, 4, 4))
    ws = gen.uniform(0.1, 2.0, 5)
    targets = [gen.normal(size=x.shape) for _ in ws]

    def level(t):
        return lambda tape: L.sym_kl(tape.leaf("x", x), targets[t])

    summed, _, _ = L.grad_accumulate([level(t) for t in range(5)], ws)
    tape = ag.GradTape()
    xv = tape.leaf("x", x)
    total = None
    for wgt, tg in zip(ws, targets):
        term = ag.mul(L.sym_kl(xv, tg), float(wgt))
        total = term if total is None else ag.add(total, term)
    direct = tape.backward(total)["x"]
    if _rel(summed["x"], direct) > 1e-6:
        problems += 1
    return CheckResult("loss identities", problems == 0, f"{problems} violations")


def check_model(model, seed: int = 0, res=(64, 96)) -> list[CheckResult]:
    """Checks on a concrete model: finite bounded output and fused-form agreement."""
    gen = np.random.default_rng(seed)
    x = gen.uniform(size=(1, 3) + tuple(res)).astype(np.float32)
    model.mode = INFER
    out = model.forward(x)
    d = out.disp[0]
    results = [CheckResult("model forward finite, disparity in [0, 1]",
                           bool(np.all(np.isfinite(d)) and d.min() >= 0 and d.max() <= 1),
                           f"disp range [{d.min():.3f}, {d.max():.3f}]")]
    if model.has_etm:
        fused = model.fuse_all().forward(x)
        dev = max(float(np.max(np.abs(a - b))) for a, b in zip(out.disp, fused.disp))
        results.append(CheckResult("fused model equals ETM model", dev <= 1e-4, f"max disp dev {dev:.2e}"))
    counted = C.profile_model(model, res).totals()["param"]
    brute = C.count_weight_elements(model)
    results.append(CheckResult("profiled params equal stored weights", counted == brute, f"{counted} vs {brute}"))
    return results


SUITE: list[Callable] = [check_conv_oracle, check_conv_grads, check_fusion, check_branch_grads,
                         check_complexity, check_losses]


def run_suite(seed: int = 0, model=None, store=None) -> list[CheckResult]:
    gen = np.random.default_rng(seed)
    results = [fn(gen) for fn in SUITE]
    results.append(check_fusion(gen, dtype=np.float32, tol=1e-5))
    if model is not None:
        results.extend(check_model(model, seed))
    if store is not None:
        from .io import fused_mismatch

        if any(n.endswith(".fused") for n in store.names()) and any(".etm." in n for n in store.names()):
            mm = fused_mismatch(store)
            worst = max(mm.values()) if mm else 0.0
            results.append(CheckResult("stored fused filters match their branches", worst <= 1e-5,
                                       f"max dev {worst:.2e} over {len(mm)} sites"))
    return results
