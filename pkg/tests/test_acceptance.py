"""The eleven acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are repeated in the
terminal summary under "acceptance criteria".
"""
import re
import statistics
import time

import numpy as np
from conftest import record_criterion

from smalldepth import autograd as ag
from smalldepth import complexity as C
from smalldepth import drop, etm, io
from smalldepth import losses as L
from smalldepth.checks import random_bank, random_spec, randomize_banks
from smalldepth.cli import main
from smalldepth.model import SmallDepthConfig, build_smalldepth
from smalldepth.tensor import ConvSpec


def check(n, title, ok, detail):
    record_criterion(n, title, bool(ok), detail)
    assert ok, detail


def fd_rel(fn, x):
    """Tape gradient of a scalar fn against central differences."""
    tape = ag.GradTape()
    g = tape.backward(fn(tape.leaf("x", x)))["x"]
    num = ag.finite_difference_grad(fn, x)
    return float(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12))


def test_c01_fusion_equivalence():
    t0 = time.perf_counter()
    gen = np.random.default_rng(101)
    worst = {np.float32: 0.0, np.float64: 0.0}
    for dtype in worst:
        for _ in range(100):
            bank = random_bank(gen, dtype)
            x = gen.normal(size=(2, bank.spec.c_in, 7, 8)).astype(dtype)
            fused = etm.forward_fused(x, etm.fuse(bank)).astype(np.float64)
            for ref in (etm.forward_train(x, bank, None, mode=drop.INFER), etm.forward_branches(x, bank)):
                worst[dtype] = max(worst[dtype], float(np.max(np.abs(ref.astype(np.float64) - fused))))
    secs = time.perf_counter() - t0
    ok = worst[np.float32] <= 1e-5 and worst[np.float64] <= 1e-10 and secs < 30
    check(1, "ETM fusion equivalence", ok,
          f"f32 {worst[np.float32]:.2e} (<=1e-5), f64 {worst[np.float64]:.2e} (<=1e-10), {secs:.1f} s")


def test_c02_fused_model_equals_etm_model():
    m = build_smalldepth(etm_on=True, seed=7)
    randomize_banks(m, np.random.default_rng(7))
    fused = m.fuse_all()
    x = np.random.default_rng(8).uniform(size=(2, 3, 64, 96)).astype(np.float32)
    a, b = m.forward(x), fused.forward(x)
    disp = max(float(np.max(np.abs(p - q))) for p, q in zip(a.disp, b.disp))
    # features reach magnitudes in the hundreds; compare them relative to their scale
    feat = max(float(np.max(np.abs(p - q)) / np.max(np.abs(q))) for p, q in zip(a.enc + a.dec, b.enc + b.dec))
    ok = disp <= 1e-4 and feat <= 1e-4
    check(2, "fused model equals ETM model", ok, f"disparity max abs dev {disp:.2e}, feature max rel dev {feat:.2e}")


def test_c03_complexity_calibration():
    model = build_smalldepth()
    rep = C.profile_model(model, (128, 416))
    enc, dec = rep.encoder_decoder()
    total = rep.totals()["param"]
    devs = {
        "param": (total / 2.35e6 - 1, 0.15),
        "enc param": (enc["param"] / 2.07e6 - 1, 0.15),
        "dec param": (dec["param"] / 0.28e6 - 1, 0.15),
        "enc GFLOPs": (enc["flops"] / 0.25e9 - 1, 0.20),
        "dec GFLOPs": (dec["flops"] / 0.17e9 - 1, 0.20),
    }
    brute = sum(int(np.prod(w.shape)) for k, w in model.state().items() if k.endswith(".weight"))
    ok = all(abs(d) <= tol for d, tol in devs.values()) and total == brute
    detail = ", ".join(f"{k} {d:+.1%}" for k, (d, _) in devs.items())
    check(3, "complexity calibration", ok, f"{detail}; brute force {brute} == {total}")


def test_c04_mac_bound():
    gen = np.random.default_rng(404)
    sites = equal = violations = 0
    for i in range(20):
        widths = tuple(sorted(int(v) for v in gen.choice([8, 16, 24, 32, 48, 64], size=5)))
        cfg = SmallDepthConfig(widths=widths, blocks=tuple(int(v) for v in gen.integers(1, 3, 4)),
                               dec_group_size=int(gen.choice([1, 4, 8])), etm=bool(i % 2))
        res = (int(gen.choice([32, 64, 96])), int(gen.choice([32, 64, 128])))
        for r in C.profile_model(build_smalldepth(cfg, seed=i), res).rows:
            sites += 1
            violations += r.mac_bound > r.mac
            if r.c_in == r.c_out and (r.in_h, r.in_w) == (r.out_h, r.out_w):
                equal += 1
                violations += r.mac_bound != r.mac
    # isolated random sites, including grouped / strided / rectangular kernels
    for _ in range(500):
        spec = random_spec(gen, max_c=16, odd=False, stride1=False)
        h, w = int(gen.integers(2, 40)), int(gen.integers(2, 40))
        oh, ow = spec.out_hw(h, w)
        row = C.site_row("s", "x", spec, (h, w), (oh, ow))
        sites += 1
        violations += row.mac_bound > row.mac
        if spec.c_in == spec.c_out and (h, w) == (oh, ow):
            equal += 1
            violations += row.mac_bound != row.mac
    check(4, "MAC lower bound", violations == 0,
          f"{sites} sites, {equal} equal-channel same-size sites, {violations} violations")


def _kernel_cases():
    gen = np.random.default_rng(5)
    x = gen.normal(size=(2, 3, 4, 5))
    pos = gen.uniform(0.5, 2.0, size=x.shape)
    other = gen.normal(size=(1, 3, 1, 5))
    r = gen.normal

    def lin(op, shape_src):
        w = r(size=np.shape(op(shape_src)))
        return lambda v: ag.reduce_sum(ag.mul(op(v), w))

    cases = {
        "add": (lin(lambda v: ag.add(v, other), x), x), "sub": (lin(lambda v: ag.sub(other, v), x), x),
        "mul": (lin(lambda v: ag.mul(v, other), x), x), "div": (lin(lambda v: ag.div(other, v), pos), pos),
        "exp": (lin(ag.exp, x), x), "log": (lin(ag.log, pos), pos), "sqrt": (lin(ag.sqrt, pos), pos),
        "abs": (lin(ag.abs, x), x), "relu": (lin(ag.relu, x), x), "sigmoid": (lin(ag.sigmoid, x), x),
        "mean": (lin(lambda v: ag.reduce_mean(v, "channel"), x), x),
        "var": (lin(lambda v: ag.reduce_var(v, ("height", "width")), x), x),
        "reshape": (lin(lambda v: ag.reshape(v, (6, 20)), x), x), "flip": (lin(lambda v: ag.flip(v), x), x),
        "diff": (lin(lambda v: ag.diff(v, "height"), x), x),
        "log_softmax": (lin(lambda v: ag.log_softmax(v, "width"), x), x),
        "softmax": (lin(lambda v: ag.softmax(v, "channel"), x), x),
        "resize": (lin(lambda v: ag.bilinear_resize(v, 7, 3), x), x),
        "pad_kernel": (lin(lambda v: ag.pad_kernel(v, 6, 7), x), x),
    }
    for i, spec in enumerate([ConvSpec.same(3, 4, 3), ConvSpec.same(4, 4, 3, groups=2, dilation=2),
                              ConvSpec(4, 2, 2, 3, groups=2, stride=(2, 1), padding=(1, 0))]):
        xi, wi, bi = r(size=(1, spec.c_in, 6, 7)), r(size=spec.weight_shape), r(size=(spec.c_out,))
        cases[f"conv{i}.x"] = (lin(lambda v, s=spec, w=wi, b=bi: ag.conv2d(v, w, s, b), xi), xi)
        cases[f"conv{i}.w"] = (lin(lambda v, s=spec, x_=xi, b=bi: ag.conv2d(x_, v, s, b), wi), wi)
        cases[f"conv{i}.b"] = (lin(lambda v, s=spec, x_=xi, w=wi: ag.conv2d(x_, w, s, v), bi), bi)
    # both loss families
    a, b = r(size=(1, 3, 4, 5)), r(size=(1, 3, 4, 5))
    cases["sym_kl"] = (lambda v: L.sym_kl(v, b), a)
    cases["sym_kl.spatial"] = (lambda v: L.sym_kl(v, b, "spatial"), a)
    cases["directional_kl"] = (lambda v: L.directional_kl(v, b), a)
    cases["directional_kl.teacher"] = (lambda v: L.directional_kl(a, v), b)
    disp_t = gen.uniform(0.05, 1, size=(1, 1, 4, 5))
    enc_t = [r(size=(1, 3, 4, 5))]
    cases["apx_loss.enc"] = (lambda v: L.apx_loss({"enc": [v], "disp": [disp_t * 0.9]},
                                                  {"enc": enc_t, "disp": [disp_t]}), a)
    cases["apx_loss.disp"] = (lambda v: L.apx_loss({"enc": [a], "disp": [v]}, {"enc": enc_t, "disp": [disp_t]}),
                              gen.uniform(0.05, 1, size=disp_t.shape))
    feat, tgt = r(size=(1, 2, 6, 8)), gen.uniform(0.1, 0.9, size=(1, 1, 6, 8))
    coeffs = L.PyramidCoeffs({"cr": 1.0, "flip": 1.0, "color": 1.0, "lr": 0.5},
                             {"flip": 0.1, "color": 0.1, "lr": 1.0}, {"flip": 0.5, "color": 0.1, "lr": 0.5})
    views = {"flip": (gen.uniform(0.1, 0.9, size=(1, 1, 6, 8)), r(size=(1, 2, 6, 8))),
             "color": (gen.uniform(0.1, 0.9, size=(1, 1, 6, 8)), r(size=(1, 2, 6, 8))),
             "lr": (gen.uniform(0.1, 0.9, size=(1, 1, 4, 6)), r(size=(1, 2, 4, 6)))}

    def pyramid(v):
        outs = {"cr": L.ViewOutput(v, feat, {"target": tgt})}
        for k, (d, f) in views.items():
            outs[k] = L.ViewOutput(d, f, {"target": L.T.bilinear_resize(tgt, *d.shape[2:])})
        return L.pyramid_loss(outs, coeffs, L.ReferencePlugin()).total

    cases["pyramid_loss"] = (pyramid, gen.uniform(0.1, 0.9, size=(1, 1, 6, 8)))
    return cases


def test_c05_gradients():
    errs = {k: fd_rel(fn, x) for k, (fn, x) in _kernel_cases().items()}
    worst_name = max(errs, key=errs.get)
    gen = np.random.default_rng(55)
    structural = []
    dropped_seen = 0
    for i in range(20):
        bank = random_bank(gen, np.float64, random_spec(gen, max_c=3))
        bank.pb_t = 0.5
        x = gen.normal(size=(1, bank.spec.c_in, 5, 5))
        rep = etm.check_branch_gradients(bank, x, drop.Rng(i))
        structural.append(rep.ok)
        dropped_seen += sum(r.factor == 0.0 for r in rep.rows)
    ok = errs[worst_name] <= 1e-6 and all(structural) and dropped_seen > 0
    check(5, "gradient correctness", ok,
          f"{len(errs)} FD checks, worst {worst_name} {errs[worst_name]:.2e} (<=1e-6); "
          f"branch structure {sum(structural)}/{len(structural)} banks, {dropped_seen} dropped branches seen")


def test_c06_drop_semantics():
    n = 10_000
    rows = []
    ok = True
    for k, pb in enumerate((0.1, 0.5, 0.9)):
        x = np.ones((n, 1, 1, 1))
        y = drop.drop_batch(x, pb, drop.Rng(600 + k))
        sigma = np.sqrt(pb / (1 - pb)) / np.sqrt(n)
        z = abs(float(y.mean()) - 1) / sigma
        ok &= z <= 3
        rows.append(f"pb={pb} z={z:.2f}")
    const = True
    for k in range(20):
        spec = ConvSpec.same(int(3 + k % 4), 4, 3, groups=1)
        w = np.random.default_rng(k).normal(size=spec.weight_shape)
        dropped = drop.drop_conv_weights(np.ones_like(w), 0.5, drop.Rng(k))
        const &= bool(np.all(dropped == dropped[:, :1]))
        bank = etm.enumerate_branches(3, 3, spec)
        bank.pb_t = 0.9
        draw = etm.sample_drops(bank, drop.Rng(k), drop.TRAIN)
        if draw.mask is not None:
            const &= draw.mask.shape[1] == 1
    check(6, "drop semantics", ok and const, f"{', '.join(rows)} (<=3 sigma, n={n}); mask constant over c_in: {const}")


def test_c07_loss_identities():
    gen = np.random.default_rng(707)
    bad = 0
    for i in range(1000):
        shape = (1, int(gen.integers(1, 4)), int(gen.integers(1, 5)), int(gen.integers(2, 6)))
        a, b = gen.normal(size=shape) * 2, gen.normal(size=shape) * 2
        axis = ("channel", "spatial", "height", "width")[i % 4]
        for v in (L.sym_kl(a, b, axis), L.directional_kl(a, b)):
            bad += not v >= 0
        bad += L.sym_kl(a, a, axis) != 0 or L.directional_kl(a, a) != 0
        # shifting logits leaves the distribution unchanged
        bad += L.directional_kl(a + 3.0, a) > 1e-12
        # distinct width-distributions give a strictly positive value
        if shape[3] > 1 and not np.allclose(np.diff(a - b, axis=3), 0):
            bad += L.directional_kl(a, b) <= 0
    # pyramid degenerates to the base loss
    disp, tgt = gen.uniform(0.1, 0.9, size=(2, 1, 6, 8)), gen.uniform(0.1, 0.9, size=(2, 1, 6, 8))
    base = L.ReferencePlugin()
    out = {"cr": L.ViewOutput(disp, gen.normal(size=(2, 4, 6, 8)), {"target": tgt})}
    out["flip"] = L.ViewOutput(disp[..., ::-1] * 0.5, out["cr"].feat, {"target": tgt})
    exact = L.pyramid_loss(out, L.PyramidCoeffs({"cr": 1.0}), base).value == float(base.combine(base(out["cr"])))
    # per-level backward equals summed backward
    x = gen.normal(size=(1, 3, 4, 4))
    targets = [gen.normal(size=x.shape) for _ in range(5)]
    weights = gen.uniform(0.1, 2.0, 5)
    summed, _, _ = L.grad_accumulate([lambda t, g=g: L.sym_kl(t.leaf("x", x), g) for g in targets], weights)
    tape = ag.GradTape()
    xv = tape.leaf("x", x)
    total = ag.reduce_sum(ag.mul(xv, 0.0))
    for w, g in zip(weights, targets):
        total = ag.add(total, ag.mul(L.sym_kl(xv, g), float(w)))
    direct = tape.backward(total)["x"]
    rel = float(np.max(np.abs(summed["x"] - direct)) / np.max(np.abs(direct)))
    ok = bad == 0 and exact and rel <= 1e-6
    check(7, "loss identities", ok,
          f"{bad} violations over 1000 pairs; pyramid == L_cr exactly: {exact}; grad_accumulate rel {rel:.1e}")


def _mask_oracle(d, thr=0.3):
    vals = sorted(float(v) for v in d.ravel())
    med = vals[(len(vals) - 1) // 2]
    return np.array([float(v) > thr * med for v in d.ravel()]).reshape(d.shape)


def test_c08_apx_mask():
    gen = np.random.default_rng(808)
    cases = [np.zeros((1, 1, 4, 6))]
    for i in range(100):
        shape = (int(gen.integers(1, 3)), 1, int(gen.integers(1, 9)), int(gen.integers(1, 9)))
        d = gen.uniform(size=shape) ** int(gen.integers(1, 6))
        if i % 5 == 0:
            d = np.round(d * 4) / 4  # heavy ties
        cases.append(d)
    mismatches = sum(not np.array_equal(L.apx_mask(d), _mask_oracle(d)) for d in cases)
    zero_ok = not L.apx_mask(cases[0]).any()
    check(8, "APX mask", mismatches == 0 and zero_ok,
          f"{len(cases)} tensors, {mismatches} mismatches; all-zero gives all-false: {zero_ok}")


def test_c09_toy_distillation(tmp_path, capsys):
    t0 = time.perf_counter()
    code = main(["distill-toy", "--iters", "200", "--seed", "0", "--log-every", "50",
                 "--csv", str(tmp_path / "loss.csv")])
    secs = time.perf_counter() - t0
    out = capsys.readouterr().out
    m = re.search(r"initial (\S+)\s+final (\S+)", out)
    initial, final = float(m.group(1)), float(m.group(2))
    ratio = final / initial
    ok = code == 0 and ratio < 0.5 and secs < 300
    check(9, "toy distillation", ok, f"initial {initial:.4g}, final {final:.4g}, ratio {ratio:.3f} (<0.5), {secs:.0f} s")


def test_c10_fused_inference_faster():
    m = build_smalldepth(etm_on=True, seed=10)
    randomize_banks(m, np.random.default_rng(10))
    fused = m.fuse_all()
    x = np.random.default_rng(11).uniform(size=(1, 3, 64, 96)).astype(np.float32)
    ctx_branches = dict(etm_form="branches")

    def timed(fn):
        fn()  # warm-up
        runs = []
        for _ in range(10):
            t = time.perf_counter()
            fn()
            runs.append(time.perf_counter() - t)
        return statistics.median(runs)

    t_fused = timed(lambda: fused.forward(x))
    t_branch = timed(lambda: m.forward(x, m.ctx(**ctx_branches)))
    etm_rows = C.profile_model(m, (64, 96)).rows
    fused_rows = {r.name: r for r in C.profile_model(fused, (64, 96)).rows}
    branch_flops: dict[str, int] = {}
    for r in etm_rows:
        branch_flops[r.name.split("[")[0]] = branch_flops.get(r.name.split("[")[0], 0) + r.flops
    etm_sites = [n for n, s in m.sites.items() if s.bank is not None]
    per_site = bool(etm_sites) and all(fused_rows[n].flops < branch_flops[n] for n in etm_sites)
    f_fused = sum(r.flops for r in fused_rows.values())
    f_branch = sum(r.flops for r in etm_rows)
    ok = t_fused < t_branch and f_fused < f_branch and per_site
    check(10, "fused inference cost", ok,
          f"median {t_fused * 1e3:.1f} ms fused vs {t_branch * 1e3:.1f} ms multi-branch; "
          f"FLOPs {f_fused} < {f_branch}; per ETM site: {per_site}")


def test_c11_io_roundtrip(tmp_path):
    gen = np.random.default_rng(1111)
    store_bad = map_bad = 0
    for i in range(100):
        d = {}
        for j in range(int(gen.integers(0, 6))):
            shape = tuple(int(v) for v in gen.integers(0, 5, size=gen.integers(0, 4)))
            dt = (np.float32, np.float64, np.uint8)[int(gen.integers(0, 3))]
            d[f"t{j}.{gen.integers(0, 1e6)}"] = (gen.normal(size=shape) * 1e3).astype(dt)
        path = tmp_path / f"s{i}.sdwt"
        io.write_weights(d, path)
        back = io.read_weights(path)
        store_bad += back.names() != list(d)
        store_bad += any(back[k].dtype != v.dtype or back[k].shape != v.shape or back[k].tobytes() != v.tobytes()
                         for k, v in d.items())
        store_bad += back.to_bytes() != path.read_bytes()
        m = (gen.normal(size=(int(gen.integers(1, 40)), int(gen.integers(1, 40)))) * 10).astype(np.float32)
        io.write_pfm(tmp_path / f"m{i}.pfm", m)
        map_bad += float(np.max(np.abs(io.read_pfm(tmp_path / f"m{i}.pfm") - m))) > 1e-6
    check(11, "I/O round-trip", store_bad == 0 and map_bad == 0,
          f"{store_bad} store mismatches over 100 bitwise round-trips, "
          f"{map_bad} PFM maps over 1e-6 out of 100")
