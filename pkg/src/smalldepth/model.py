"""SmallDepth network: sparse downsampling, double-scale sparse residual
blocks, sparse upsampling, skip-only decoder and two-branch disparity heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import etm
from . import tensor as T
from .drop import INFER, PB_DSR, PB_SD, TRAIN, Rng, batch_factors
from .etm import PB_T, R1, R2
from .tensor import ConvSpec

MIN_INPUT = 32
IMG_MEAN = 0.45
IMG_STD = 0.225

DEFAULT_CONFIG = Path(__file__).with_name("default.cfg")


@dataclass
class SmallDepthConfig:
    widths: tuple[int, ...] = (32, 32, 96, 192, 448)
    blocks: tuple[int, ...] = (1, 1, 2, 2)
    expansion: int = 2
    # channels per group in the decoder's spatial filters (1 = depthwise)
    dec_group_size: int = 16
    head_kernel: int = 3
    etm: bool = False
    pb_dsr: float = PB_DSR
    pb_sd: float = PB_SD
    pb_t: float = PB_T
    r1: float = R1
    r2: float = R2

    def __post_init__(self):
        self.widths = tuple(int(c) for c in self.widths)
        self.blocks = tuple(int(n) for n in self.blocks)
        if len(self.widths) != 5 or len(self.blocks) != 4:
            raise ValueError("need 5 stage widths and 4 block counts")
        if any(b > a for a, b in zip(self.widths[1:], self.widths[:-1])):
            raise ValueError(f"widths must be non-decreasing: {self.widths}")
        for c in self.widths:
            if c % self.dec_group_size:
                raise ValueError(f"width {c} not divisible by decoder group size {self.dec_group_size}")

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(i) for i in v)
            elif isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SmallDepthConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        kw = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            kind = kinds[key]
            if kind.startswith("tuple"):
                kw[key] = tuple(int(v) for v in val.replace(",", " ").split())
            elif kind == "bool":
                if val.lower() not in ("on", "off", "true", "false", "1", "0"):
                    raise ValueError(f"config line {lineno}: bad flag {val!r}")
                kw[key] = val.lower() in ("on", "true", "1")
            elif kind == "int":
                kw[key] = int(val)
            else:
                kw[key] = float(val)
        return cls(**kw)

    @classmethod
    def load(cls, path=None) -> "SmallDepthConfig":
        return cls.from_text(Path(path or DEFAULT_CONFIG).read_text(encoding="utf-8"))


@dataclass
class Ctx:
    """Per-forward settings: mode, randomness, tape and tracing."""

    mode: str = INFER
    rng: Rng | None = None
    tape: ag.GradTape | None = None
    update_stats: bool = False
    # how unfused ETM sites evaluate at inference: one assembled conv or one conv per branch
    etm_form: str = "single"
    pb_dsr: float | None = None
    pb_sd: float | None = None
    trace: list | None = None

    def param(self, name: str, arr):
        return arr if self.tape is None else self.tape.leaf(name, arr)

    @property
    def training(self) -> bool:
        return self.mode == TRAIN


def batch_drop(y, pb: float, ctx: Ctx):
    """Tape-aware sample-level drop; pb = 1 drops every sample."""
    if ctx.mode == INFER or pb == 0.0:
        return y
    if ctx.rng is None:
        raise ValueError("training forward needs an Rng")
    n = ag.value(y).shape[0]
    f = batch_factors(n, pb, ctx.rng).astype(ag.value(y).dtype)[:, None, None, None]
    return ag.mul(y, f)


@dataclass
class Site:
    """One filter site: a plain conv, an ETM bank, or a fused filter."""

    name: str
    spec: ConvSpec
    subgraph: str
    weight: np.ndarray | None = None
    bank: etm.EtmBank | None = None
    bias: np.ndarray | None = None
    fused: bool = False

    def __call__(self, x, ctx: Ctx):
        b = None if self.bias is None else ctx.param(f"{self.name}.bias", self.bias)
        if self.bank is None:
            key = f"{self.name}.fused" if self.fused else f"{self.name}.weight"
            y = ag.conv2d(x, ctx.param(key, self.weight), self.spec, b)
        else:
            y = self._etm_forward(x, ctx)
            if b is not None:
                y = ag.add(y, ag.reshape(b, (1, -1, 1, 1)))
        if ctx.trace is not None:
            ctx.trace.append((self.name, ag.value(x).shape, ag.value(y).shape))
        return y

    def _etm_forward(self, x, ctx: Ctx):
        if ctx.mode == INFER and ctx.etm_form == "branches":
            return etm.forward_branches(ag.value(x), self.bank)

        def param(n, a):
            return ctx.param(f"{self.name}.etm.{n}", a)

        return etm.forward_train(x, self.bank, ctx.rng, ctx.update_stats and ctx.training, ctx.mode, param)

    def weight_tensors(self) -> dict[str, np.ndarray]:
        """Stored tensors of this site under their container names."""
        out = {}
        if self.bank is None:
            out[f"{self.name}.fused" if self.fused else f"{self.name}.weight"] = self.weight
        else:
            for br in self.bank.branches:
                pre = f"{self.name}.etm.b{br.shape_id}"
                if br.learned:
                    out[f"{pre}.weight"] = br.weight
                out[f"{pre}.p"] = np.array([br.p], dtype=np.float64)
                out[f"{pre}.var"] = np.array([br.var], dtype=np.float64)
        if self.bias is not None:
            out[f"{self.name}.bias"] = self.bias
        return out

    def fuse(self) -> "Site":
        if self.bank is None:
            return self
        f = etm.fuse(self.bank)
        return replace(self, weight=f.weight, bank=None, fused=True)


class SparseDownsample:
    def __init__(self, context: Site, channel: Site):
        self.context = context
        self.channel = channel

    def __call__(self, x, ctx: Ctx, pb_sd: float):
        return ag.add(self.context(x, ctx), batch_drop(self.channel(x, ctx), pb_sd, ctx))


class DSRBlock:
    def __init__(self, expand: Site, sc: Site, spc: Site, contract: Site):
        self.expand = expand
        self.sc = sc
        self.spc = spc
        self.contract = contract

    def __call__(self, x, ctx: Ctx, pb_dsr: float):
        mid = ag.relu(self.expand(x, ctx))
        x_sc = batch_drop(self.sc(mid, ctx), pb_dsr, ctx)
        x_spc = batch_drop(self.spc(mid, ctx), pb_dsr, ctx)
        return ag.add(self.contract(ag.add(ag.add(x_sc, x_spc), mid), ctx), x)


class SparseUpsample:
    def __init__(self, ct: Site, sc1: Site, chs: Site, sc2: Site):
        self.ct = ct
        self.sc1 = sc1
        self.chs = chs
        self.sc2 = sc2

    def __call__(self, x, ctx: Ctx, out_hw: tuple[int, int] | None = None):
        y = self.sc1(self.ct(x, ctx), ctx)
        h, w = ag.value(y).shape[2:]
        oh, ow = out_hw or (2 * h, 2 * w)
        y = ag.bilinear_resize(y, oh, ow)
        return self.sc2(self.chs(y, ctx), ctx)


class DispHead:
    def __init__(self, d1: Site, d2: Site):
        self.d1 = d1
        self.d2 = d2

    def __call__(self, x, ctx: Ctx):
        a = ag.sigmoid(self.d1(x, ctx))
        b = ag.sigmoid(self.d2(x, ctx))
        return ag.mul(ag.add(a, b), 0.5)


@dataclass
class ModelOutput:
    enc: list
    dec: list
    disp: list


@dataclass
class SmallDepthModel:
    config: SmallDepthConfig
    stem: Site
    downs: list[SparseDownsample]
    stages: list[list[DSRBlock]]
    ups: list[SparseUpsample]  # ups[k] maps level k+1 to level k
    heads: list[DispHead]
    mode: str = INFER
    sites: dict[str, Site] = field(default_factory=dict)

    def __post_init__(self):
        if not self.sites:
            self.sites = {s.name: s for s in _collect_sites(self)}

    @property
    def has_etm(self) -> bool:
        return any(s.bank is not None for s in self.sites.values())

    def ctx(self, rng: Rng | None = None, **kw) -> Ctx:
        return Ctx(mode=self.mode, rng=rng, **kw)

    def encoder(self, img, ctx: Ctx) -> list:
        return encoder_forward(img, self, ctx)

    def decoder(self, feats, ctx: Ctx) -> list:
        return decoder_forward(feats, self, ctx)

    def forward(self, img, ctx: Ctx | None = None) -> ModelOutput:
        ctx = ctx or self.ctx()
        enc = self.encoder(img, ctx)
        dec = self.decoder(enc, ctx)
        return ModelOutput(enc, dec, disparity_heads(dec, self, ctx))

    def fuse_all(self) -> "SmallDepthModel":
        fused = {n: s.fuse() for n, s in self.sites.items()}
        cfg = replace(self.config, etm=False)
        return _assemble(cfg, fused, self.mode)

    # weight container view

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for s in self.sites.values():
            out.update(s.weight_tensors())
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        for name, site in self.sites.items():
            for key, arr in site.weight_tensors().items():
                if key not in state:
                    raise KeyError(f"missing weight entry {key!r}")
                new = np.asarray(state[key])
                if new.shape != arr.shape:
                    raise ValueError(f"{key}: shape {new.shape} != {arr.shape}")
                self.set_param(key, new)

    def learnable(self) -> dict[str, np.ndarray]:
        """Trainable tensors keyed by the same names the tape leaves use."""
        return {k: v for k, v in self.state().items() if not k.endswith(".var")}

    def set_param(self, key: str, arr: np.ndarray):
        site_name, rest = _split_key(key, self.sites)
        site = self.sites[site_name]
        if rest in ("weight", "fused"):
            site.weight = np.asarray(arr, dtype=site.weight.dtype).copy()
        elif rest == "bias":
            site.bias = np.asarray(arr, dtype=site.bias.dtype).copy()
        else:
            _, bname, attr = rest.split(".")
            br = site.bank.branch(int(bname[1:]))
            if attr == "weight":
                br.weight = np.asarray(arr, dtype=br.weight.dtype).copy()
            elif attr == "p":
                br.p = float(np.asarray(arr).reshape(-1)[0])
            elif attr == "var":
                br.var = float(np.asarray(arr).reshape(-1)[0])
            else:
                raise KeyError(key)

    def site_dims(self, h: int, w: int) -> dict[str, tuple[tuple[int, int, int], tuple[int, int, int]]]:
        """Static shape propagation: site -> ((c, h, w) in, (c, h, w) out)."""
        return propagate_dims(self, h, w)


def _split_key(key: str, sites) -> tuple[str, str]:
    for suffix in (".weight", ".fused", ".bias"):
        if key.endswith(suffix) and key[: -len(suffix)] in sites:
            return key[: -len(suffix)], suffix[1:]
    if ".etm." in key:
        site, rest = key.split(".etm.", 1)
        if site in sites:
            return site, "etm." + rest
    raise KeyError(f"no site owns weight entry {key!r}")


def _collect_sites(m: SmallDepthModel) -> list[Site]:
    out = [m.stem]
    for down, blocks in zip(m.downs, m.stages):
        out += [down.context, down.channel]
        for b in blocks:
            out += [b.expand, b.sc, b.spc, b.contract]
    for up in reversed(m.ups):
        out += [up.ct, up.sc1, up.chs, up.sc2]
    for hd in m.heads:
        out += [hd.d1, hd.d2]
    return out


# module-level operations


def sparse_downsample(x, block: SparseDownsample, pb_sd: float, rng: Rng | None, mode: str):
    return block(x, Ctx(mode=mode, rng=rng), pb_sd)


def dsr_forward(x, block: DSRBlock, pb_dsr: float, rng: Rng | None, mode: str):
    if ag.value(x).shape[1] != block.contract.spec.c_out:
        raise ValueError("residual block needs matching input and output channels")
    return block(x, Ctx(mode=mode, rng=rng), pb_dsr)


def sparse_upsample(x, block: SparseUpsample, out_hw=None):
    return block(x, Ctx(), out_hw)


def encoder_forward(img, model: SmallDepthModel, ctx: Ctx) -> list:
    iv = ag.value(img)
    if iv.ndim != 4 or iv.shape[1] != 3:
        raise ValueError(f"expected (n, 3, h, w) image, got {iv.shape}")
    if min(iv.shape[2:]) < MIN_INPUT:
        raise ValueError(f"input {iv.shape[2:]} smaller than {MIN_INPUT} pixels")
    cfg = model.config
    pb_sd = cfg.pb_sd if ctx.pb_sd is None else ctx.pb_sd
    pb_dsr = cfg.pb_dsr if ctx.pb_dsr is None else ctx.pb_dsr
    x = ag.mul(ag.sub(img, IMG_MEAN), 1.0 / IMG_STD)
    feats = [ag.relu(model.stem(x, ctx))]
    for down, blocks in zip(model.downs, model.stages):
        y = down(feats[-1], ctx, pb_sd)
        for b in blocks:
            y = b(y, ctx, pb_dsr)
        feats.append(y)
    return feats


def decoder_forward(feats, model: SmallDepthModel, ctx: Ctx) -> list:
    """Skip-only decoder; returns decoded maps for levels 0..3."""
    dec = [None] * 4
    top = feats[4]
    for k in (3, 2, 1, 0):
        skip = feats[k]
        hw = ag.value(skip).shape[2:]
        up = model.ups[k](top, ctx, hw)
        if ag.value(up).shape != ag.value(skip).shape:
            raise ValueError(f"level {k}: upsampled {ag.value(up).shape} vs skip {ag.value(skip).shape}")
        dec[k] = ag.add(skip, up)
        top = dec[k]
    return dec


def disparity_heads(decoded, model: SmallDepthModel, ctx: Ctx) -> list:
    return [model.heads[k](decoded[k], ctx) for k in range(4)]


def disp_to_depth(disp):
    return 1.0 / (10.0 * np.asarray(disp) + 0.01)


# construction


def _conv_site(name, spec, subgraph, rng, dtype, scale=1.0, bias=False) -> Site:
    fan_in = spec.c_in // spec.groups * spec.k_h * spec.k_w
    w = rng.normal(spec.weight_shape, scale * math.sqrt(2.0 / fan_in), dtype)
    b = np.zeros(spec.c_out, dtype=dtype) if bias else None
    return Site(name, spec, subgraph, weight=w, bias=b)


def _site_specs(cfg: SmallDepthConfig) -> list[tuple[str, ConvSpec, str, float, bool]]:
    """(name, spec, subgraph, init scale, bias) for every filter site in forward order."""
    c = cfg.widths
    r = cfg.expansion
    rows = [("enc.stem", ConvSpec(3, c[0], 3, 3, 1, (2, 2), (1, 1), (1, 1)), "encoder", 1.0, False)]
    for k in range(1, 5):
        ci, co = c[k - 1], c[k]
        g = math.gcd(ci, co)
        rows.append((f"enc.s{k}.sd.context", ConvSpec(ci, co, 3, 3, g, (2, 2), (1, 1), (1, 1)), "encoder", 0.7, False))
        rows.append((f"enc.s{k}.sd.channel", ConvSpec(ci, co, 1, 1, 1, (2, 2)), "encoder", 0.7, False))
        for j in range(cfg.blocks[k - 1]):
            pre = f"enc.s{k}.dsr{j}"
            rows.append((f"{pre}.expand", ConvSpec.same(co, r * co, 1), "encoder", 1.0, False))
            rows.append((f"{pre}.sc", ConvSpec.same(r * co, r * co, 3, groups=r * co), "encoder", 0.5, False))
            rows.append((f"{pre}.spc", ConvSpec.same(r * co, r * co, 3, groups=r * co, dilation=2), "encoder", 0.5, False))
            rows.append((f"{pre}.contract", ConvSpec.same(r * co, co, 1), "encoder", 0.3, False))
    for k in (3, 2, 1, 0):
        ci, co = c[k + 1], c[k]
        g = co // cfg.dec_group_size
        rows.append((f"dec.up{k}.ct", ConvSpec.same(ci, co, 1), "decoder", 0.7, False))
        rows.append((f"dec.up{k}.sc1", ConvSpec.same(co, co, 3, groups=g), "decoder", 0.7, False))
        rows.append((f"dec.up{k}.chs", ConvSpec.same(co, co, 1), "decoder", 0.7, False))
        rows.append((f"dec.up{k}.sc2", ConvSpec.same(co, co, 3, groups=g), "decoder", 0.7, False))
    kh = cfg.head_kernel
    for k in range(4):
        for i in (1, 2):
            rows.append((f"head{k}.d{i}", ConvSpec.same(c[k], 1, kh, dilation=i, has_bias=True), "heads", 0.1, True))
    return rows


def build_smalldepth(config: SmallDepthConfig | None = None, etm_on: bool | None = None,
                     mode: str = INFER, seed: int = 0, dtype=np.float32) -> SmallDepthModel:
    cfg = config or SmallDepthConfig.load()
    if etm_on is not None:
        cfg = replace(cfg, etm=etm_on)
    rows = _site_specs(cfg)
    sites = {}
    # one stream per site, split again so ETM extras never shift the plain init
    for (name, spec, sub, scale, bias), site_rng in zip(rows, Rng(seed).split(len(rows))):
        init_rng, rng = site_rng.split(2)
        site = _conv_site(name, spec, sub, init_rng, dtype, scale, bias)
        if cfg.etm and etm.etm_eligible(spec):
            bank = etm.enumerate_branches(spec.k_h, spec.k_w, spec, rng, base_weight=site.weight,
                                          dtype=dtype, pb_t=cfg.pb_t, r1=cfg.r1, r2=cfg.r2)
            # sub-branches start from fresh weights with zero scale; the bank fuses to the plain init
            for br in bank.branches:
                if br.kind in (etm.SUB, etm.DROPCONV):
                    fan_in = spec.c_in // spec.groups * br.k_h * br.k_w
                    br.weight = rng.normal(br.weight.shape, math.sqrt(2.0 / fan_in), dtype)
            site = replace(site, weight=None, bank=bank)
        sites[name] = site
    return _assemble(cfg, sites, mode)


def _assemble(cfg: SmallDepthConfig, sites: dict[str, Site], mode: str) -> SmallDepthModel:
    downs, stages, ups, heads = [], [], [None] * 4, []
    for k in range(1, 5):
        downs.append(SparseDownsample(sites[f"enc.s{k}.sd.context"], sites[f"enc.s{k}.sd.channel"]))
        blocks = []
        for j in range(cfg.blocks[k - 1]):
            pre = f"enc.s{k}.dsr{j}"
            blocks.append(DSRBlock(*(sites[f"{pre}.{s}"] for s in ("expand", "sc", "spc", "contract"))))
        stages.append(blocks)
    for k in range(4):
        ups[k] = SparseUpsample(*(sites[f"dec.up{k}.{s}"] for s in ("ct", "sc1", "chs", "sc2")))
        heads.append(DispHead(sites[f"head{k}.d1"], sites[f"head{k}.d2"]))
    m = SmallDepthModel(cfg, sites["enc.stem"], downs, stages, ups, heads, mode)
    m.sites = dict(sites)
    return m


def propagate_dims(model: SmallDepthModel, h: int, w: int):
    """Input/output (c, h, w) of every site, without running the network."""
    dims = {}

    def visit(site: Site, c, hh, ww):
        oh, ow = site.spec.out_hw(hh, ww)
        dims[site.name] = ((c, hh, ww), (site.spec.c_out, oh, ow))
        return site.spec.c_out, oh, ow

    if min(h, w) < MIN_INPUT:
        raise ValueError(f"input {(h, w)} smaller than {MIN_INPUT} pixels")
    level = [visit(model.stem, 3, h, w)]
    for down, blocks in zip(model.downs, model.stages):
        c, hh, ww = level[-1]
        out = visit(down.context, c, hh, ww)
        visit(down.channel, c, hh, ww)
        for b in blocks:
            c2, h2, w2 = visit(b.expand, *out)
            visit(b.sc, c2, h2, w2)
            visit(b.spc, c2, h2, w2)
            visit(b.contract, c2, h2, w2)
        level.append(out)
    top = level[4]
    for k in (3, 2, 1, 0):
        up = model.ups[k]
        mid = visit(up.sc1, *visit(up.ct, *top))
        _, sh, sw = level[k]
        visit(up.sc2, *visit(up.chs, mid[0], sh, sw))
        top = level[k]
    for k, hd in enumerate(model.heads):
        visit(hd.d1, *level[k])
        visit(hd.d2, *level[k])
    return dims
