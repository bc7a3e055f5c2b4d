"""Closed-form parameter / FLOPs / memory-access accounting for conv sites."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .tensor import ConvSpec

BYTES_PER_ELEMENT = 4


def _check(spec: ConvSpec):
    if spec.c_in % spec.groups or spec.c_out % spec.groups:
        raise ValueError(f"groups={spec.groups} does not divide channels of {spec}")


def layer_param(spec: ConvSpec) -> int:
    """Weight count C_i*C_o*K_h*K_w/g; bias excluded."""
    _check(spec)
    return spec.c_in * spec.c_out * spec.k_h * spec.k_w // spec.groups


def layer_flops(spec: ConvSpec, out_h: int, out_w: int) -> int:
    """One multiply-accumulate counts as one operation."""
    return out_h * out_w * layer_param(spec)


def layer_mac(spec: ConvSpec, in_hw: tuple[int, int], out_hw: tuple[int, int]) -> int:
    """Bytes moved for input activations, weights and output activations."""
    hi, wi = in_hw
    ho, wo = out_hw
    elems = hi * wi * spec.c_in + layer_param(spec) + ho * wo * spec.c_out
    return elems * BYTES_PER_ELEMENT


def mac_lower_bound(param: int, g: int, k_h: int, k_w: int, h: int, w: int) -> int:
    """4*(2*H*W*sqrt(Param*g/(K_h*K_w)) + Param), with the square root floored.

    Param*g/(K_h*K_w) is C_i*C_o, so the floor is exact whenever C_i == C_o.
    """
    root = math.isqrt(param * g // (k_h * k_w))
    return BYTES_PER_ELEMENT * (2 * h * w * root + param)


@dataclass
class SiteRow:
    name: str
    subgraph: str
    c_in: int
    c_out: int
    k_h: int
    k_w: int
    groups: int
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    param: int
    bias: int
    flops: int
    mac: int
    mac_bound: int

    @property
    def spec_key(self):
        return (self.c_in, self.c_out, self.k_h, self.k_w, self.groups)


def site_row(name: str, subgraph: str, spec: ConvSpec, in_hw, out_hw) -> SiteRow:
    p = layer_param(spec)
    # stride-2 sites read more pixels than they write; bound over the smaller map stays valid
    bh, bw = min((in_hw, out_hw), key=lambda s: s[0] * s[1])
    return SiteRow(
        name, subgraph, spec.c_in, spec.c_out, spec.k_h, spec.k_w, spec.groups,
        in_hw[0], in_hw[1], out_hw[0], out_hw[1],
        p, spec.c_out if spec.has_bias else 0,
        layer_flops(spec, *out_hw), layer_mac(spec, in_hw, out_hw),
        mac_lower_bound(p, spec.groups, spec.k_h, spec.k_w, bh, bw),
    )


@dataclass
class ComplexityReport:
    rows: list[SiteRow] = field(default_factory=list)
    input_hw: tuple[int, int] = (0, 0)

    def totals(self, subgraphs=None) -> dict[str, int]:
        keys = ("param", "bias", "flops", "mac")
        sel = [r for r in self.rows if subgraphs is None or r.subgraph in subgraphs]
        return {k: sum(getattr(r, k) for r in sel) for k in keys}

    def by_subgraph(self) -> dict[str, dict[str, int]]:
        names = sorted({r.subgraph for r in self.rows})
        return {s: self.totals({s}) for s in names}

    def encoder_decoder(self) -> tuple[dict[str, int], dict[str, int]]:
        """Two-way split used for comparison with published figures: heads count as decoder."""
        return self.totals({"encoder"}), self.totals({"decoder", "heads"})

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(asdict(self.rows[0]).keys()) if self.rows else []
        w = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow(asdict(r))
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"{'site':<28}{'sub':<9}{'Param':>10}{'FLOPs':>14}{'MAC(B)':>13}"]
        for r in self.rows:
            lines.append(f"{r.name:<28}{r.subgraph:<9}{r.param:>10}{r.flops:>14}{r.mac:>13}")
        lines.append("-" * 74)
        for sub, t in self.by_subgraph().items():
            lines.append(f"{'total ' + sub:<37}{t['param']:>10}{t['flops']:>14}{t['mac']:>13}")
        enc, dec = self.encoder_decoder()
        t = self.totals()
        lines.append(
            f"Param {t['param'] / 1e6:.3f} M (enc/dec {enc['param'] / 1e6:.2f}/{dec['param'] / 1e6:.2f}), "
            f"GFLOPs {t['flops'] / 1e9:.3f} (enc/dec {enc['flops'] / 1e9:.2f}/{dec['flops'] / 1e9:.2f}), "
            f"MAC enc/dec {enc['mac'] / 1e6:.2f}/{dec['mac'] / 1e6:.2f} MB at {self.input_hw[0]}x{self.input_hw[1]}"
        )
        return "\n".join(lines)


def profile_model(model, input_hw: tuple[int, int]) -> ComplexityReport:
    """Rows for every filter site; ETM banks are expanded into one row per weighted branch."""
    dims = model.site_dims(*input_hw)
    rep = ComplexityReport(input_hw=tuple(input_hw))
    for name, site in model.sites.items():
        if name not in dims:
            raise ValueError(f"site {name} has unresolved dims")
        (_, ih, iw), (_, oh, ow) = dims[name]
        if site.bank is None:
            rep.rows.append(site_row(name, site.subgraph, site.spec, (ih, iw), (oh, ow)))
            continue
        for br in site.bank.branches:
            if not br.learned:
                continue
            spec = site.bank.branch_spec(br)
            if br.kind != "standard":
                spec = replace(spec, has_bias=False)
            rep.rows.append(site_row(f"{name}[b{br.shape_id}]", site.subgraph, spec, (ih, iw), (oh, ow)))
    return rep


def count_weight_elements(model, subgraphs=None) -> int:
    """Brute-force count of stored conv weight elements (bias and ETM scalars excluded)."""
    total = 0
    for s in model.sites.values():
        if subgraphs is not None and s.subgraph not in subgraphs:
            continue
        if s.bank is None:
            total += int(np.asarray(s.weight).size)
        else:
            total += sum(int(b.weight.size) for b in s.bank.branches if b.learned)
    return total
