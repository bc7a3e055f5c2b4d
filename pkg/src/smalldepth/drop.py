"""Batch-level drop, its cosine ramp schedule, and element-level weight drop."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TRAIN = "train"
INFER = "infer"

# defaults from the drop-rate ablation (best scheduled rows)
PB_DSR = 0.9
PB_SD = 0.5
RAMP_FRACTION = 0.3


class Rng:
    """Counter-based (Philox) generator that splits into independent streams."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        self._seq = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        self._gen = np.random.Generator(np.random.Philox(self._seq))

    @property
    def seed(self):
        return self._seq.entropy

    def split(self, n: int = 1) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def bernoulli(self, keep: float, shape) -> np.ndarray:
        """0/1 draws with P(1) = keep."""
        return (self._gen.random(shape) < keep).astype(np.float64)

    def normal(self, shape, scale=1.0, dtype=np.float32) -> np.ndarray:
        return (self._gen.standard_normal(shape) * scale).astype(dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, shape).astype(dtype)


@dataclass(frozen=True)
class DropSchedule:
    total_iters: int
    ramp_fraction: float = RAMP_FRACTION
    pb_max: float = PB_DSR

    def __post_init__(self):
        if self.total_iters < 1:
            raise ValueError("total_iters must be positive")
        if not 0.0 < self.ramp_fraction < 1.0:
            raise ValueError("ramp_fraction must lie in (0, 1)")
        if not 0.0 <= self.pb_max < 1.0:
            raise ValueError("pb_max must lie in [0, 1)")

    @property
    def peak(self) -> int:
        return math.floor(self.total_iters * self.ramp_fraction)

    def __call__(self, i: int) -> float:
        return schedule_pb(i, self)


def schedule_pb(i: int, sched: DropSchedule) -> float:
    """Cosine ramp 0 -> pb_max over [0, peak), cosine decay back towards 0 after."""
    n = sched.total_iters
    if not 0 <= i < n:
        raise ValueError(f"iteration {i} outside [0, {n})")
    peak = sched.peak
    if i < peak:
        phase = math.pi * i / peak
    else:
        phase = math.pi * (n - i) / (n - peak)
    return (1.0 - math.cos(phase)) * sched.pb_max / 2.0


def _check_pb(pb: float):
    if not 0.0 <= pb < 1.0:
        raise ValueError(f"drop probability must lie in [0, 1), got {pb}")


def drop_batch(x: np.ndarray, pb: float, rng: Rng, mode: str = TRAIN) -> np.ndarray:
    """Zero whole samples with probability pb, rescale survivors by 1/(1-pb)."""
    _check_pb(pb)
    if mode == INFER or pb == 0.0:
        return x
    return x * batch_factors(x.shape[0], pb, rng).astype(x.dtype)[:, None, None, None]


def batch_factors(n: int, pb: float, rng: Rng) -> np.ndarray:
    """Per-sample multipliers B(1-pb)/(1-pb); pb=1 means certain drop."""
    if pb >= 1.0:
        return np.zeros(n)
    return rng.bernoulli(1.0 - pb, (n,)) / (1.0 - pb)


def weight_mask(shape, pb_w: float, rng: Rng) -> np.ndarray:
    """Element mask of shape (c_out, 1, k_h, k_w), shared across input channels."""
    c_out, _, kh, kw = shape
    return rng.bernoulli(1.0 - pb_w, (c_out, kh, kw))[:, None, :, :]


def drop_conv_weights(w: np.ndarray, pb_w: float, rng: Rng, mode: str = TRAIN) -> np.ndarray:
    _check_pb(pb_w)
    if mode == INFER or pb_w == 0.0:
        return w
    return w * weight_mask(w.shape, pb_w, rng).astype(w.dtype)
