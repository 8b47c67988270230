"""Layerwise density plans.

Each plan assigns a density ``p_l`` to every maskable layer of an
architecture.  The network-level density is the parameter-weighted mean
``sum_l p_l m_l / sum_l m_l``; it is recomputed for every plan and stored as
``achieved_global_p`` so that clamping shortfalls stay visible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DomainError, InfeasibleError, StructuralError
from .netcore import Architecture, Conv2D

METHODS = ("uniform", "erk", "pyramidal", "balanced", "external")


@dataclass(frozen=True)
class SparsityPlan:
    p_per_layer: tuple[float, ...]
    global_p: float
    method: str
    achieved_global_p: float

    def __post_init__(self):
        object.__setattr__(self, "p_per_layer", tuple(float(p) for p in self.p_per_layer))
        if self.method not in METHODS:
            raise DomainError(f"unknown plan method {self.method!r}")
        if any(not 0.0 < p <= 1.0 for p in self.p_per_layer):
            raise DomainError(f"layer densities must lie in (0, 1]: {self.p_per_layer}")

    @property
    def ref(self) -> str:
        ps = ",".join(f"{p:.6g}" for p in self.p_per_layer)
        return f"{self.method}:{self.global_p:.6g}:[{ps}]"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "global_p": self.global_p,
            "p_per_layer": list(self.p_per_layer),
            "achieved_global_p": self.achieved_global_p,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SparsityPlan:
        return cls(tuple(d["p_per_layer"]), float(d["global_p"]), d["method"], float(d["achieved_global_p"]))


def weighted_density(p_per_layer: Sequence[float], m: Sequence[int]) -> float:
    m = np.asarray(m, dtype=np.float64)
    return float(np.dot(np.asarray(p_per_layer, dtype=np.float64), m) / m.sum())


def _check_p(p: float) -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"global density must lie in (0, 1), got {p}")
    return p


def _make(arch: Architecture, ps, p, method) -> SparsityPlan:
    return SparsityPlan(tuple(ps), p, method, weighted_density(ps, arch.weight_counts()))


def plan_uniform(arch: Architecture, p: float) -> SparsityPlan:
    p = _check_p(p)
    return _make(arch, [p] * arch.depth, p, "uniform")


def erk_scores(arch: Architecture) -> list[float]:
    """Unnormalized ERK ratios: fan sums over fan products."""
    scores = []
    for layer in arch.layers:
        if isinstance(layer, Conv2D):
            c_out, c_in, k = layer.out_channels, layer.in_channels, layer.kernel_size
            scores.append((c_out + c_in + k) / (c_out * c_in * k))
        else:
            n_in, n_out = layer.in_width, layer.out_width
            scores.append((n_in + n_out) / (n_in * n_out))
    return scores


def plan_erk(arch: Architecture, p: float) -> SparsityPlan:
    """Densities proportional to the ERK score, clamped at 1.

    Layers whose scaled score reaches 1 are fixed at density 1 and the scale
    is re-solved over the remaining layers until no new layer clamps.
    """
    p = _check_p(p)
    m = np.asarray(arch.weight_counts(), dtype=np.float64)
    r = np.asarray(erk_scores(arch))
    dense = np.zeros(arch.depth, dtype=bool)
    budget = p * m.sum()
    while True:
        free = ~dense
        remaining = budget - m[dense].sum()
        if not free.any() or remaining <= 0:
            raise InfeasibleError(f"ERK cannot reach global density {p} on this architecture")
        eps = remaining / np.dot(r[free], m[free])
        newly = free & (eps * r >= 1.0)
        if not newly.any():
            break
        dense |= newly
    ps = np.where(dense, 1.0, eps * r)
    return _make(arch, ps, p, "erk")


def pyramidal_root(m: Sequence[int], p: float, tol: float = 1e-12) -> float:
    """Unique x in (0, 1) with ``sum_l m_l x^l / sum_l m_l = p`` (l = 1..L), by bisection."""
    m = np.asarray(m, dtype=np.float64)
    powers = np.arange(1, len(m) + 1)
    total = m.sum()

    def residual(x):
        return float(np.dot(m, x**powers) / total - p)

    lo, hi = 0.0, 1.0
    if not residual(lo) < 0.0 < residual(hi):
        raise InfeasibleError(f"no pyramidal root in (0, 1) for p={p}")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if residual(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-17:
            break
    x = lo if abs(residual(lo)) <= abs(residual(hi)) else hi
    if abs(residual(x)) > tol:
        raise InfeasibleError(f"pyramidal bisection stalled at residual {residual(x):.3g}")
    return x


def plan_pyramidal(arch: Architecture, p: float) -> SparsityPlan:
    """``p_l = p_1 ** l`` with ``p_1`` chosen to hit the global density."""
    p = _check_p(p)
    p1 = pyramidal_root(arch.weight_counts(), p)
    ps = [p1 ** (l + 1) for l in range(arch.depth)]
    return _make(arch, ps, p, "pyramidal")


def plan_balanced(arch: Architecture, p: float) -> SparsityPlan:
    """Same nonzero budget ``p/L * sum_l m_l`` for every layer, clamped at 1.

    Clamped layers are not compensated elsewhere, so ``achieved_global_p``
    may fall below ``p``.
    """
    p = _check_p(p)
    m = np.asarray(arch.weight_counts(), dtype=np.float64)
    budget = p / arch.depth * m.sum()
    ps = np.minimum(1.0, budget / m)
    return _make(arch, ps, p, "balanced")


def read_ratios(path) -> list[float]:
    ratios = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            ratios.append(float(line))
        except ValueError:
            raise StructuralError(f"{path}:{lineno}: not a number: {line!r}") from None
    return ratios


def plan_external(arch: Architecture, ratios_file) -> SparsityPlan:
    """Densities read from a text file, one per maskable layer."""
    ratios = read_ratios(ratios_file)
    if len(ratios) != arch.depth:
        raise StructuralError(f"{ratios_file} lists {len(ratios)} densities for {arch.depth} layers")
    for r in ratios:
        if not (0.0 < r <= 1.0) or math.isnan(r):
            raise DomainError(f"density {r} outside (0, 1]")
    achieved = weighted_density(ratios, arch.weight_counts())
    return SparsityPlan(tuple(ratios), achieved, "external", achieved)


def make_plan(arch: Architecture, method: str, p: float | None = None, ratios_file=None) -> SparsityPlan:
    if method == "external":
        if ratios_file is None:
            raise DomainError("external plans need a ratios file")
        return plan_external(arch, ratios_file)
    builders = {"uniform": plan_uniform, "erk": plan_erk, "pyramidal": plan_pyramidal, "balanced": plan_balanced}
    if method not in builders:
        raise DomainError(f"unknown plan method {method!r}")
    if p is None:
        raise DomainError(f"plan {method!r} needs a global density")
    if method == "uniform" and p == 1.0:
        # dense masks are a legitimate request from the CLI
        return SparsityPlan((1.0,) * arch.depth, 1.0, "uniform", 1.0)
    return builders[method](arch, p)
