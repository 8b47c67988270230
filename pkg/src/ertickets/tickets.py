"""Weak and strong lottery tickets inside sampled ER source networks.

A target of depth ``L`` is embedded into a source of depth ``L + 1``.  Source
layer 0 is pruned to univariate units, each copying one input coordinate;
every later source layer holds blocks of copies of the target units.  A copy
is *valid* when each of its nonzero target in-weights can be realized from
valid copies in the previous layer: one unmasked edge per weight for weak
tickets (the edge is assigned the target value), an ``eps_l``-accurate subset
sum of drawn weights for strong tickets.  Construction succeeds when every
output unit is valid; unused copies are pruned afterwards so that the ticket
keeps only the edges it needs.
"""

from __future__ import annotations

import functools
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.stats import binom

from .errors import DomainError, StructuralError
from .netcore import (
    FC,
    Architecture,
    Conv2D,
    Mask,
    MaskedNetwork,
    forward,
    layer_outputs,
    sample_domain,
)
from .plans import SparsityPlan
from .subsetsum import SubsetSumInstance, binomial_ci, probe_lemma1, solve

WLT_TOLERANCE = 1e-9


@dataclass(frozen=True)
class WidthPlan:
    """Overparametrization factors ``q_0..q_L`` and the source they imply."""

    q: tuple[int, ...]
    delta: float
    source_arch: Architecture
    p_per_layer: tuple[float, ...]

    def __post_init__(self):
        if self.q[-1] != 1:
            raise DomainError("the output layer is never copied (q_L must be 1)")
        if min(self.q) < 1:
            raise DomainError(f"width factors must be >= 1, got {self.q}")


@dataclass(frozen=True)
class BlockMap:
    """Blocks of copies per source layer: ``blocks[l][t]`` lists the output
    units of source weight layer ``l`` standing in for target unit ``t``
    (input coordinate ``t`` for layer 0).  :meth:`check` takes those unit
    counts, i.e. the source widths without the input width."""

    blocks: tuple[tuple[tuple[int, ...], ...], ...]

    def check(self, widths: Sequence[int]):
        for l, layer_blocks in enumerate(self.blocks):
            seen = [u for members in layer_blocks for u in members]
            if len(seen) != len(set(seen)):
                raise StructuralError(f"blocks of source layer {l} overlap")
            if any(u < 0 or u >= widths[l] for u in seen):
                raise StructuralError(f"block member out of range in source layer {l}")
            if any(not members for members in layer_blocks):
                raise StructuralError(f"a target unit has no copy in source layer {l}")


@dataclass(frozen=True)
class EpsSchedule:
    eps_per_layer: tuple[float, ...]
    B: tuple[float, ...]
    eps: float


@dataclass
class TrialReport:
    kind: str
    success: bool
    q: tuple[int, ...]
    max_error: float | None
    nnz: int | None
    seed: int
    wall_time: float = 0.0
    contained: bool | None = None
    source_widths: tuple[int, ...] = ()
    rho: int | None = None
    failure: dict | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "kind": self.kind,
            "success": self.success,
            "q": list(self.q),
            "max_error": self.max_error,
            "nnz": self.nnz,
            "seed": self.seed,
            "contained": self.contained,
            "source_widths": list(self.source_widths),
            "rho": self.rho,
            "failure": self.failure,
        }
        if include_timing:
            d["wall_time"] = self.wall_time
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrialReport:
        return cls(
            d["kind"], d["success"], tuple(d["q"]), d["max_error"], d["nnz"], d["seed"],
            d.get("wall_time", 0.0), d.get("contained"), tuple(d.get("source_widths", ())),
            d.get("rho"), d.get("failure"),
        )


@dataclass
class Construction:
    """Everything a constructor produced; ``ticket`` is ``None`` on failure."""

    ticket: MaskedNetwork | None
    report: TrialReport
    source_mask: Mask
    blocks: BlockMap | None = None
    source: MaskedNetwork | None = None
    output_scale: float = 1.0


# --- widths ----------------------------------------------------------------


def _view3(a: np.ndarray) -> np.ndarray:
    return a.reshape(a.shape[0], a.shape[1], -1)


def target_nnz(target: MaskedNetwork) -> list[int]:
    return [int(np.count_nonzero(w)) for w in target.effective_weights()]


def width_factor(p_next: float, L: int, m_next: int, q_next: int, delta: float) -> int:
    """Smallest integer ``q`` above ``log(L m q_next / delta) / log(1/(1-p))``."""
    if p_next >= 1.0 or m_next == 0:
        return 1
    bound = math.log(L * m_next * q_next / delta) / math.log(1.0 / (1.0 - p_next))
    # guard against ceil(8.000000000001) when the bound is an exact integer
    return max(1, math.ceil(bound - 1e-9))


def source_arch_for(target_arch: Architecture, q: Sequence[int]) -> Architecture:
    """Source widths ``n_S0 = q_0 d`` and ``n_Sl = q_l n_Tl``.

    For convolutional targets layer 0 is a 1x1 convolution (a univariate
    channel copy) and layer ``l >= 1`` keeps target layer ``l``'s kernel.
    """
    layers = target_arch.layers
    widths = [q[0] * target_arch.input_dim] + [q[l + 1] * layer.out_units for l, layer in enumerate(layers)]
    d = target_arch.input_dim
    if target_arch.is_conv:
        if not all(isinstance(layer, Conv2D) for layer in layers):
            raise StructuralError("mixed conv/fc targets are not supported by the constructions")
        src = [Conv2D(d, widths[0], 1, 1)]
        src += [Conv2D(widths[l], widths[l + 1], layer.kernel_h, layer.kernel_w) for l, layer in enumerate(layers)]
        return Architecture(tuple(src), target_arch.input_domain, target_arch.spatial)
    src = [FC(d, widths[0])] + [FC(widths[l], widths[l + 1]) for l in range(len(layers))]
    return Architecture(tuple(src), target_arch.input_domain)


def compute_q(target: MaskedNetwork, plan: SparsityPlan, delta: float) -> WidthPlan:
    """Backward recursion ``q_l = ceil(log(L m_{l+1} q_{l+1} / delta) / log(1/(1-p_{l+1})))``.

    ``plan`` holds one density per target layer; density ``p_{l+1}`` is used
    for source layer ``l + 1``.  For ``L = 2`` the factor ``L`` equals the
    constant 2 of the one-hidden-layer bound.
    """
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta={delta} outside (0, 1)")
    L = target.arch.depth
    if len(plan.p_per_layer) != L:
        raise StructuralError(f"plan has {len(plan.p_per_layer)} densities for a depth-{L} target")
    m = target_nnz(target)
    q = [1] * (L + 1)
    for l in range(L - 1, -1, -1):
        q[l] = width_factor(plan.p_per_layer[l], L, m[l], q[l + 1], delta)
    return WidthPlan(tuple(q), delta, source_arch_for(target.arch, q), plan.p_per_layer)


def theorem_success_probability(q: Sequence[int], p: Sequence[float], m: Sequence[int]) -> float:
    """``prod_l (1 - (1-p_l)^{q_{l-1}})^{m_l q_l}``: every copy finds every block."""
    prob = 1.0
    for l in range(1, len(q)):
        prob *= (1.0 - (1.0 - p[l - 1]) ** q[l - 1]) ** (m[l - 1] * q[l])
    return prob


# --- shared construction pieces ---------------------------------------------


def _streams(seed, n: int = 4) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def _sample_source_mask(source_arch: Architecture, p0: float, ps: Sequence[float], rng) -> list[np.ndarray]:
    densities = [p0, *ps]
    return [rng.random(layer.weight_shape) < p for layer, p in zip(source_arch.layers, densities)]


def _repair_in_degree(s0: np.ndarray, rng, units: int | None = None):
    """Add one uniformly chosen in-edge to layer-0 units that have none."""
    view = _view3(s0)
    units = view.shape[0] if units is None else units
    for u in range(units):
        if not view[u].any():
            j = rng.integers(view.shape[1])
            view[u, j, 0] = True


def _assign_univariate(s0: np.ndarray, q0: int, d: int, rng, units: int | None = None) -> np.ndarray:
    """Input coordinate copied by each layer-0 unit (``-1`` if disconnected).

    Unit ``u`` nominally copies input ``u // q0``; if that edge is masked it
    copies a uniformly chosen input among its remaining in-edges.
    """
    view = _view3(s0)[:, :, 0]
    units = view.shape[0] if units is None else units
    owner = np.full(view.shape[0], -1, dtype=np.int64)
    for u in range(units):
        nominal = min(u // q0, d - 1)
        if view[u, nominal]:
            owner[u] = nominal
            continue
        cands = np.flatnonzero(view[u])
        if cands.size:
            owner[u] = cands[rng.integers(cands.size)]
    return owner


def _first_layer_shift(arch: Architecture) -> float:
    a1 = arch.input_domain[0]
    return -a1 if a1 <= 0 else 0.0


def _verify(target: MaskedNetwork, ticket: MaskedNetwork, rng, samples: int, scale: float = 1.0) -> float:
    x = sample_domain(target.arch, samples, rng)
    gap = forward(target, x) - scale * forward(ticket, x)
    return float(np.abs(gap).max())


# --- weak tickets ------------------------------------------------------------


def _wlt(
    target: MaskedNetwork,
    plan: SparsityPlan,
    delta: float,
    seed: int,
    kind: str,
    widths: WidthPlan | None,
    input_density: float | None,
    flow_repair: bool,
    require_all_copies: bool,
    bias_compensation: bool,
    domain_samples: int,
) -> Construction:
    start = time.perf_counter()
    arch = target.arch
    L = arch.depth
    if widths is None:
        widths = compute_q(target, plan, delta)
    q = widths.q
    src_arch = widths.source_arch
    p0 = plan.p_per_layer[0] if input_density is None else input_density
    rng_mask, rng_choice, rng_verify = _streams(seed, 3)

    S = _sample_source_mask(src_arch, p0, plan.p_per_layer, rng_mask)
    if flow_repair:
        _repair_in_degree(S[0], rng_mask)
    source_mask = Mask(tuple(S), seed=seed, plan_ref=plan.ref)
    S3 = [_view3(s) for s in S]
    Wt = [_view3(w) for w in target.effective_weights()]
    d = arch.input_dim

    owner = _assign_univariate(S[0], q[0], d, rng_choice)
    members = [[np.flatnonzero(owner == j) for j in range(d)]]
    options: list[dict] = [dict()]
    first_fail: dict[int, dict] = {}
    for l in range(1, L + 1):
        w_t, s_l, q_l = Wt[l - 1], S3[l], q[l]
        prev = members[l - 1]
        layer_valid, layer_opts = [], {}
        for i in range(w_t.shape[0]):
            needs = np.argwhere(w_t[i] != 0)
            valid_i = []
            for c in range(q_l):
                ip = i * q_l + c
                choices = []
                for j, e in needs:
                    pool = prev[j]
                    avail = pool[s_l[ip, pool, e]]
                    if avail.size == 0:
                        first_fail.setdefault(l, {"layer": l, "unit": int(i), "input": int(j), "copy": int(ip)})
                        break
                    choices.append((int(j), int(e), avail))
                else:
                    valid_i.append(ip)
                    layer_opts[ip] = choices
            layer_valid.append(np.asarray(valid_i, dtype=np.int64))
        if require_all_copies:
            # strict reading: every copy of every block is complete
            complete = all(v.size == q_l for v in layer_valid)
            layer_valid = [np.arange(i * q_l, (i + 1) * q_l) for i in range(w_t.shape[0])] if complete else layer_valid
        members.append(layer_valid)
        options.append(layer_opts)

    if require_all_copies:
        success = not first_fail
        failure = first_fail[min(first_fail)] if first_fail else None
    else:
        success = all(v.size > 0 for v in members[L])
        failure = None if success else first_fail.get(L)
    report = TrialReport(
        kind, success, tuple(q), None, None, seed, source_widths=tuple(src_arch.widths()), failure=failure
    )
    if not success:
        report.wall_time = time.perf_counter() - start
        return Construction(None, report, source_mask)

    weights = [np.zeros(layer.weight_shape) for layer in src_arch.layers]
    chosen = [np.zeros(layer.weight_shape, dtype=bool) for layer in src_arch.layers]
    biases = [np.zeros(layer.out_units) for layer in src_arch.layers]
    W3 = [_view3(w) for w in weights]
    C3 = [_view3(c) for c in chosen]
    shift = _first_layer_shift(arch)
    used = set(range(src_arch.layers[-1].out_units))
    for l in range(L, 0, -1):
        w_t = Wt[l - 1]
        b_t = target.biases[l - 1]
        below = set()
        for ip in sorted(used):
            i = ip // q[l]
            for j, e, avail in options[l][ip]:
                jp = int(avail[rng_choice.integers(avail.size)])
                W3[l][ip, jp, e] = w_t[i, j, e]
                C3[l][ip, jp, e] = True
                below.add(jp)
            biases[l][ip] = b_t[i]
            if l == 1 and bias_compensation:
                biases[l][ip] -= shift * w_t[i].sum()
        used = below
    for u in sorted(used):
        W3[0][u, owner[u], 0] = 1.0
        C3[0][u, owner[u], 0] = True
        biases[0][u] = shift
    ticket_mask = Mask(tuple(chosen), seed=seed, plan_ref=plan.ref)
    ticket = MaskedNetwork(src_arch, tuple(weights), tuple(biases), ticket_mask)

    report.max_error = _verify(target, ticket, rng_verify, domain_samples)
    report.nnz = ticket_mask.total_nnz
    report.contained = ticket_mask.is_subset_of(source_mask)
    if report.max_error > WLT_TOLERANCE or not report.contained:
        report.success = False
        report.failure = {"reason": "verification", "max_error": report.max_error}
    blocks = BlockMap(
        tuple(tuple(tuple(int(u) for u in m) for m in layer) for layer in members[:-1])
        + (tuple((i,) for i in range(src_arch.layers[-1].out_units)),)
    )
    report.wall_time = time.perf_counter() - start
    return Construction(ticket if report.success else None, report, source_mask, blocks)


def build_wlt(
    target: MaskedNetwork,
    plan: SparsityPlan,
    delta: float,
    seed: int,
    *,
    widths: WidthPlan | None = None,
    input_density: float | None = None,
    flow_repair: bool = True,
    require_all_copies: bool = False,
    bias_compensation: bool = True,
    domain_samples: int = 100,
) -> Construction:
    """Weak ticket for a fully-connected or all-convolutional target.

    ``input_density`` is the ER density of source layer 0 (default: the
    plan's first density).  ``require_all_copies`` demands that every copy
    is complete, the event whose probability the width bounds control;
    the default only needs the copies the ticket actually uses.
    ``bias_compensation=False`` drops the layer-1 bias correction and exists
    for ablation tests.
    """
    if target.arch.is_conv:
        if target.arch.input_domain[0] < 0:
            raise DomainError("convolutional weak tickets need a1 >= 0 (zero padding breaks the bias shift)")
        kind = "wlt-conv"
    else:
        kind = "wlt-fc"
    if widths is not None and min(widths.q) < 1:
        raise DomainError("width overrides must be >= 1")
    return _wlt(
        target, plan, delta, seed, kind, widths, input_density, flow_repair,
        require_all_copies, bias_compensation, domain_samples,
    )


def construct_wlt_fc(target: MaskedNetwork, plan: SparsityPlan, delta: float, seed: int, **kw):
    if target.arch.is_conv:
        raise StructuralError("construct_wlt_fc needs a fully-connected target")
    c = build_wlt(target, plan, delta, seed, **kw)
    return c.ticket, c.report


def construct_wlt_conv(target: MaskedNetwork, plan: SparsityPlan, delta: float, seed: int, **kw):
    if not target.arch.is_conv:
        raise StructuralError("construct_wlt_conv needs a convolutional target")
    c = build_wlt(target, plan, delta, seed, **kw)
    return c.ticket, c.report


# --- error schedule ----------------------------------------------------------


def _domain_points(arch: Architecture, samples: int, rng) -> np.ndarray:
    x = sample_domain(arch, samples, rng)
    d = arch.input_dim
    if not arch.is_conv and d <= 10:
        corners = np.array(np.meshgrid(*[arch.input_domain] * d, indexing="ij")).reshape(d, -1).T
        x = np.concatenate([x, corners])
    return x


def compute_eps_schedule(target: MaskedNetwork, eps: float, domain_samples: int = 100, seed: int = 0) -> EpsSchedule:
    """Per-layer accuracies ``eps_l`` for a depth-``L`` target.

    ``eps_l = eps / (n_L L) / [(1 + B_{l-1}) (1 + eps/L) prod_{k=l+1}^{L-1} (||W_k||_inf + eps/L)]``
    with ``B_l`` the largest ``||x^(l)||_1`` over the sampled domain points
    (uniform samples plus the domain corners for small inputs).  The sample
    maximum is a lower estimate of the supremum.
    """
    if not 0.0 < eps < 1.0:
        raise DomainError(f"eps={eps} outside (0, 1)")
    if domain_samples < 100:
        raise DomainError("need at least 100 domain samples")
    arch = target.arch
    L = arch.depth
    x = _domain_points(arch, domain_samples, np.random.default_rng(seed))
    acts = layer_outputs(target, x)
    B = tuple(float(np.abs(a.reshape(a.shape[0], -1)).sum(axis=1).max()) for a in acts[:L])
    norms = [float(np.abs(w.reshape(w.shape[0], -1)).sum(axis=1).max()) for w in target.effective_weights()]
    n_out = arch.layers[-1].out_units
    out = []
    for l in range(1, L + 1):
        denom = (1.0 + B[l - 1]) * (1.0 + eps / L)
        for k in range(l + 1, L):
            denom *= norms[k - 1] + eps / L
        out.append(eps / (n_out * L) / denom)
    return EpsSchedule(tuple(out), B, eps)


# --- strong tickets ----------------------------------------------------------


def prescale(target: MaskedNetwork) -> tuple[MaskedNetwork, float]:
    """Scale each layer into ``[-1, 1]``; returns the net and its output factor.

    With ReLU, dividing layer ``l`` by ``s_l`` (biases by ``s_1 ... s_l``)
    divides the output by ``s_1 ... s_L``.
    """
    weights, biases = [], []
    total = 1.0
    for w, b in zip(target.effective_weights(), target.biases):
        s = max(1.0, float(np.abs(w).max(initial=0.0)), float(np.abs(b).max(initial=0.0)) / total)
        total *= s
        weights.append(w / s)
        biases.append(b / total)
    return MaskedNetwork(target.arch, tuple(weights), tuple(biases)), total


def _eps_bin(eps: float) -> float:
    """Round down onto a quarter-octave grid so calibrations can be shared."""
    return 2.0 ** (math.floor(4 * math.log2(eps)) / 4)


@functools.lru_cache(maxsize=256)
def failure_curve(p: float, eps: float, law: str, trials: int, seed: int, n_max: int = 400):
    """Measured subset-sum failure counts on a grid of base-set sizes.

    The grid stops once at most two failures are observed.
    """
    step = max(1, int(round(0.5 / p)))
    ns, fails = [], []
    n = step
    while n <= n_max:
        res = probe_lemma1(min(p, 1.0), eps, 0.5, [n], trials, seed, value_law=law, heuristic_fallback=True)
        ns.append(n)
        fails.append(res.failures[0])
        if res.failures[0] <= 2:
            break
        n += step
    return tuple(ns), tuple(fails)


def n_star_from_curve(ns, fails, trials: int, delta: float) -> int:
    """Smallest size with failure rate ``<= delta``.

    Below the probe's resolution the tail is assumed geometric in ``n`` and
    extrapolated from a log-linear fit of the last points with failures.
    """
    rates = np.asarray(fails, dtype=np.float64) / trials
    smooth = isotonic_regression(rates, increasing=False).x
    hit = np.flatnonzero(smooth <= delta)
    if hit.size and (smooth[hit[0]] > 0 or delta * trials >= 3):
        return int(ns[hit[0]])
    pos = np.flatnonzero((np.asarray(fails) >= 3) & (rates <= 0.5))
    if pos.size < 2:
        pos = np.flatnonzero(np.asarray(fails) > 0)[-3:]
    tail = pos[-6:]
    x = np.asarray(ns, dtype=np.float64)[tail]
    y = np.log(rates[tail])
    slope, icpt = np.polyfit(x, y, 1) if tail.size >= 2 else (-1.0, y[-1] + x[-1])
    slope = min(slope, -1e-3)
    n = math.ceil((math.log(delta) - icpt) / slope)
    return int(max(n, ns[tail[-1]] if tail.size else ns[-1]))


def _needed_signs(arch: Architecture) -> tuple[int, ...]:
    a1, b1 = arch.input_domain
    return tuple(s for s, need in ((1, b1 > 0), (-1, a1 < 0)) if need)


@dataclass(frozen=True)
class SLTBlocks:
    copies: tuple[int, ...]
    bias_units: tuple[int, ...]
    rho: int


def slt_block_sizes(
    target: MaskedNetwork,
    plan: SparsityPlan,
    delta: float,
    schedule: EpsSchedule,
    *,
    trials: int = 1000,
    seed: int = 0,
) -> SLTBlocks:
    """Block sizes from measured subset-sum failure curves.

    ``copies[0]`` is the layer-0 block size per input, ``copies[l]`` the
    number of copies of each target unit in layer ``l``.  A layer-0 pool
    keeps the members whose drawn weight has the needed sign and whose edge
    survived, so its availability is ``p_1 / 2`` with product-distributed
    values.  Sizes are read off at failure level ``delta / rho`` where
    ``rho``, the number of subset-sum problems, depends on the sizes; the
    two are iterated to a fixed point.
    """
    arch = target.arch
    L = arch.depth
    ps = plan.p_per_layer
    eps = schedule.eps_per_layer
    signs = len(_needed_signs(arch))
    nnz_w = target_nnz(target)
    nnz_b = [int(np.count_nonzero(b)) for b in target.biases]

    def size(p, law, e, level):
        ns, fails = failure_curve(p, _eps_bin(e), law, trials, seed)
        return n_star_from_curve(ns, fails, trials, level)

    def count(copies):
        total = 0
        for l in range(1, L + 1):
            c = copies[l] if l < L else 1
            total += c * (nnz_w[l - 1] * (signs if l == 1 else 1) + nnz_b[l - 1])
        return total

    rho = count([1] * (L + 1))
    copies, bias_units = [1] * L, [0] * L
    for _ in range(8):
        level = delta / max(rho, 1)
        copies = [size(ps[0] / 2, "product", eps[0], level) if nnz_w[0] else 1]
        copies += [size(ps[l], "uniform", eps[l], level) if nnz_w[l] else 1 for l in range(1, L)]
        bias_units = [size(ps[l] / 2, "product", eps[l], level) if nnz_b[l] else 0 for l in range(L)]
        new_rho = count(copies + [1])
        if new_rho == rho:
            break
        rho = new_rho
    return SLTBlocks(tuple(copies), tuple(bias_units), rho)


def build_slt(
    target: MaskedNetwork,
    plan: SparsityPlan,
    delta: float,
    eps: float,
    seed: int,
    *,
    blocks: SLTBlocks | None = None,
    input_density: float | None = None,
    flow_repair: bool = True,
    approximate_biases: bool = False,
    calibration_trials: int = 1000,
    domain_samples: int = 100,
) -> Construction:
    """Strong ticket for a fully-connected target by masking drawn weights.

    Source weights and biases are i.i.d. ``U([-1,1])``.  Layer-0 unit ``u``
    copying input ``j`` outputs ``relu(w_u x_j)``, i.e. ``w_u relu(x_j)`` or
    ``|w_u| relu(-x_j)`` depending on the sign of ``w_u``; a target weight
    ``w`` on input ``j`` is rebuilt as subset sums hitting ``w`` over the
    positive members and ``-w`` over the negative ones.  Deeper weights are
    subset sums of drawn weights from copies of the previous layer.

    Targets with nonzero biases need ``approximate_biases=True``
    (experimental): each layer then carries extra units with pruned inputs
    whose constant outputs ``relu(b_u)`` feed bias subset sums.
    """
    start = time.perf_counter()
    arch = target.arch
    if arch.is_conv:
        raise StructuralError("strong tickets are built for fully-connected targets only")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta={delta} outside (0, 1)")
    L = arch.depth
    has_bias = any(np.any(b != 0) for b in target.biases)
    if has_bias and not approximate_biases:
        raise DomainError("targets with nonzero biases need approximate_biases=True")
    scaled, out_scale = prescale(target)
    schedule = compute_eps_schedule(scaled, eps / out_scale, domain_samples)
    eps_l = schedule.eps_per_layer
    if blocks is None:
        blocks = slt_block_sizes(scaled, plan, delta, schedule, trials=calibration_trials)
    copies = list(blocks.copies) + [1]
    extra = list(blocks.bias_units) if approximate_biases else [0] * L
    n_t = arch.widths()
    d = n_t[0]
    src_widths = [d] + [copies[l] * n_t[l] + extra[l] for l in range(L)] + [n_t[L]]
    src_arch = Architecture(tuple(FC(a, b) for a, b in zip(src_widths, src_widths[1:])), arch.input_domain)
    p0 = plan.p_per_layer[0] if input_density is None else input_density
    rng_mask, rng_weight, rng_choice, rng_verify = _streams(seed, 4)

    S = _sample_source_mask(src_arch, p0, plan.p_per_layer, rng_mask)
    first_copies = copies[0] * d
    if flow_repair:
        _repair_in_degree(S[0], rng_mask, units=first_copies)
    source_mask = Mask(tuple(S), seed=seed, plan_ref=plan.ref)
    W = [rng_weight.uniform(-1.0, 1.0, size=layer.weight_shape) for layer in src_arch.layers]
    b = [rng_weight.uniform(-1.0, 1.0, size=layer.out_units) for layer in src_arch.layers]
    source = MaskedNetwork(src_arch, tuple(W), tuple(b), source_mask)

    owner = _assign_univariate(S[0], copies[0], d, rng_choice, units=first_copies)
    w_first = np.where(owner >= 0, W[0][np.arange(src_widths[1]), np.clip(owner, 0, None)], 0.0)
    signs = _needed_signs(arch)
    tw = scaled.weights
    tb = scaled.biases
    # valid[l][t]: valid copies in source layer l of target unit t (input coordinate for l = 0)
    valid = [[np.flatnonzero(owner == j) for j in range(d)]]
    const_units = []  # per source layer l < L: bias units with positive constant output
    for l in range(L):
        lo = copies[l] * n_t[l]
        units = np.arange(lo, lo + extra[l])
        const_units.append(units[b[l][units] > 0])
    picks: list[dict] = [dict()]
    rho = 0
    failure = None
    for l in range(1, L + 1):
        s_l, w_l = S[l], W[l]
        c_l = copies[l]
        layer_valid, layer_picks = [], {}
        for i in range(n_t[l]):
            needs = np.flatnonzero(tw[l - 1][i] != 0)
            valid_i = []
            for c in range(c_l):
                ip = i * c_l + c
                chosen, ok = [], True
                problems = []
                for j in needs:
                    target_w = tw[l - 1][i, j]
                    if l == 1:
                        for sign in signs:
                            pool = valid[0][j]
                            pool = pool[(np.sign(w_first[pool]) == sign) & s_l[ip, pool]]
                            problems.append((pool, w_l[ip, pool] * np.abs(w_first[pool]), sign * target_w, j))
                    else:
                        pool = valid[l - 1][j]
                        pool = pool[s_l[ip, pool]]
                        problems.append((pool, w_l[ip, pool], target_w, j))
                if tb[l - 1][i] != 0:
                    pool = const_units[l - 1]
                    pool = pool[s_l[ip, pool]]
                    problems.append((pool, w_l[ip, pool] * b[l - 1][pool], tb[l - 1][i], "bias"))
                for pool, values, z, j in problems:
                    rho += 1
                    if pool.size == 0:
                        ok = abs(z) <= eps_l[l - 1]
                        sel = ()
                    else:
                        sol = solve(SubsetSumInstance.dense(values, z, eps_l[l - 1]))
                        ok, sel = sol.feasible, sol.chosen
                    if not ok:
                        if failure is None:
                            failure = {"layer": l, "unit": int(i), "input": j if j == "bias" else int(j), "copy": int(ip)}
                        break
                    chosen.extend(int(pool[k]) for k in sel)
                if ok:
                    valid_i.append(ip)
                    layer_picks[ip] = chosen
            layer_valid.append(np.asarray(valid_i, dtype=np.int64))
        valid.append(layer_valid)
        picks.append(layer_picks)

    success = all(v.size > 0 for v in valid[L])
    report = TrialReport(
        "slt", success, tuple(copies), None, None, seed,
        source_widths=tuple(src_widths), rho=rho, failure=None if success else failure,
    )
    if not success:
        report.wall_time = time.perf_counter() - start
        return Construction(None, report, source_mask, source=source, output_scale=out_scale)

    keep = [np.zeros(layer.weight_shape, dtype=bool) for layer in src_arch.layers]
    keep_bias = [np.zeros(layer.out_units, dtype=bool) for layer in src_arch.layers]
    used = set(range(n_t[L]))
    for l in range(L, 0, -1):
        below = set()
        for ip in sorted(used):
            if ip not in picks[l]:
                # constant unit: keeps its bias, loses every in-edge
                keep_bias[l][ip] = True
                continue
            for u in picks[l][ip]:
                keep[l][ip, u] = True
                below.add(u)
        used = below
    for u in sorted(used):
        if owner[u] >= 0 and u < first_copies:
            keep[0][u, owner[u]] = True
        else:
            keep_bias[0][u] = True
    ticket_mask = Mask(tuple(keep), seed=seed, plan_ref=plan.ref)
    ticket = MaskedNetwork(src_arch, tuple(W), tuple(bl * kb for bl, kb in zip(b, keep_bias)), ticket_mask)
    report.max_error = _verify(target, ticket, rng_verify, domain_samples, out_scale)
    report.nnz = ticket_mask.total_nnz
    report.contained = ticket_mask.is_subset_of(source_mask)
    if report.max_error > eps or not report.contained:
        report.success = False
        report.failure = {"reason": "verification", "max_error": report.max_error}
    report.wall_time = time.perf_counter() - start
    block_map = BlockMap(
        (tuple(tuple(int(u) for u in m) for m in valid[0]),)
        + tuple(tuple(tuple(int(u) for u in m) for m in layer) for layer in valid[1:])
    )
    return Construction(ticket if report.success else None, report, source_mask, block_map, source, out_scale)


def construct_slt(target: MaskedNetwork, plan: SparsityPlan, delta: float, eps: float, seed: int, **kw):
    c = build_slt(target, plan, delta, eps, seed, **kw)
    return c.ticket, c.report


# --- lower bound -------------------------------------------------------------


def lower_bound_threshold(p: float, d: int, delta: float) -> float:
    """Width below which a univariate target fails with probability > delta."""
    return math.log(1.0 / (1.0 - (1.0 - delta) ** (1.0 / d))) / math.log(1.0 / (1.0 - p))


def path_probability(p: float, d: int, n: int) -> float:
    """``(1 - (1-p^2)^n)^d``: every input has an unmasked 2-edge path, treating
    the ``d`` per-input events as independent."""
    return (1.0 - (1.0 - p * p) ** n) ** d


def exact_path_probability(p: float, d: int, n: int) -> float:
    """The same event without the independence step.

    All inputs share the hidden-to-output edges, so the per-input events are
    positively correlated.  Conditioning on the number ``K`` of surviving
    hidden-to-output edges makes them independent:
    ``E_K[(1 - (1-p)^K)^d]`` with ``K ~ Bin(n, p)``.  Equal to
    :func:`path_probability` for ``d = 1``.
    """
    k = np.arange(n + 1)
    return float(np.dot(binom.pmf(k, n, p), (1.0 - (1.0 - p) ** k) ** d))


@dataclass
class LowerBoundResult:
    p: float
    d: int
    delta: float
    n_grid: list[int]
    analytic: list[float]
    exact: list[float]
    monte_carlo: list[float]
    trials: int
    threshold: float
    n_min_analytic: int
    n_min_mc: int | None

    def csv_rows(self) -> list[dict]:
        return [
            {"n": n, "analytic": a, "exact": e, "monte_carlo": m, "trials": self.trials}
            for n, a, e, m in zip(self.n_grid, self.analytic, self.exact, self.monte_carlo)
        ]

    def summary(self) -> dict:
        return {
            "p": self.p,
            "d": self.d,
            "delta": self.delta,
            "threshold": self.threshold,
            "n_min_analytic": self.n_min_analytic,
            "n_min_mc": self.n_min_mc,
            "max_gap_analytic_mc": max(abs(a - m) for a, m in zip(self.analytic, self.monte_carlo)),
            "max_gap_exact_mc": max(abs(e - m) for e, m in zip(self.exact, self.monte_carlo)),
            # the measured minimal width must not undercut the threshold either
            "consistent": self.n_min_analytic >= self.threshold
            and (self.n_min_mc is None or self.n_min_mc >= self.threshold),
        }


def representable_rate(p: float, d: int, n: int, trials: int, rng) -> float:
    """Monte Carlo share of ``d -> n -> 1`` masks with a path from every input."""
    first = rng.random((trials, n, d)) < p
    second = rng.random((trials, n)) < p
    paths = (first & second[:, :, None]).any(axis=1)
    return float(paths.all(axis=1).mean())


def probe_lower_bound(p: float, d: int, delta: float, n_grid: Sequence[int], trials: int, seed: int) -> LowerBoundResult:
    if not 0.0 < p < 1.0:
        raise DomainError(f"p={p} outside (0, 1)")
    if d < 1:
        raise DomainError("d must be >= 1")
    n_grid = sorted(int(n) for n in n_grid)
    analytic = [path_probability(p, d, n) for n in n_grid]
    exact = [exact_path_probability(p, d, n) for n in n_grid]
    mc = [representable_rate(p, d, n, trials, np.random.default_rng([seed, n])) for n in n_grid]
    need = 1.0 - (1.0 - delta) ** (1.0 / d)
    n_min = max(1, math.ceil(math.log(need) / math.log(1.0 - p * p) - 1e-12))
    while path_probability(p, d, n_min) < 1.0 - delta:
        n_min += 1
    hits = [n for n, r in zip(n_grid, mc) if r >= 1.0 - delta]
    return LowerBoundResult(
        p, d, delta, n_grid, analytic, exact, mc, trials, lower_bound_threshold(p, d, delta),
        n_min, hits[0] if hits else None,
    )


# --- aggregation ---------------------------------------------------------------


def aggregate(reports: Sequence[TrialReport], delta: float) -> dict:
    trials = len(reports)
    failures = sum(not r.success for r in reports)
    lo, hi = binomial_ci(failures, trials) if trials else (0.0, 1.0)
    errors = [r.max_error for r in reports if r.success and r.max_error is not None]
    nnz = [r.nnz for r in reports if r.nnz is not None]
    qs = sorted({tuple(r.q) for r in reports})
    return {
        "kind": reports[0].kind if reports else None,
        "delta": delta,
        "trials": trials,
        "failures": failures,
        "failure_rate": failures / trials if trials else None,
        "failure_rate_ci": [lo, hi],
        "mean_verification_error": float(np.mean(errors)) if errors else None,
        "max_verification_error": float(np.max(errors)) if errors else None,
        "q": [list(q) for q in qs],
        "nnz_stats": (
            {"min": int(min(nnz)), "max": int(max(nnz)), "mean": float(np.mean(nnz))} if nnz else None
        ),
        "all_contained": all(r.contained for r in reports if r.contained is not None),
    }
