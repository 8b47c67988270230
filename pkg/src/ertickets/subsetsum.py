"""Subset-sum approximation with Bernoulli-thinned base sets.

Given values ``X_1..X_n``, availability flags ``M_1..M_n`` and a target
``z``, find ``I`` over available indices minimizing ``|z - sum_I X_i|``.
:func:`solve_exact` enumerates by meet-in-the-middle; :func:`probe_lemma1`
measures how often an ``eps``-approximation exists as ``n`` grows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.stats import binomtest

from .errors import BudgetError, DomainError, StructuralError

EXACT_BUDGET = 30


@dataclass(frozen=True)
class SubsetSumInstance:
    values: np.ndarray
    availability: np.ndarray
    z: float
    epsilon: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        avail = np.asarray(self.availability, dtype=bool).ravel()
        if values.size < 1:
            raise StructuralError("need at least one value")
        if avail.shape != values.shape:
            raise StructuralError("availability must align with values")
        if abs(self.z) > 1.0:
            raise DomainError(f"target z={self.z} outside [-1, 1]")
        if not 0.0 < self.epsilon < 1.0:
            raise DomainError(f"epsilon={self.epsilon} outside (0, 1)")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "availability", avail)
        object.__setattr__(self, "z", float(self.z))

    @classmethod
    def dense(cls, values, z, epsilon) -> SubsetSumInstance:
        values = np.asarray(values, dtype=np.float64)
        return cls(values, np.ones(values.shape, dtype=bool), z, epsilon)

    def compacted(self) -> SubsetSumInstance:
        """The same problem restricted to available values."""
        kept = self.values[self.availability]
        if kept.size == 0:
            return self
        return SubsetSumInstance.dense(kept, self.z, self.epsilon)


@dataclass(frozen=True)
class SubsetSolution:
    chosen: tuple[int, ...]
    achieved_error: float
    feasible: bool


def subset_error(values: np.ndarray, chosen: Sequence[int], z: float) -> float:
    return abs(z - math.fsum(values[i] for i in chosen))


def _sums(vals: np.ndarray) -> np.ndarray:
    """All ``2**k`` subset sums; entry ``b`` is the sum over the bits of ``b``."""
    out = np.zeros(1 << vals.size)
    for k, v in enumerate(vals):
        np.add(out[: 1 << k], v, out=out[1 << k : 2 << k])
    return out


def _popcount(bits: np.ndarray) -> np.ndarray:
    count = np.zeros(bits.shape, dtype=np.int64)
    bits = bits.copy()
    while bits.any():
        count += bits & 1
        bits >>= 1
    return count


def _mitm(vals: np.ndarray, z: float) -> tuple[int, float]:
    """Bitmask over ``vals`` of a subset minimizing ``|z - sum|``."""
    if vals.size == 0:
        return 0, abs(z)
    h = vals.size // 2
    left_sums = _sums(vals[:h])
    left_bits = np.arange(left_sums.size, dtype=np.int64)
    right_sums = _sums(vals[h:])
    right_bits = np.arange(right_sums.size, dtype=np.int64)
    order = np.lexsort((_popcount(right_bits), right_sums))
    right_sums, right_bits = right_sums[order], right_bits[order]
    need = z - left_sums
    pos = np.searchsorted(right_sums, need)
    lo = np.clip(pos - 1, 0, right_sums.size - 1)
    hi = np.clip(pos, 0, right_sums.size - 1)
    err_lo = np.abs(need - right_sums[lo])
    err_hi = np.abs(need - right_sums[hi])
    use_hi = err_hi < err_lo
    best_right = np.where(use_hi, hi, lo)
    errs = np.where(use_hi, err_hi, err_lo)
    best = errs.min()
    ties = np.flatnonzero(errs == best)
    masks = left_bits[ties] | (right_bits[best_right[ties]] << h)
    if ties.size > 1:
        # smaller cardinality first, then lexicographic order of the index set
        keyed = sorted((int(m).bit_count(), _bit_indices(int(m)), int(m)) for m in masks)
        return keyed[0][2], float(best)
    return int(masks[0]), float(best)


def _bit_indices(mask: int) -> tuple[int, ...]:
    return tuple(k for k in range(mask.bit_length()) if mask >> k & 1)


def solve_exact(inst: SubsetSumInstance, budget: int = EXACT_BUDGET) -> SubsetSolution:
    """Minimum-error subset over the available indices."""
    avail = np.flatnonzero(inst.availability)
    if avail.size > budget:
        raise BudgetError(f"{avail.size} available values exceed the exact budget {budget}; use solve_heuristic")
    mask, _ = _mitm(inst.values[avail], inst.z)
    chosen = tuple(int(avail[k]) for k in _bit_indices(mask))
    err = subset_error(inst.values, chosen, inst.z)
    return SubsetSolution(chosen, err, err <= inst.epsilon)


def _greedy(vals: np.ndarray, z: float) -> set[int]:
    """Repeatedly add the unused value that shrinks the residual the most."""
    chosen: set[int] = set()
    residual = z
    free = np.ones(vals.size, dtype=bool)
    while free.any():
        cand = np.abs(residual - vals)
        cand[~free] = np.inf
        k = int(np.argmin(cand))
        if cand[k] >= abs(residual):
            break
        chosen.add(k)
        free[k] = False
        residual -= vals[k]
    return chosen


def _local_search(vals: np.ndarray, chosen: set[int], z: float, max_rounds: int = 200) -> set[int]:
    """Single toggles and swaps until no move improves the error."""
    chosen = set(chosen)
    member = np.zeros(vals.size, dtype=bool)
    member[list(chosen)] = True
    total = float(vals[member].sum())
    for _ in range(max_rounds):
        err = abs(z - total)
        toggle = np.abs(z - (total + np.where(member, -vals, vals)))
        k = int(np.argmin(toggle))
        best_err, move = toggle[k], ("toggle", k)
        ins, outs = np.flatnonzero(~member), np.flatnonzero(member)
        if ins.size and outs.size:
            swap = np.abs(z - (total - vals[outs][:, None] + vals[ins][None, :]))
            a, b = np.unravel_index(int(np.argmin(swap)), swap.shape)
            if swap[a, b] < best_err:
                best_err, move = swap[a, b], ("swap", (int(outs[a]), int(ins[b])))
        if best_err >= err:
            break
        if move[0] == "toggle":
            member[move[1]] = not member[move[1]]
        else:
            member[move[1][0]], member[move[1][1]] = False, True
        total = float(vals[member].sum())
    return set(np.flatnonzero(member).tolist())


def solve_heuristic(inst: SubsetSumInstance, exact_part: int = 24, seed=0) -> SubsetSolution:
    """Approximate solver for large available sets.

    Combines a greedy residual-shrinking pass with an exact solve over a
    random ``exact_part``-subset, then polishes the better one with toggle
    and swap moves over all available values.  A ``False`` feasibility flag
    is not a proof of infeasibility.
    """
    avail = np.flatnonzero(inst.availability)
    if avail.size == 0:
        return SubsetSolution((), abs(inst.z), abs(inst.z) <= inst.epsilon)
    vals = inst.values[avail]
    if avail.size <= exact_part:
        return solve_exact(inst, budget=max(exact_part, EXACT_BUDGET))
    rng = np.random.default_rng(seed)
    part = np.sort(rng.choice(avail.size, size=exact_part, replace=False))
    mask, _ = _mitm(vals[part], inst.z)
    starts = [_greedy(vals, inst.z), {int(part[k]) for k in _bit_indices(mask)}]
    best = None
    for start in starts:
        sol = _local_search(vals, start, inst.z)
        chosen = tuple(sorted(int(avail[k]) for k in sol))
        err = subset_error(inst.values, chosen, inst.z)
        if best is None or err < best[1]:
            best = (chosen, err)
    return SubsetSolution(best[0], best[1], best[1] <= inst.epsilon)


def solve(inst: SubsetSumInstance, budget: int = EXACT_BUDGET) -> SubsetSolution:
    """Exact when the available count fits the budget, heuristic otherwise."""
    if int(inst.availability.sum()) <= budget:
        return solve_exact(inst, budget)
    return solve_heuristic(inst)


def min_errors(vals: np.ndarray, targets) -> np.ndarray:
    """Best achievable ``|z - sum_I vals|`` for each target ``z`` (exact)."""
    targets = np.atleast_1d(np.asarray(targets, dtype=np.float64))
    if vals.size > EXACT_BUDGET:
        raise BudgetError(f"{vals.size} values exceed the exact budget {EXACT_BUDGET}")
    h = vals.size // 2
    left = _sums(vals[:h])
    # sentinels make both neighbours of every insertion point valid
    right = np.concatenate(([-np.inf], np.sort(_sums(vals[h:])), [np.inf]))
    out = np.empty(targets.size)
    for t, z in enumerate(targets):
        need = z - left
        pos = np.searchsorted(right, need)
        out[t] = min((need - right[pos - 1]).min(), (right[pos] - need).min())
    return out


# --- probing ---------------------------------------------------------------

VALUE_LAWS = ("uniform", "product")


def draw_values(rng: np.random.Generator, size, law: str = "uniform") -> np.ndarray:
    """Base-set values: ``U([-1,1])`` or the product ``U([-1,1]) * U([0,1])``.

    The product law describes the first layer of a strong ticket, where each
    usable value is an outgoing weight times the random weight of a
    univariate copy neuron.
    """
    if law == "uniform":
        return rng.uniform(-1.0, 1.0, size=size)
    if law == "product":
        return rng.uniform(-1.0, 1.0, size=size) * rng.uniform(0.0, 1.0, size=size)
    raise DomainError(f"unknown value law {law!r}")


def binomial_ci(failures: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    """Two-sided Clopper-Pearson interval for a failure probability."""
    ci = binomtest(int(failures), int(trials)).proportion_ci(confidence_level=level, method="exact")
    return float(ci.low), float(ci.high)


def _trial_failures(values, avail, z, eps, heuristic_fallback):
    failures = 0
    for x, m, target in zip(values, avail, z):
        kept = x[m]
        if kept.size > EXACT_BUDGET:
            if not heuristic_fallback:
                raise BudgetError(
                    f"{kept.size} available values exceed the exact budget; enable heuristic_fallback"
                )
            ok = solve_heuristic(SubsetSumInstance.dense(kept, target, eps)).feasible
        else:
            ok = min_errors(kept, target)[0] <= eps
        failures += not ok
    return failures


@dataclass
class ProbeResult:
    p: float
    epsilon: float
    delta: float
    n_grid: list[int]
    trials: int
    failures: list[int]
    failure_rate: list[float]
    smoothed_rate: list[float]
    ci_halfwidth: list[float]
    n_star: int | None
    value_law: str = "uniform"
    adversarial: dict | None = None
    scaling_checks: list[dict] = field(default_factory=list)

    def csv_rows(self) -> list[dict]:
        return [
            {
                "n": n,
                "trials": self.trials,
                "failures": f,
                "failure_rate": r,
                "ci_halfwidth": h,
            }
            for n, f, r, h in zip(self.n_grid, self.failures, self.failure_rate, self.ci_halfwidth)
        ]

    def summary(self) -> dict:
        return {
            "p": self.p,
            "epsilon": self.epsilon,
            "delta": self.delta,
            "n_star": self.n_star,
            "value_law": self.value_law,
            "adversarial": self.adversarial,
            "scaling_checks": self.scaling_checks,
        }


def probe_lemma1(
    p: float,
    epsilon: float,
    delta: float,
    n_grid: Sequence[int],
    trials: int,
    seed: int,
    *,
    thinned: bool = True,
    value_law: str = "uniform",
    heuristic_fallback: bool = False,
    adversarial_trials: int = 0,
) -> ProbeResult:
    """Empirical failure rate of thinned subset-sum approximation per ``n``.

    For each ``n`` and trial: ``X ~ U([-1,1])^n`` (or the product law),
    ``M ~ Ber(p)^n``, ``z ~ U([-1,1])``; a failure means no subset of the
    available values lands within ``epsilon`` of ``z``.  The failure curve is
    made nonincreasing in ``n`` by isotonic regression before ``n_star``, the
    smallest grid ``n`` with smoothed rate ``<= delta``, is read off.

    With ``thinned=False`` the availability draws are made but ignored, which
    gives the classical unthinned probe on identical random numbers.  When
    ``adversarial_trials > 0`` the base sets at ``n_star`` are additionally
    checked against every ``z`` on the grid ``-1, -0.99, ..., 1``.
    """
    if not 0.0 < p <= 1.0:
        raise DomainError(f"p={p} outside (0, 1]")
    if not (0.0 < epsilon < 1.0 and 0.0 < delta < 1.0):
        raise DomainError("epsilon and delta must lie in (0, 1)")
    if trials < 100:
        raise DomainError("the probe needs at least 100 trials per grid point")
    n_grid = sorted(int(n) for n in n_grid)
    failures = []
    for n in n_grid:
        rng = np.random.default_rng([seed, n])
        values = draw_values(rng, (trials, n), value_law)
        avail = rng.random((trials, n)) < p
        if not thinned:
            avail = np.ones_like(avail)
        z = rng.uniform(-1.0, 1.0, size=trials)
        failures.append(_trial_failures(values, avail, z, epsilon, heuristic_fallback))
    rates = np.asarray(failures, dtype=np.float64) / trials
    smoothed = isotonic_regression(rates, increasing=False).x
    halfwidths = []
    for f in failures:
        lo, hi = binomial_ci(f, trials)
        halfwidths.append((hi - lo) / 2)
    below = np.flatnonzero(smoothed <= delta)
    n_star = int(n_grid[below[0]]) if below.size else None
    result = ProbeResult(
        p, epsilon, delta, n_grid, trials, failures, rates.tolist(), smoothed.tolist(),
        halfwidths, n_star, value_law,
    )
    if adversarial_trials and n_star is not None:
        result.adversarial = adversarial_check(
            p, epsilon, n_star, adversarial_trials, seed, thinned=thinned, value_law=value_law
        )
    return result


Z_GRID = np.round(np.linspace(-1.0, 1.0, 201), 2)


def adversarial_check(p, epsilon, n, trials, seed, *, thinned=True, value_law="uniform") -> dict:
    """Failure rates at size ``n`` for every target on the fixed z-grid."""
    rng = np.random.default_rng([seed, n, 1])
    values = draw_values(rng, (trials, n), value_law)
    avail = rng.random((trials, n)) < p
    if not thinned:
        avail = np.ones_like(avail)
    fails = np.zeros(Z_GRID.size)
    for x, m in zip(values, avail):
        kept = x[m]
        if kept.size > EXACT_BUDGET:
            kept = kept[:EXACT_BUDGET]
        fails += min_errors(kept, Z_GRID) > epsilon
    rates = fails / trials
    worst = int(np.argmax(rates))
    return {
        "n": int(n),
        "trials": int(trials),
        "mean_failure_rate": float(rates.mean()),
        "max_failure_rate": float(rates[worst]),
        "worst_z": float(Z_GRID[worst]),
    }


def scaling_check(n_star_a: int, n_star_b: int, p_a: float, p_b: float, rel_tol: float = 0.3) -> dict:
    """Compare ``n*(p_a)/n*(p_b)`` with ``log(1/(1-p_b)) / log(1/(1-p_a))``."""
    predicted = math.log(1 / (1 - p_b)) / math.log(1 / (1 - p_a))
    measured = n_star_a / n_star_b
    return {
        "p_a": p_a,
        "p_b": p_b,
        "measured_ratio": measured,
        "predicted_ratio": predicted,
        "rel_tol": rel_tol,
        "ok": abs(measured / predicted - 1) <= rel_tol,
    }
