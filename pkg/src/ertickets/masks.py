"""Erdős–Rényi mask sampling, flow statistics and flow repair.

Degrees are counted per unit: neurons for fully-connected layers and
channels (filters) for convolutions, where a kernel with any nonzero entry
counts as one edge.  Hidden units need in- and out-degree at least 1, input
units only out-degree and output units only in-degree.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RepairInfeasibleError, StructuralError
from .netcore import Architecture, Mask
from .plans import SparsityPlan

__all__ = [
    "Mask",
    "FlowReport",
    "sample_mask",
    "flow_stats",
    "flagged_units",
    "repair_random_addition",
    "repair_rejection",
    "mask_to_dict",
    "mask_from_dict",
]


@dataclass(frozen=True)
class FlowReport:
    """Zero-degree counts per unit boundary ``0..L`` plus repair bookkeeping.

    Boundary 0 holds the input units, boundary ``L`` the outputs.  Entries
    that do not apply (in-degree of inputs, out-degree of outputs) are 0.
    """

    zero_in_degree: tuple[int, ...]
    zero_out_degree: tuple[int, ...]
    edges_added: int = 0
    edges_removed: int = 0
    flagged_before: int | None = None

    @property
    def flagged(self) -> int:
        return sum(self.zero_in_degree) + sum(self.zero_out_degree)

    @property
    def flow_preserving(self) -> bool:
        return self.flagged == 0

    def to_dict(self) -> dict:
        return {
            "zero_in_degree": list(self.zero_in_degree),
            "zero_out_degree": list(self.zero_out_degree),
            "edges_added": self.edges_added,
            "edges_removed": self.edges_removed,
            "flagged_before": self.flagged_before,
        }


def _groups(layers) -> list[int]:
    """Number of weight columns that make up one input unit, per layer.

    A fully-connected layer after a convolution sees ``C*H*W`` flattened
    columns, ``H*W`` of which belong to each channel.
    """
    sizes = []
    for l, s in enumerate(layers):
        if s.ndim == 2 and l > 0 and layers[l - 1].ndim == 4:
            channels = layers[l - 1].shape[0]
            if s.shape[1] % channels:
                raise StructuralError(f"layer {l} columns do not split into {channels} channels")
            sizes.append(s.shape[1] // channels)
        else:
            sizes.append(1)
    return sizes


def _row_counts(s: np.ndarray) -> np.ndarray:
    return s.reshape(s.shape[0], -1).sum(axis=1)


def _col_counts(s: np.ndarray, group: int) -> np.ndarray:
    if s.ndim == 4:
        return s.sum(axis=(0, 2, 3))
    counts = s.sum(axis=0)
    if group > 1:
        counts = counts.reshape(-1, group).sum(axis=1)
    return counts


def _col_entries(s: np.ndarray, unit: int, group: int) -> tuple[np.ndarray, ...]:
    """Index arrays of every weight entry whose input unit is ``unit``."""
    if s.ndim == 4:
        o, kh, kw = np.meshgrid(
            np.arange(s.shape[0]), np.arange(s.shape[2]), np.arange(s.shape[3]), indexing="ij"
        )
        return (o.ravel(), np.full(o.size, unit), kh.ravel(), kw.ravel())
    o, c = np.meshgrid(np.arange(s.shape[0]), np.arange(unit * group, (unit + 1) * group), indexing="ij")
    return (o.ravel(), c.ravel())


def _row_entries(s: np.ndarray, unit: int) -> tuple[np.ndarray, ...]:
    rest = np.indices(s.shape[1:]).reshape(s.ndim - 1, -1)
    return (np.full(rest.shape[1], unit), *rest)


def flagged_units(layers) -> list[tuple[int, int, str]]:
    """``(layer, unit, kind)`` for every degree violation.

    ``kind`` is ``"in"`` for a zero-in-degree output unit (row) of ``layer``
    and ``"out"`` for a zero-out-degree input unit (column group) of it.
    """
    layers = [np.asarray(s, dtype=bool) for s in layers]
    groups = _groups(layers)
    flags = []
    for l, s in enumerate(layers):
        flags += [(l, int(u), "in") for u in np.flatnonzero(_row_counts(s) == 0)]
        flags += [(l, int(u), "out") for u in np.flatnonzero(_col_counts(s, groups[l]) == 0)]
    return flags


def _report(layers, **extra) -> FlowReport:
    zero_in = [0] * (len(layers) + 1)
    zero_out = [0] * (len(layers) + 1)
    for l, _, kind in flagged_units(layers):
        if kind == "in":
            zero_in[l + 1] += 1
        else:
            zero_out[l] += 1
    return FlowReport(tuple(zero_in), tuple(zero_out), **extra)


def flow_stats(arch: Architecture, mask: Mask) -> FlowReport:
    mask.check_matches(arch)
    return _report(mask.layers)


def sample_mask(arch: Architecture, plan: SparsityPlan, seed) -> Mask:
    """Independent Bernoulli(p_l) entries for every layer."""
    if len(plan.p_per_layer) != arch.depth:
        raise StructuralError(f"plan has {len(plan.p_per_layer)} densities for {arch.depth} layers")
    rng = np.random.default_rng(seed)
    layers = tuple(rng.random(layer.weight_shape) < p for layer, p in zip(arch.layers, plan.p_per_layer))
    return Mask(layers, seed=seed if isinstance(seed, int) else None, plan_ref=plan.ref)


def repair_random_addition(mask: Mask, seed, max_passes: int = 100) -> tuple[Mask, FlowReport]:
    """Give every zero-degree unit one uniformly chosen incident edge.

    Each added edge is paid for by removing a uniformly chosen existing edge
    of the same layer whose endpoints both keep degree >= 1; when the layer
    has no such edge the addition is net-positive and shows up as
    ``edges_added > edges_removed``.
    """
    rng = np.random.default_rng(seed)
    layers = [np.array(s, dtype=bool) for s in mask.layers]
    groups = _groups(layers)
    protected = [np.zeros(s.shape, dtype=bool) for s in layers]
    flagged_before = len(flagged_units(layers))
    added = removed = 0
    for _ in range(max_passes):
        flags = flagged_units(layers)
        if not flags:
            break
        for l, unit, kind in flags:
            s = layers[l]
            if kind == "in":
                if _row_counts(s)[unit] > 0:
                    continue
                entries = _row_entries(s, unit)
            else:
                if _col_counts(s, groups[l])[unit] > 0:
                    continue
                entries = _col_entries(s, unit, groups[l])
            pick = rng.integers(entries[0].size)
            idx = tuple(int(e[pick]) for e in entries)
            s[idx] = True
            protected[l][idx] = True
            added += 1
            if _remove_spare_edge(s, protected[l], groups[l], rng):
                removed += 1
    else:
        raise RepairInfeasibleError("random addition did not converge")
    if flagged_units(layers):
        raise RepairInfeasibleError("random addition left zero-degree units")
    repaired = Mask(tuple(layers), seed=mask.seed, plan_ref=mask.plan_ref)
    return repaired, _report(layers, edges_added=added, edges_removed=removed, flagged_before=flagged_before)


def _remove_spare_edge(s: np.ndarray, protected: np.ndarray, group: int, rng) -> bool:
    rows = _row_counts(s)
    cols = _col_counts(s, group)
    nz = np.nonzero(s & ~protected)
    if nz[0].size == 0:
        return False
    col_unit = nz[1] // group if s.ndim == 2 else nz[1]
    ok = (rows[nz[0]] >= 2) & (cols[col_unit] >= 2)
    candidates = np.flatnonzero(ok)
    if candidates.size == 0:
        return False
    pick = candidates[rng.integers(candidates.size)]
    s[tuple(int(e[pick]) for e in nz)] = False
    return True


def repair_rejection(arch: Architecture, plan: SparsityPlan, seed, max_attempts: int = 100) -> Mask:
    """Sample an ER mask, then resample rows/columns of flagged units.

    A flagged unit's incident entries are all zero, so resampling them only
    adds edges and never creates new flags.  One attempt is one resampling
    round over all currently flagged units.
    """
    rng = np.random.default_rng(seed)
    if any(p <= 0 for p in plan.p_per_layer):
        raise RepairInfeasibleError("rejection sampling needs positive densities")
    layers = [np.array(s) for s in sample_mask(arch, plan, rng).layers]
    groups = _groups(layers)
    for _ in range(max_attempts):
        flags = flagged_units(layers)
        if not flags:
            return Mask(tuple(layers), seed=seed if isinstance(seed, int) else None, plan_ref=plan.ref)
        for l, unit, kind in flags:
            s, p = layers[l], plan.p_per_layer[l]
            entries = _row_entries(s, unit) if kind == "in" else _col_entries(s, unit, groups[l])
            s[entries] = rng.random(entries[0].size) < p
    if flagged_units(layers):
        raise RepairInfeasibleError(f"no flow-preserving mask after {max_attempts} attempts")
    return Mask(tuple(layers), seed=seed if isinstance(seed, int) else None, plan_ref=plan.ref)


def mask_to_dict(mask: Mask) -> dict:
    return {
        "layers": [
            {"shape": list(s.shape), "nnz": int(s.sum()), "coords": np.argwhere(s).tolist()}
            for s in mask.layers
        ],
        "seed": mask.seed,
        "plan_ref": mask.plan_ref,
    }


def mask_from_dict(d: dict) -> Mask:
    layers = []
    for entry in d["layers"]:
        s = np.zeros(entry["shape"], dtype=bool)
        coords = np.asarray(entry["coords"], dtype=np.int64).reshape(-1, len(entry["shape"]))
        s[tuple(coords.T)] = True
        if "nnz" in entry and int(s.sum()) != entry["nnz"]:
            raise StructuralError("mask coordinate list does not match its nnz")
        layers.append(s)
    return Mask(tuple(layers), seed=d.get("seed"), plan_ref=d.get("plan_ref"))


def save_mask(mask: Mask, path) -> None:
    Path(path).write_text(json.dumps(mask_to_dict(mask)))


def load_mask(path) -> Mask:
    return mask_from_dict(json.loads(Path(path).read_text()))
