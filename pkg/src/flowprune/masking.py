"""Mask tensors over model weights: hard, soft and group-granular pruning.

Masks are two-valued per update: pruned units carry the current soft value
``p`` and kept units carry 1. Masks are recomputed from scratch on every
update, so a soft-pruned unit whose score recovers is restored -- that
recoverability is what distinguishes soft from permanent pruning. The soft
sparsity of a mask set is the fraction of entries equal to ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRANULARITIES = ("element", "row-group", "column-group")

# Mask entries are compared against p at this absolute tolerance.
MASK_ATOL = 1e-12


@dataclass
class MaskedParam:
    """A weight tensor with a same-shape mask in [0, 1]."""

    name: str
    weights: np.ndarray
    mask: np.ndarray
    granularity: str = "element"

    def effective(self) -> np.ndarray:
        return self.weights * self.mask


@dataclass
class MaskState:
    """Result of one mask update."""

    p_current: float
    s_current: float
    granularity: str
    kept: dict[str, np.ndarray] = field(default_factory=dict)
    pruned_units: int = 0
    total_units: int = 0

    def kept_key(self) -> frozenset:
        """Hashable identity of the kept set, for churn/overlap diagnostics."""
        out = []
        for name in sorted(self.kept):
            out.extend((name, int(i)) for i in np.flatnonzero(self.kept[name]))
        return frozenset(out)


def _unit_view(param: MaskedParam, granularity: str) -> int:
    """Number of maskable units in a param under the granularity."""
    if granularity == "element":
        return param.weights.size
    if granularity == "row-group":
        return param.weights.shape[0]
    if granularity == "column-group":
        return param.weights.shape[1]
    raise ValueError(f"unknown granularity {granularity!r}")


def _unit_scores(score: np.ndarray, granularity: str) -> np.ndarray:
    """Per-unit scores: elements as-is, groups as member sums."""
    if granularity == "element":
        return score.ravel()
    if granularity == "row-group":
        return score.sum(axis=1)
    if granularity == "column-group":
        return score.sum(axis=0)
    raise ValueError(f"unknown granularity {granularity!r}")


def _write_mask(param: MaskedParam, keep_units: np.ndarray, p: float, granularity: str):
    if granularity == "element":
        mask = np.where(keep_units.reshape(param.weights.shape), 1.0, p)
    elif granularity == "row-group":
        mask = np.where(keep_units[:, None], 1.0, p)
        mask = np.broadcast_to(mask, param.weights.shape).copy()
    else:
        mask = np.where(keep_units[None, :], 1.0, p)
        mask = np.broadcast_to(mask, param.weights.shape).copy()
    param.mask = np.ascontiguousarray(mask, dtype=np.float64)
    param.granularity = granularity


def soft_sparsity(params: list[MaskedParam], p: float) -> float:
    """Fraction of mask entries equal to ``p`` across all params.

    Degenerate when p == 1 with nothing pruned: every kept entry also equals
    p, so the value saturates at 1 regardless of the pruned set.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    total = sum(par.mask.size for par in params)
    if total == 0:
        return 0.0
    hits = sum(
        int(np.count_nonzero(np.abs(par.mask - p) <= MASK_ATOL)) for par in params
    )
    return hits / total


def ranked_units(scores: dict[str, np.ndarray], params: list[MaskedParam],
                 granularity: str) -> list[tuple[float, str, int]]:
    """All units sorted ascending by (score, name, index); the tie rule."""
    entries = []
    for par in params:
        unit = _unit_scores(np.asarray(scores[par.name], dtype=np.float64),
                            granularity)
        entries.extend(
            (float(v), par.name, i) for i, v in enumerate(unit)
        )
    entries.sort()
    return entries


def apply_mask_update(
    params: list[MaskedParam],
    scores: dict[str, np.ndarray],
    s_t: float,
    p_t: float,
    granularity: str = "element",
    per_layer: bool = False,
    exclude: tuple[str, ...] = (),
) -> MaskState:
    """Recompute all masks: lowest-scoring floor(s_t * units) get ``p_t``.

    Masks are rebuilt from scratch, so any previously pruned unit whose score
    recovers is restored to 1.

    Ranking is global by default (one pooled score vector); ``per_layer``
    ranks within each parameter instead. ``exclude`` names parameters whose
    mask is pinned to all-ones (they drop out of the unit universe).
    """
    if not 0.0 <= s_t <= 1.0:
        raise ValueError("s_t must lie in [0, 1]")
    if not 0.0 <= p_t <= 1.0:
        raise ValueError("p_t must lie in [0, 1]")
    active = [p for p in params if p.name not in exclude]
    for par in active:
        if par.name not in scores:
            raise KeyError(f"scores missing parameter {par.name!r}")
        if np.asarray(scores[par.name]).shape != par.weights.shape:
            raise ValueError(f"score shape mismatch for {par.name!r}")

    state = MaskState(p_current=float(p_t), s_current=float(s_t),
                      granularity=granularity)
    for par in params:
        if par.name in exclude:
            par.mask = np.ones_like(par.weights)
            par.granularity = granularity

    def prune_set(pool: list[tuple[float, str, int]]) -> set:
        n_prune = int(np.floor(s_t * len(pool)))
        return {(name, idx) for _, name, idx in pool[:n_prune]}

    if per_layer:
        drop = set()
        for par in active:
            pool = ranked_units({par.name: scores[par.name]}, [par], granularity)
            drop |= prune_set(pool)
    else:
        pool = ranked_units(scores, active, granularity)
        drop = prune_set(pool)

    total = 0
    for par in active:
        n_units = _unit_view(par, granularity)
        total += n_units
        keep = np.ones(n_units, dtype=bool)
        for i in range(n_units):
            if (par.name, i) in drop:
                keep[i] = False
        _write_mask(par, keep, p_t, granularity)
        state.kept[par.name] = keep
    state.pruned_units = len(drop)
    state.total_units = total
    return state


def nonzero_params(params: list[MaskedParam], always_dense: int = 0) -> int:
    """Count of weights whose mask is nonzero, plus unmaskable params."""
    n = sum(int(np.count_nonzero(np.abs(par.mask) > MASK_ATOL)) for par in params)
    return n + always_dense


def dense_params(params: list[MaskedParam], always_dense: int = 0) -> int:
    return sum(par.mask.size for par in params) + always_dense
