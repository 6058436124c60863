"""
Sparsification strategies: S_top, top-K and rand-K with error feedback, and the
time-correlated global/local mask pair with optional layer-wise fairness.

All functions are pure. Error feedback state is threaded explicitly through
ErrorState values, one per client.
"""
import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .config import CompressorConfig
from .exceptions import ContractViolationError, LayoutMismatchError
from .tensor import (
    LayerLayout,
    Mask,
    ParamVector,
    apply_mask,
    mask_complement,
    mask_union,
    substream,
)
from .types import Fairness, FloatArray, IndexArray

logger = logging.getLogger(__name__)

_EMPTY_INDEX = np.empty(0, dtype=np.int64)
_EMPTY_VALUES = np.empty(0, dtype=np.float64)


@dataclass(frozen=True)
class ErrorState:
    """Accumulated compression residual of one client"""
    residual: ParamVector

    @classmethod
    def zeros(cls, layout: LayerLayout) -> "ErrorState":
        return cls(ParamVector.zeros(layout))


@dataclass(frozen=True)
class SparseUpdate:
    """
    A masked update split into its two wire sections.

    Global positions are implied by a mask the receiver already knows (the TCS
    global mask, or the shared rand-K mask), so only their values travel. Local
    positions must be encoded explicitly.
    """
    layout: LayerLayout
    global_positions: IndexArray
    global_values: FloatArray
    local_positions: IndexArray
    local_values: FloatArray

    def __post_init__(self):
        for name in ("global_positions", "local_positions"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        for name in ("global_values", "local_values"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.global_positions.size != self.global_values.size:
            raise ContractViolationError("global positions and values differ in length")
        if self.local_positions.size != self.local_values.size:
            raise ContractViolationError("local positions and values differ in length")
        # Mask construction validates ordering and range
        if not self.global_mask.popcount + self.local_mask.popcount == self.mask.popcount:
            raise ContractViolationError("global and local sections overlap")

    @classmethod
    def from_masks(
        cls, values: ParamVector, global_mask: Optional[Mask], local_mask: Optional[Mask]
    ) -> "SparseUpdate":
        """Gather the entries of ``values`` under the two masks"""
        g = global_mask.indices if global_mask is not None else _EMPTY_INDEX
        loc = local_mask.indices if local_mask is not None else _EMPTY_INDEX
        return cls(values.layout, g, values.values[g], loc, values.values[loc])

    @property
    def global_mask(self) -> Mask:
        return Mask(self.global_positions, self.layout)

    @property
    def local_mask(self) -> Mask:
        return Mask(self.local_positions, self.layout)

    @property
    def mask(self) -> Mask:
        return Mask(np.union1d(self.global_positions, self.local_positions), self.layout)

    @property
    def k_global(self) -> int:
        return int(self.global_positions.size)

    @property
    def k_local(self) -> int:
        return int(self.local_positions.size)

    @property
    def support_size(self) -> int:
        return self.k_global + self.k_local

    def wire_values(self) -> FloatArray:
        """Values in wire order: global section, then local section"""
        return np.concatenate([self.global_values, self.local_values])

    def with_wire_values(self, values: np.ndarray) -> "SparseUpdate":
        """Same positions, values replaced (wire order)"""
        values = np.asarray(values, dtype=np.float64)
        if values.size != self.support_size:
            raise ContractViolationError("value count does not match the support")
        return SparseUpdate(
            self.layout,
            self.global_positions,
            values[: self.k_global],
            self.local_positions,
            values[self.k_global:],
        )

    def to_dense(self) -> ParamVector:
        out = np.zeros(self.layout.d)
        out[self.global_positions] = self.global_values
        out[self.local_positions] = self.local_values
        return ParamVector(out, self.layout)


def _check_count(k: int, d: int, name: str = "K") -> None:
    if not 0 <= k <= d:
        raise ContractViolationError(f"{name}={k} outside [0, {d}]")


def _rank(magnitudes: FloatArray, candidates: IndexArray) -> IndexArray:
    """Candidates ordered by decreasing magnitude, ties to the lower index"""
    order = np.argsort(-magnitudes[candidates], kind="stable")
    return candidates[order]


def _fair_select(
    v: ParamVector, candidates: IndexArray, k_total: int, floors: Optional[Sequence[int]]
) -> Mask:
    """Per-layer top-``floor_l`` first, then fill the rest by global magnitude"""
    ranked = _rank(np.abs(v.values), candidates)
    if floors is None or not any(floors):
        return Mask(np.sort(ranked[:k_total]), v.layout)

    layers = v.layout.layers_of(ranked)
    picked = np.zeros(ranked.size, dtype=bool)
    for layer, floor in enumerate(floors):
        if floor:
            in_layer = np.flatnonzero(layers == layer)
            picked[in_layer[:floor]] = True
    remaining = k_total - int(picked.sum())
    picked[np.flatnonzero(~picked)[:remaining]] = True
    return Mask(np.sort(ranked[picked]), v.layout)


def layer_floors(layout: LayerLayout, phi_min: float) -> Tuple[int, ...]:
    """Per-layer minimum selection counts ceil(phi_min * d_l)"""
    return tuple(
        min(d_l, max(0, math.ceil(phi_min * d_l - 1e-9))) for d_l in layout.layer_sizes
    )


def s_top(v: ParamVector, k: int) -> Mask:
    """
    Mask of the ``k`` largest-magnitude entries of ``v``.

    Exactly ``k`` indices are returned; among equal magnitudes the lower index wins,
    so an all-zero vector selects its ``k`` lowest indices.

    Raises:
        ContractViolationError: If ``k`` is outside [0, d]
    """
    _check_count(k, v.d)
    return _fair_select(v, np.arange(v.d, dtype=np.int64), k, None)


def lf_mask(v: ParamVector, k_total: int, per_layer_floor: Sequence[int]) -> Mask:
    """
    Layer-fair top-K: every layer contributes at least its floor.

    Args:
        v: Vector ranked by magnitude
        k_total: Total number of indices to select
        per_layer_floor: Minimum count per layer

    Returns:
        Mask with exactly ``k_total`` indices

    Raises:
        ContractViolationError: If the floors are infeasible
    """
    layout = v.layout
    floors = tuple(int(f) for f in per_layer_floor)
    if len(floors) != layout.num_layers:
        raise ContractViolationError(f"expected {layout.num_layers} floors, got {len(floors)}")
    if any(f < 0 or f > d_l for f, d_l in zip(floors, layout.layer_sizes)):
        raise ContractViolationError(f"floors {floors} exceed layer sizes {layout.layer_sizes}")
    if not sum(floors) <= k_total <= layout.d:
        raise ContractViolationError(f"need sum(floors)={sum(floors)} <= K={k_total} <= d={layout.d}")
    return _fair_select(v, np.arange(layout.d, dtype=np.int64), k_total, floors)


def topk_compress(update: ParamVector, k: int, err: ErrorState) -> Tuple[SparseUpdate, ErrorState]:
    """
    Top-K sparsification with error feedback.

    The buffered update ``b = update + residual`` is split into the ``k`` entries
    that are sent (all as explicitly positioned local entries) and the new residual.
    """
    _check_count(k, update.d)
    buffered = update + err.residual
    mask = s_top(buffered, k)
    sent = SparseUpdate.from_masks(buffered, None, mask)
    return sent, ErrorState(apply_mask(buffered, mask_complement(mask)))


def randk_mask(layout: LayerLayout, k: int, round: int, root_seed: int) -> Mask:
    """
    Shared random mask for ``round``.

    The stream key carries no client id, so every client derives the same mask.
    """
    _check_count(k, layout.d)
    rng = substream(root_seed, "randk", 0, round).generator()
    return Mask(np.sort(rng.choice(layout.d, size=k, replace=False)), layout)


def randk_compress(update: ParamVector, mask: Mask, err: ErrorState) -> Tuple[SparseUpdate, ErrorState]:
    """Rand-K with error feedback; positions are implied by the shared mask"""
    buffered = update + err.residual
    if mask.layout != buffered.layout:
        raise LayoutMismatchError("mask and update layouts differ")
    sent = SparseUpdate.from_masks(buffered, mask, None)
    return sent, ErrorState(apply_mask(buffered, mask_complement(mask)))


def tcs_global_mask(
    prev_global_delta: ParamVector, k_global: int, fairness: Fairness, phi_min_global: float
) -> Mask:
    """
    Global mask from the last broadcast update.

    A pure function of data every client received, so all clients (and the PS)
    derive the identical mask.
    """
    if fairness == "none":
        return s_top(prev_global_delta, k_global)
    return lf_mask(prev_global_delta, k_global, layer_floors(prev_global_delta.layout, phi_min_global))


def local_floors(global_mask: Mask, phi_min_local: float) -> Tuple[int, ...]:
    """Local-mask floors, clamped to what each layer has left outside the global mask"""
    layout = global_mask.layout
    available = np.asarray(layout.layer_sizes) - global_mask.layer_counts()
    wanted = layer_floors(layout, phi_min_local)
    floors = tuple(int(min(w, a)) for w, a in zip(wanted, available))
    if floors != wanted:
        logger.warning(f"Local layer floors clamped from {wanted} to {floors}")
    return floors


def tcs_local_mask(
    buffered: ParamVector,
    global_mask: Mask,
    k_local: int,
    fairness: Fairness,
    phi_min_local: float,
) -> Mask:
    """
    Client-specific mask over the complement of the global mask.

    Selection is by magnitude of the buffered update; layer floors apply only when
    ``fairness == "lf"``. The result is disjoint from ``global_mask``.

    Raises:
        ContractViolationError: If ``k_local`` exceeds ``d - K_global`` or the
            floors do not fit in ``k_local``
    """
    if global_mask.layout != buffered.layout:
        raise LayoutMismatchError("global mask and update layouts differ")
    free = buffered.d - global_mask.popcount
    if not 0 <= k_local <= free:
        raise ContractViolationError(f"K_local={k_local} outside [0, d - K_global = {free}]")
    candidates = mask_complement(global_mask).indices
    floors = None
    if fairness == "lf":
        floors = local_floors(global_mask, phi_min_local)
        if sum(floors) > k_local:
            raise ContractViolationError(f"local floors {floors} exceed K_local={k_local}")
    return _fair_select(buffered, candidates, k_local, floors)


def tcs_compress(
    update: ParamVector, global_mask: Mask, cfg: CompressorConfig, err: ErrorState
) -> Tuple[SparseUpdate, ErrorState]:
    """
    Time-correlated sparsification of one client update.

    Args:
        update: Local model difference (or gradient)
        global_mask: Mask shared by all clients this round
        cfg: Compressor configuration
        err: Residual carried from the previous round

    Returns:
        The sent SparseUpdate (global and local sections) and the new residual
    """
    d = update.d
    if global_mask.popcount != cfg.k_global(d):
        raise ContractViolationError(
            f"global mask has {global_mask.popcount} entries, config expects {cfg.k_global(d)}"
        )
    buffered = update + err.residual
    fairness: Fairness = "lf" if cfg.local_floors_enabled else "none"
    local = tcs_local_mask(buffered, global_mask, cfg.k_local(d), fairness, cfg.phi_min_local)
    sent = SparseUpdate.from_masks(buffered, global_mask, local)
    residual = apply_mask(buffered, mask_complement(mask_union(global_mask, local)))
    return sent, ErrorState(residual)
