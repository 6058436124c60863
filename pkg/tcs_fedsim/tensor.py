"""
Flat parameter vectors with a layer layout, sparsification masks and
deterministic random streams.

Every value type here is immutable once constructed: arrays are stored with the
numpy write flag cleared and operations build new values instead of mutating.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ContractViolationError, LayoutMismatchError, NonFiniteValueError
from .types import FloatArray, IndexArray

logger = logging.getLogger(__name__)

_SEED_MASK = (1 << 64) - 1


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class LayerLayout:
    """Per-layer parameter counts of a flat parameter vector"""
    layer_sizes: Tuple[int, ...]
    layer_names: Tuple[str, ...] = ()
    offsets: Tuple[int, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        if not sizes:
            raise ContractViolationError("a layout needs at least one layer")
        if any(s < 1 for s in sizes):
            raise ContractViolationError(f"layer sizes must be positive, got {sizes}")
        names = tuple(self.layer_names) or tuple(f"layer{i}" for i in range(len(sizes)))
        if len(names) != len(sizes):
            raise ContractViolationError("layer_names and layer_sizes differ in length")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "layer_names", names)
        object.__setattr__(self, "offsets", tuple(int(o) for o in np.cumsum((0,) + sizes)))

    @classmethod
    def single(cls, d: int) -> "LayerLayout":
        """Layout with one layer of ``d`` parameters"""
        return cls((d,))

    @property
    def d(self) -> int:
        return self.offsets[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_sizes)

    def layer_slice(self, layer: int) -> slice:
        return slice(self.offsets[layer], self.offsets[layer + 1])

    def layer_of(self, index: int) -> int:
        """Layer that owns flat parameter ``index``"""
        if not 0 <= index < self.d:
            raise ContractViolationError(f"index {index} outside [0, {self.d})")
        return int(np.searchsorted(self.offsets, index, side="right")) - 1

    def layers_of(self, indices: IndexArray) -> IndexArray:
        return np.searchsorted(self.offsets, indices, side="right").astype(np.int64) - 1


def _check_layout(a: LayerLayout, b: LayerLayout) -> None:
    if a is not b and a != b:
        raise LayoutMismatchError(f"layout mismatch: {a.layer_sizes} vs {b.layer_sizes}")


class ParamVector:
    """Flat, finite, 64-bit parameter (or update) vector bound to a layout"""

    __slots__ = ("_values", "layout")

    def __init__(self, values: Union[Sequence[float], np.ndarray], layout: Optional[LayerLayout] = None):
        array = np.array(values, dtype=np.float64, copy=True).reshape(-1)
        if layout is None:
            layout = LayerLayout.single(array.size)
        if array.size != layout.d:
            raise ContractViolationError(f"vector has {array.size} entries, layout expects {layout.d}")
        if not np.all(np.isfinite(array)):
            bad = int(np.flatnonzero(~np.isfinite(array))[0])
            raise NonFiniteValueError(f"non-finite entry at index {bad}")
        self._values = _frozen(array)
        self.layout = layout

    @classmethod
    def zeros(cls, layout: LayerLayout) -> "ParamVector":
        return cls(np.zeros(layout.d), layout)

    @property
    def values(self) -> FloatArray:
        return self._values

    @property
    def d(self) -> int:
        return self.layout.d

    def layer(self, layer: int) -> FloatArray:
        return self._values[self.layout.layer_slice(layer)]

    def support(self) -> IndexArray:
        return np.flatnonzero(self._values).astype(np.int64)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def __add__(self, other: "ParamVector") -> "ParamVector":
        _check_layout(self.layout, other.layout)
        return ParamVector(self._values + other._values, self.layout)

    def __sub__(self, other: "ParamVector") -> "ParamVector":
        _check_layout(self.layout, other.layout)
        return ParamVector(self._values - other._values, self.layout)

    def __mul__(self, scalar: float) -> "ParamVector":
        return ParamVector(self._values * float(scalar), self.layout)

    __rmul__ = __mul__

    def __neg__(self) -> "ParamVector":
        return ParamVector(-self._values, self.layout)

    def __len__(self) -> int:
        return self.layout.d

    def __repr__(self) -> str:
        return f"<ParamVector(d={self.d}, layers={self.layout.num_layers})>"


class Mask:
    """Binary selector over parameter indices, stored as a sorted index set"""

    __slots__ = ("_indices", "layout")

    def __init__(self, indices: Union[Sequence[int], np.ndarray], layout: LayerLayout):
        array = np.array(indices, dtype=np.int64, copy=True).reshape(-1)
        if array.size:
            if array[0] < 0 or array[-1] >= layout.d:
                raise ContractViolationError(f"mask index outside [0, {layout.d})")
            if np.any(np.diff(array) <= 0):
                raise ContractViolationError("mask indices must be strictly increasing")
        self._indices = _frozen(array)
        self.layout = layout

    @classmethod
    def from_unsorted(cls, indices: Union[Sequence[int], np.ndarray], layout: LayerLayout) -> "Mask":
        return cls(np.unique(np.asarray(indices, dtype=np.int64)), layout)

    @classmethod
    def from_dense(cls, bits: Union[Sequence[int], np.ndarray], layout: LayerLayout) -> "Mask":
        dense = np.asarray(bits).reshape(-1)
        if dense.size != layout.d:
            raise ContractViolationError(f"dense mask has {dense.size} entries, layout expects {layout.d}")
        return cls(np.flatnonzero(dense), layout)

    @classmethod
    def empty(cls, layout: LayerLayout) -> "Mask":
        return cls(np.empty(0, dtype=np.int64), layout)

    @classmethod
    def full(cls, layout: LayerLayout) -> "Mask":
        return cls(np.arange(layout.d, dtype=np.int64), layout)

    @property
    def indices(self) -> IndexArray:
        return self._indices

    @property
    def popcount(self) -> int:
        return int(self._indices.size)

    @property
    def ratio(self) -> float:
        """Sparsification ratio ||m||_1 / d"""
        return self.popcount / self.layout.d

    def to_dense(self) -> np.ndarray:
        dense = np.zeros(self.layout.d, dtype=np.uint8)
        dense[self._indices] = 1
        return dense

    def layer_counts(self) -> IndexArray:
        """Number of selected indices in each layer"""
        return np.bincount(self.layout.layers_of(self._indices), minlength=self.layout.num_layers)

    def __contains__(self, index: int) -> bool:
        pos = np.searchsorted(self._indices, index)
        return bool(pos < self._indices.size and self._indices[pos] == index)

    def __iter__(self) -> Iterator[int]:
        return (int(i) for i in self._indices)

    def __len__(self) -> int:
        return self.popcount

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Mask):
            return NotImplemented
        return self.layout == other.layout and np.array_equal(self._indices, other._indices)

    def __hash__(self) -> int:
        return hash((self.layout, self._indices.tobytes()))

    def __repr__(self) -> str:
        return f"<Mask(popcount={self.popcount}, d={self.layout.d})>"


def apply_mask(v: ParamVector, m: Mask) -> ParamVector:
    """Keep the entries of ``v`` selected by ``m`` and zero the rest.

    Entries are copied or zeroed, never recomputed, so
    ``apply_mask(v, m) + apply_mask(v, mask_complement(m))`` reproduces ``v`` exactly.

    Raises:
        LayoutMismatchError: If ``v`` and ``m`` use different layouts
    """
    _check_layout(v.layout, m.layout)
    out = np.zeros(v.d)
    out[m.indices] = v.values[m.indices]
    return ParamVector(out, v.layout)


def mask_union(a: Mask, b: Mask) -> Mask:
    _check_layout(a.layout, b.layout)
    return Mask(np.union1d(a.indices, b.indices), a.layout)


def mask_complement(a: Mask) -> Mask:
    keep = np.ones(a.layout.d, dtype=bool)
    keep[a.indices] = False
    return Mask(np.flatnonzero(keep), a.layout)


def masks_disjoint(a: Mask, b: Mask) -> bool:
    _check_layout(a.layout, b.layout)
    return np.intersect1d(a.indices, b.indices, assume_unique=True).size == 0


def hamming_distance(a: Mask, b: Mask) -> int:
    """Number of indices selected by exactly one of the two masks"""
    _check_layout(a.layout, b.layout)
    return int(np.setxor1d(a.indices, b.indices, assume_unique=True).size)


def _purpose_code(purpose: str) -> int:
    # builtin hash() is salted per process
    return int.from_bytes(hashlib.blake2b(purpose.encode("utf-8"), digest_size=8).digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Deterministic random stream identified by a root seed and a substream key"""
    root_seed: int
    purpose: str
    client_id: int
    round: int

    def generator(self) -> np.random.Generator:
        """Fresh generator positioned at the start of this stream"""
        seq = np.random.SeedSequence(
            entropy=self.root_seed & _SEED_MASK,
            spawn_key=(_purpose_code(self.purpose), int(self.client_id), int(self.round)),
        )
        return np.random.Generator(np.random.PCG64(seq))


def substream(root_seed: int, purpose: str, client_id: int, round: int) -> RngStream:
    """Independent stream for one (purpose, client, round) key under ``root_seed``"""
    if client_id < 0 or round < 0:
        raise ContractViolationError("client_id and round must be non-negative")
    return RngStream(int(root_seed), purpose, int(client_id), int(round))
