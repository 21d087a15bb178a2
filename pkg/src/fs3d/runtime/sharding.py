"""Flat parameter sharding across the fully-sharded dimension."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..model import ParameterStore


@dataclass(frozen=True)
class SegmentLayout:
    name: str
    shape: tuple
    size: int
    padded: int
    n_shards: int = 1

    @property
    def shard_size(self) -> int:
        return self.padded // self.n_shards

    def bounds(self, k: int) -> tuple[int, int]:
        s = self.padded // self.n_shards
        return k * s, (k + 1) * s


@dataclass(frozen=True)
class ShardLayout:
    n_shards: int
    segments: tuple

    def segment(self, name: str) -> SegmentLayout:
        for s in self.segments:
            if s.name == name:
                return s
        raise KeyError(name)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.segments]

    def to_dict(self) -> dict:
        return {"n_shards": self.n_shards,
                "segments": [[s.name, list(s.shape), s.size, s.padded] for s in self.segments]}

    @classmethod
    def from_dict(cls, d) -> "ShardLayout":
        n = int(d["n_shards"])
        return cls(n, tuple(SegmentLayout(name, tuple(shape), int(size), int(padded), n)
                            for name, shape, size, padded in d["segments"]))


def make_layout(store: ParameterStore, n_shards: int) -> ShardLayout:
    if n_shards < 1:
        raise ValueError("fs_size must be >= 1")
    segs = []
    for name, arr in store.items():
        size = int(arr.size)
        padded = -(-size // n_shards) * n_shards
        segs.append(SegmentLayout(name, tuple(arr.shape), size, padded, n_shards))
    return ShardLayout(n_shards, tuple(segs))


def shard_segment(arr: np.ndarray, seg: SegmentLayout, k: int) -> np.ndarray:
    flat = np.zeros(seg.padded, dtype=arr.dtype)
    flat[:seg.size] = arr.reshape(-1)
    lo, hi = seg.bounds(k)
    return flat[lo:hi].copy()


def shard_parameters(store: ParameterStore, n_shards: int, k: int | None = None):
    """Return the layout and either one rank's shards or all ranks' shards."""
    layout = make_layout(store, n_shards)
    if k is not None:
        return layout, {s.name: shard_segment(store[s.name], s, k) for s in layout.segments}
    return layout, [{s.name: shard_segment(store[s.name], s, r) for s in layout.segments}
                    for r in range(n_shards)]


def unshard_segment(parts: list[np.ndarray], seg: SegmentLayout) -> np.ndarray:
    return np.concatenate(parts)[:seg.size].reshape(seg.shape)


def unshard(layout: ShardLayout, shards: list[dict]) -> ParameterStore:
    return ParameterStore({s.name: unshard_segment([sh[s.name] for sh in shards], s)
                           for s in layout.segments})
