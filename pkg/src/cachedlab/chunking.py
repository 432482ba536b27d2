from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class ChunkPlan:
    """Split of an L-token document into K non-overlapping spans of nominal size C.

    The last span is short when C does not divide L, so no token is dropped.
    """

    L: int
    C: int
    spans: tuple[tuple[int, int], ...]

    @property
    def K(self) -> int:
        return len(self.spans)

    def lengths(self) -> list[int]:
        return [e - s for s, e in self.spans]


def make_chunk_plan(L: int, C: int) -> ChunkPlan:
    if L < 1 or C < 1:
        raise ValueError(f"document length and chunk size must be positive, got L={L}, C={C}")
    spans = tuple((s, min(s + C, L)) for s in range(0, L, C))
    return ChunkPlan(L, C, spans)
