"""Anatomical landmark graphs and their attention masks.

Hand indexing follows the common 21-point convention: 0 is the wrist, then
four joints per finger from base to tip, thumb (1-4) through pinky (17-20).
The 75-point layout stacks 33 pose landmarks, the left hand and the right
hand, in that order.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FINGER_BASES = (1, 5, 9, 13, 17)
WRIST = 0
POSE_COUNT = 33
HAND_COUNT = 21
LEFT_HAND_OFFSET = POSE_COUNT
RIGHT_HAND_OFFSET = POSE_COUNT + HAND_COUNT
POSE_LEFT_WRIST = 15
POSE_RIGHT_WRIST = 16

# 33-point body topology; the face (0-8), mouth (9-10) and torso groups are
# joined through nose-mouth and mouth-shoulder links so the body is one piece.
POSE_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 7), (0, 4), (4, 5), (5, 6), (6, 8), (9, 10),
    (0, 9), (0, 10), (9, 11), (10, 12),
    (11, 12), (11, 13), (13, 15), (15, 17), (15, 19), (15, 21), (17, 19),
    (12, 14), (14, 16), (16, 18), (16, 20), (16, 22), (18, 20),
    (11, 23), (12, 24), (23, 24), (23, 25), (24, 26), (25, 27), (26, 28),
    (27, 29), (28, 30), (29, 31), (30, 32), (27, 31), (28, 32),
)


class LayoutKind(enum.Enum):
    DominantHand21 = "DominantHand21"
    PoseHands75 = "PoseHands75"


@dataclass(frozen=True)
class LandmarkLayout:
    kind: LayoutKind
    node_count: int
    coord_dims: int = 3

    def __post_init__(self):
        expected = 21 if self.kind is LayoutKind.DominantHand21 else 75
        if self.node_count != expected:
            raise ValueError(f"{self.kind.value} has {expected} nodes, got {self.node_count}")
        if self.coord_dims != 3:
            raise ValueError("landmarks carry exactly 3 coordinates")

    @classmethod
    def from_name(cls, name: str) -> "LandmarkLayout":
        kind = LayoutKind(name)
        return cls(kind, 21 if kind is LayoutKind.DominantHand21 else 75)


DOMINANT_HAND = LandmarkLayout(LayoutKind.DominantHand21, 21)
POSE_HANDS = LandmarkLayout(LayoutKind.PoseHands75, 75)


@dataclass(frozen=True)
class AnatomicalGraph:
    node_count: int
    edges: tuple[tuple[int, int], ...]
    mask: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def from_edges(cls, node_count: int, edges) -> "AnatomicalGraph":
        canon = []
        seen = set()
        for i, j in edges:
            if not (0 <= i < node_count and 0 <= j < node_count) or i == j:
                raise ValueError(f"bad edge ({i}, {j}) for {node_count} nodes")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            canon.append(key)
        mask = np.eye(node_count, dtype=bool)
        for i, j in canon:
            mask[i, j] = mask[j, i] = True
        mask.setflags(write=False)
        return cls(node_count, tuple(canon), mask)

    def degrees(self) -> np.ndarray:
        deg = np.zeros(self.node_count, dtype=int)
        for i, j in self.edges:
            deg[i] += 1
            deg[j] += 1
        return deg

    def is_connected(self) -> bool:
        adj = [[] for _ in range(self.node_count)]
        for i, j in self.edges:
            adj[i].append(j)
            adj[j].append(i)
        seen = {0}
        frontier = [0]
        while frontier:
            nxt = []
            for n in frontier:
                for m in adj[n]:
                    if m not in seen:
                        seen.add(m)
                        nxt.append(m)
            frontier = nxt
        return len(seen) == self.node_count

    def to_edge_list(self) -> str:
        return "".join(f"{i} {j}\n" for i, j in self.edges)

    def write_edge_list(self, path) -> None:
        Path(path).write_text(self.to_edge_list())


def hand_edges(offset: int = 0) -> list[tuple[int, int]]:
    """Finger chains, wrist-to-base palm links and the two functional pairs.

    The wrist-to-base palm links coincide with the first link of each finger
    chain, so they add no new edges; the union has 22 edges.
    """
    edges = []
    for base in FINGER_BASES:
        chain = (WRIST, base, base + 1, base + 2, base + 3)
        edges.extend(zip(chain[:-1], chain[1:]))
    palm = [(WRIST, base) for base in FINGER_BASES[1:]]
    functional = [(5, 9), (13, 17)]
    out, seen = [], set()
    for i, j in edges + palm + functional:
        key = (min(i, j) + offset, max(i, j) + offset)
        if key not in seen:
            seen.add(key)
            out.append(key)
    return out


def build_hand_graph(layout: LandmarkLayout = DOMINANT_HAND) -> AnatomicalGraph:
    if layout.kind is not LayoutKind.DominantHand21:
        raise ValueError("build_hand_graph expects the 21-landmark hand layout")
    return AnatomicalGraph.from_edges(HAND_COUNT, hand_edges())


def build_holistic_graph(layout: LandmarkLayout = POSE_HANDS) -> AnatomicalGraph:
    if layout.kind is not LayoutKind.PoseHands75:
        raise ValueError("build_holistic_graph expects the 75-landmark layout")
    edges = list(POSE_EDGES)
    edges += hand_edges(LEFT_HAND_OFFSET)
    edges += hand_edges(RIGHT_HAND_OFFSET)
    edges += [(POSE_LEFT_WRIST, LEFT_HAND_OFFSET + WRIST), (POSE_RIGHT_WRIST, RIGHT_HAND_OFFSET + WRIST)]
    return AnatomicalGraph.from_edges(75, edges)


def build_graph(layout: LandmarkLayout) -> AnatomicalGraph:
    if layout.kind is LayoutKind.DominantHand21:
        return build_hand_graph(layout)
    return build_holistic_graph(layout)
