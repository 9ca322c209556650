"""Closed/open-world composition label spaces."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Pair = tuple[int, int]


@dataclass
class LabelSpace:
    """States, objects and the seen/unseen composition sets.

    ``target`` is the active prediction space: seen then unseen pairs in
    closed world, the full S x O product (state-major) in open world,
    optionally reduced by :meth:`restrict`.
    """

    n_states: int
    n_objects: int
    seen: list[Pair]
    unseen: list[Pair]
    mode: str = "closed"
    target: list[Pair] = field(default=None)  # type: ignore[assignment]
    state_names: list[str] | None = None
    object_names: list[str] | None = None

    def __post_init__(self):
        if self.mode not in ("closed", "open"):
            raise ValueError(f"mode must be 'closed' or 'open', got {self.mode!r}")
        self.seen = [tuple(map(int, p)) for p in self.seen]
        self.unseen = [tuple(map(int, p)) for p in self.unseen]
        overlap = set(self.seen) & set(self.unseen)
        if overlap:
            raise ValueError(f"seen and unseen compositions overlap: {sorted(overlap)[:5]}")
        for s, o in self.seen + self.unseen:
            if not (0 <= s < self.n_states and 0 <= o < self.n_objects):
                raise ValueError(f"composition ({s}, {o}) outside the primitive inventories")
        if self.target is None:
            if self.mode == "closed":
                self.target = self.seen + self.unseen
            else:
                self.target = [(s, o) for s in range(self.n_states) for o in range(self.n_objects)]
        self.target = [tuple(map(int, p)) for p in self.target]
        self.index = {p: i for i, p in enumerate(self.target)}
        seen = set(self.seen)
        self.seen_mask = np.array([p in seen for p in self.target], dtype=bool)

    @property
    def pairs(self) -> np.ndarray:
        return np.asarray(self.target, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return len(self.target)

    def with_mode(self, mode: str) -> "LabelSpace":
        return LabelSpace(self.n_states, self.n_objects, self.seen, self.unseen, mode,
                          state_names=self.state_names, object_names=self.object_names)

    def restrict(self, keep: Sequence[bool]) -> "LabelSpace":
        """Drop target compositions where ``keep`` is false (seen ones always stay)."""
        keep = np.asarray(keep, dtype=bool) | self.seen_mask
        target = [p for p, k in zip(self.target, keep) if k]
        return LabelSpace(self.n_states, self.n_objects, self.seen, self.unseen, self.mode,
                          target=target, state_names=self.state_names,
                          object_names=self.object_names)

    def name(self, pair: Pair) -> str:
        s, o = pair
        sn = self.state_names[s] if self.state_names else f"s{s}"
        on = self.object_names[o] if self.object_names else f"o{o}"
        return f"{sn} {on}"
