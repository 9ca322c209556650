"""Mixture-of-experts LoRA adapter: router, Top-K gating, shared and routed experts."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class GateResult:
    indices: np.ndarray  # (..., K) routed expert ids, 1-based
    weights: np.ndarray  # (..., K) gate weights, sum to 1


class MoEAdapter:
    """One layer's adapter: ``sum_i G_i B_i A_i h + sum_shared B_0 A_0 h``.

    Expert ids are 1-based for routed experts to match the shared expert
    being expert 0.  With ``n_shared > 1`` the shared experts occupy the
    first slots of the expert stack.
    """

    def __init__(self, d: int, rank: int, n_routed: int = 8, top_k: int = 2, n_shared: int = 1,
                 rng: np.random.Generator | None = None, router_std: float = 0.02):
        if not 0 < rank < d:
            raise ValueError(f"expert rank must satisfy 0 < r < d, got r={rank}, d={d}")
        if n_routed < 0 or n_shared < 0 or n_routed + n_shared == 0:
            raise ValueError("adapter needs at least one expert")
        if not 0 <= top_k <= n_routed:
            raise ValueError(f"top_k must be in [0, {n_routed}], got {top_k}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.rank = d, rank
        self.n_routed, self.n_shared, self.top_k = n_routed, n_shared, top_k
        n = n_shared + n_routed
        bound = 1.0 / np.sqrt(d)
        # stored transposed so tokens (..., d) @ A -> (..., r)
        self.A = Tensor(rng.uniform(-bound, bound, size=(n, d, rank)), requires_grad=True)
        self.B = Tensor(np.zeros((n, rank, d)), requires_grad=True)
        self.router = Tensor(rng.normal(0.0, router_std, size=(d, max(n_routed, 1))),
                             requires_grad=True)

    @property
    def n_experts(self) -> int:
        return self.n_shared + self.n_routed

    def parameters(self) -> dict[str, Tensor]:
        params = {"A": self.A, "B": self.B}
        if self.n_routed:
            params["router"] = self.router
        return params

    # ------------------------------------------------------------ routing

    def router_logits(self, h) -> Tensor:
        return ag.matmul(h, self.router)

    def route(self, h) -> GateResult:
        """Softmax over the Top-K router logits for token(s) ``h``."""
        h = ag.as_tensor(h)
        squeeze = h.ndim == 1
        if squeeze:
            h = ag.reshape(h, (1, -1))
        if self.top_k == 0 or self.n_routed == 0:
            empty = np.zeros(h.shape[:-1] + (0,))
            result = GateResult(empty.astype(np.int64), empty)
        else:
            gates, idx = self._gates(h)
            result = GateResult(idx + 1, np.take_along_axis(gates.data, idx, axis=-1))
        if squeeze:
            result = GateResult(result.indices[0], result.weights[0])
        return result

    def _gates(self, h: Tensor) -> tuple[Tensor, np.ndarray]:
        """Dense gate tensor (..., n_routed) with zeros off the selected set."""
        logits = self.router_logits(h)
        masked, idx = ag.topk_mask(logits, self.top_k)
        return ag.softmax(masked, axis=-1), idx

    # ------------------------------------------------------------ forward

    def expert_outputs(self, h) -> Tensor:
        """Every expert applied to ``h``: (n_experts, ..., d)."""
        h = ag.as_tensor(h)
        lead = h.shape[:-1]
        out = self._experts(ag.reshape(h, (-1, self.d)))
        return ag.reshape(out, (self.n_experts,) + lead + (self.d,))

    def _experts(self, x: Tensor) -> Tensor:
        n, r = self.n_experts, self.rank
        a_flat = ag.reshape(ag.transpose(self.A, (1, 0, 2)), (self.d, n * r))
        low = ag.reshape(ag.matmul(x, a_flat), (x.shape[0], n, r))
        return ag.matmul(ag.transpose(low, (1, 0, 2)), self.B)  # (n, N, d)

    def forward(self, h, tracker: "LoadTracker | None" = None, tag: str = "") -> Tensor:
        """Adapter output for tokens ``h`` of shape (..., d)."""
        h = ag.as_tensor(h)
        lead = h.shape[:-1]
        x = ag.reshape(h, (-1, self.d))
        experts = self._experts(x)
        out = None
        if self.n_shared:
            out = ag.tsum(experts[: self.n_shared], axis=0)
        if self.n_routed and self.top_k:
            gates, idx = self._gates(x)
            if tracker is not None:
                tracker.record(tag, idx + 1, self.n_routed)
            g = ag.reshape(ag.transpose(gates), (self.n_routed, x.shape[0], 1))
            mix = ag.tsum(ag.mul(g, experts[self.n_shared:]), axis=0)
            out = mix if out is None else ag.add(out, mix)
        if out is None:
            return ag.Tensor(np.zeros(h.shape))
        return ag.reshape(out, lead + (self.d,))

    __call__ = forward

    def single_expert(self, h, i: int) -> Tensor:
        """Output of expert ``i`` alone (0-based over the full stack)."""
        a = self.A[i]
        b = self.B[i]
        return ag.matmul(ag.matmul(ag.as_tensor(h), a), b)


def adapter_forward(adapter: MoEAdapter, h) -> Tensor:
    return adapter.forward(h)


def route(adapter: MoEAdapter, h) -> GateResult:
    return adapter.route(h)


class LoadTracker:
    """Counts token-to-expert assignments per tag (e.g. layer/domain)."""

    def __init__(self):
        self.counts: dict[str, np.ndarray] = {}

    def record(self, tag: str, indices: np.ndarray, n_routed: int) -> None:
        c = np.bincount(np.asarray(indices).reshape(-1) - 1, minlength=n_routed).astype(np.int64)
        if tag in self.counts:
            self.counts[tag] = self.counts[tag] + c
        else:
            self.counts[tag] = c

    def shares(self, tag: str) -> np.ndarray:
        return load_shares(self.counts[tag])


def load_shares(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        raise ValueError("no token-expert assignments recorded")
    return counts / total


def load_stats(adapter: MoEAdapter, tokens) -> np.ndarray:
    """Per-routed-expert share of token-expert assignments for a token batch."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.size == 0:
        raise ValueError("load_stats needs a non-empty token batch")
    if adapter.n_routed == 0 or adapter.top_k == 0:
        raise ValueError("adapter has no routed experts to load")
    tokens = tokens.reshape(-1, adapter.d)
    gate = adapter.route(tokens)
    counts = np.bincount(gate.indices.reshape(-1) - 1, minlength=adapter.n_routed)
    return load_shares(counts)
