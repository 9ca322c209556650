"""Scoring and losses: composition softmax, text-to-image primitive scores,
variant affinities and hard selection, image-to-text primitive losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

MODES = ("renormalized", "literal")


@dataclass
class AffinityBundle:
    A_s: np.ndarray
    A_o: np.ndarray
    A_v: np.ndarray
    alpha: float

    @property
    def A_S(self) -> np.ndarray:
        return self.A_s + self.alpha * self.A_v

    @property
    def A_O(self) -> np.ndarray:
        return self.A_o + self.alpha * self.A_v

    @property
    def selected_state_idx(self) -> np.ndarray:
        return np.argmax(self.A_S, axis=-1)

    @property
    def selected_object_idx(self) -> np.ndarray:
        return np.argmax(self.A_O, axis=-1)


@dataclass
class ScoreTable:
    comp_logits: Tensor
    comp_probs: Tensor
    state_scores: Tensor
    object_scores: Tensor


# ---------------------------------------------------------------- composition


def composition_logits(f_c, t_c, tau: float) -> Tensor:
    t_c = ag.as_tensor(t_c)
    if t_c.shape[0] == 0:
        raise ValueError("composition target space is empty")
    return ag.scale(ag.as_tensor(f_c) @ ag.transpose(t_c), 1.0 / tau)


def composition_probs(f_c, t_c, tau: float) -> Tensor:
    return ag.softmax(composition_logits(f_c, t_c, tau), axis=-1)


def nll(log_probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    picked = log_probs[np.arange(len(labels)), labels]
    return ag.neg(ag.mean(picked))


def loss_composition(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy of composition logits (log-sum-exp form)."""
    return nll(ag.log_softmax(logits, axis=-1), labels)


# ---------------------------------------------------------------- text-to-image


def primitive_groups(pairs, n_primitives: int, which: int) -> np.ndarray:
    """Index matrix (n_primitives, G): compositions containing each primitive.

    Rows are padded with ``len(pairs)``, which points at a padding column.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    members = [np.flatnonzero(pairs[:, which] == p) for p in range(n_primitives)]
    width = max(1, max((len(m) for m in members), default=1))
    out = np.full((n_primitives, width), len(pairs), dtype=np.int64)
    for p, m in enumerate(members):
        out[p, : len(m)] = m
    return out


def group_max(scores: Tensor, groups: np.ndarray, pad: float) -> Tensor:
    """Per-row max of ``scores`` over each group of columns."""
    scores = ag.as_tensor(scores)
    padcol = Tensor(np.full((scores.shape[0], 1), pad))
    padded = ag.concat([scores, padcol], axis=1)
    return ag.tmax(ag.take(padded, groups, axis=1), axis=-1)


def _t2i(comp_logits: Tensor, groups: np.ndarray, temp: Tensor, mode: str) -> tuple[Tensor, Tensor]:
    """Returns (scores, log scores) for one primitive family."""
    if mode == "literal":
        probs = ag.softmax(comp_logits, axis=-1)
        scores = ag.mul(group_max(probs, groups, 0.0), temp)
        return scores, ag.log(scores)
    if mode == "renormalized":
        n_cols = comp_logits.shape[1]
        empty = np.all(groups == n_cols, axis=1)
        # absent primitives pool a real column and are masked to -inf afterwards,
        # so no -inf ever meets the temperature product (its gradient stays finite)
        safe = np.where(empty[:, None], 0, groups)
        logits = ag.mul(group_max(comp_logits, safe, -np.inf), temp)
        if empty.any():
            logits = logits + np.where(empty, -np.inf, 0.0)
        return ag.softmax(logits, axis=-1), ag.log_softmax(logits, axis=-1)
    raise ValueError(f"unknown t2i mode {mode!r}; expected one of {MODES}")


def t2i_state_scores(comp_logits, pairs, n_states: int, tau_s, mode: str = "renormalized",
                     log: bool = False) -> Tensor:
    """Image-state scores from the best matching composition per state.

    literal: ``tau_s * max_o p_c(s, o)``.  renormalized: softmax over
    states of ``tau_s * max_o logit(s, o)``.
    """
    groups = primitive_groups(pairs, n_states, 0)
    scores, logs = _t2i(ag.as_tensor(comp_logits), groups, ag.as_tensor(tau_s), mode)
    return logs if log else scores


def t2i_object_scores(comp_logits, pairs, n_objects: int, tau_o, mode: str = "renormalized",
                      log: bool = False) -> Tensor:
    groups = primitive_groups(pairs, n_objects, 1)
    scores, logs = _t2i(ag.as_tensor(comp_logits), groups, ag.as_tensor(tau_o), mode)
    return logs if log else scores


def loss_t2i(state_log_scores: Tensor, object_log_scores: Tensor, state_labels,
             object_labels) -> tuple[Tensor, Tensor]:
    return nll(state_log_scores, state_labels), nll(object_log_scores, object_labels)


# ---------------------------------------------------------------- image-to-text


def variant_affinities(V, t_s, t_o, f_c, alpha: float = 0.5) -> AffinityBundle:
    """Per-sample affinities of each variant to its label texts and to the global feature.

    ``V`` is (B, n, d); ``t_s``, ``t_o``, ``f_c`` are (B, d).
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    V = _arr(V)
    A_s = np.einsum("bnd,bd->bn", V, _arr(t_s))
    A_o = np.einsum("bnd,bd->bn", V, _arr(t_o))
    A_v = np.einsum("bnd,bd->bn", V, _arr(f_c))
    return AffinityBundle(A_s, A_o, A_v, alpha)


def select_variants(bundle: AffinityBundle, V: Tensor) -> tuple[Tensor, Tensor]:
    """Hard selection of the best variant row per sample (ties -> lowest index)."""
    V = ag.as_tensor(V)
    rows = np.arange(V.shape[0])
    return V[rows, bundle.selected_state_idx], V[rows, bundle.selected_object_idx]


def loss_i2t(f_s, f_o, state_feats, object_feats, state_labels, object_labels,
             tau: float) -> tuple[Tensor, Tensor]:
    ls = ag.log_softmax(composition_logits(f_s, state_feats, tau), axis=-1)
    lo = ag.log_softmax(composition_logits(f_o, object_feats, tau), axis=-1)
    return nll(ls, state_labels), nll(lo, object_labels)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
