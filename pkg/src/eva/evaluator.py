"""Inference scores, calibration-bias sweep and Seen/Unseen/AUC/HM metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import alignment
from . import autograd as ag
from .labels import LabelSpace, Pair

__all__ = [
    "LabelSpace", "SweepResult", "combine_scores", "score_images", "predict",
    "calibration_sweep", "feasibility_filter", "evaluate", "write_report",
]


@dataclass
class SweepResult:
    biases: np.ndarray
    seen_acc: np.ndarray
    unseen_acc: np.ndarray
    auc: float
    best_hm: float

    @property
    def best_seen(self) -> float:
        return float(self.seen_acc.max())

    @property
    def best_unseen(self) -> float:
        return float(self.unseen_acc.max())

    def curve(self) -> list[list[float]]:
        return [[float(b), float(s), float(u)]
                for b, s, u in zip(self.biases, self.seen_acc, self.unseen_acc)]


# ---------------------------------------------------------------- scoring


def combine_scores(p_c: np.ndarray, p_s: np.ndarray, p_o: np.ndarray, pairs,
                   beta: float = 0.5) -> np.ndarray:
    """score(c) = p_c(c) + beta * (p_s(s_c) + p_o(o_c)) for every target composition."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return p_c + beta * (p_s[:, pairs[:, 0]] + p_o[:, pairs[:, 1]])


def score_images(model, tokens: np.ndarray, space: LabelSpace, beta: float = 0.5,
                 tau: float = 0.01, t2i_mode: str = "renormalized", batch_size: int = 256,
                 with_features: bool = False) -> dict:
    """Composition, state, object and combined scores over ``space.target``."""
    pairs = space.pairs
    t_c = model.composition_features(pairs)
    tau_s, tau_o = model.tau_s, model.tau_o
    p_c, p_s, p_o, feats = [], [], [], []
    for i in range(0, len(tokens), batch_size):
        f = model.encode_image(tokens[i: i + batch_size], with_variants=False).global_
        logits = alignment.composition_logits(f, t_c, tau)
        p_c.append(ag.softmax(logits, axis=-1).data)
        p_s.append(alignment.t2i_state_scores(logits, pairs, space.n_states, tau_s, t2i_mode).data)
        p_o.append(alignment.t2i_object_scores(logits, pairs, space.n_objects, tau_o, t2i_mode).data)
        if with_features:
            feats.append(f.data)
    p_c, p_s, p_o = (np.concatenate(a) for a in (p_c, p_s, p_o))
    out = {"comp_probs": p_c, "state_scores": p_s, "object_scores": p_o,
           "scores": combine_scores(p_c, p_s, p_o, pairs, beta)}
    if with_features:
        out["features"] = np.concatenate(feats)
    return out


def predict(scores: np.ndarray, space: LabelSpace, topk: int = 3) -> list[list[Pair]]:
    """Top-k target compositions per row of a combined score matrix."""
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :topk]
    return [[space.target[j] for j in row] for row in order]


# ---------------------------------------------------------------- calibration sweep


def truth_indices(space: LabelSpace, states, objects) -> np.ndarray:
    """Target index of each true pair, -1 when the pair is outside the target space."""
    return np.array([space.index.get((int(s), int(o)), -1) for s, o in zip(states, objects)],
                    dtype=np.int64)


def calibration_sweep(scores: np.ndarray, states, objects, space: LabelSpace) -> SweepResult:
    """Sweep a bias added to unseen-composition scores from -inf to +inf.

    A sample switches to its best unseen composition once the bias reaches
    its gap (best seen score minus best unseen score), so the seen/unseen
    accuracies are step functions whose steps sit exactly at the gaps.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = truth_indices(space, states, objects)
    seen_set = set(space.seen)
    seen_img = np.array([(int(s), int(o)) in seen_set for s, o in zip(states, objects)])
    if not seen_img.any():
        raise ValueError("calibration_sweep: the seen-image subset is empty")
    if seen_img.all():
        raise ValueError("calibration_sweep: the unseen-image subset is empty")
    cols = np.arange(scores.shape[1])
    seen_cols, unseen_cols = cols[space.seen_mask], cols[~space.seen_mask]

    def best(c):
        if len(c) == 0:
            return np.full(len(scores), -np.inf), np.full(len(scores), -1)
        sub = scores[:, c]
        j = np.argmax(sub, axis=1)
        return sub[np.arange(len(sub)), j], c[j]

    max_seen, arg_seen = best(seen_cols)
    max_unseen, arg_unseen = best(unseen_cols)
    gap = max_seen - max_unseen
    right_if_seen = arg_seen == truth
    right_if_unseen = arg_unseen == truth

    finite = np.unique(gap[np.isfinite(gap)])
    biases = np.concatenate([[-np.inf], finite, [np.inf]])
    # switched[k, i]: sample i predicts its unseen best at bias k
    switched = biases[:, None] >= gap[None, :]
    correct = np.where(switched, right_if_unseen[None, :], right_if_seen[None, :])
    seen_acc = correct[:, seen_img].mean(axis=1)
    unseen_acc = correct[:, ~seen_img].mean(axis=1)

    auc = float(np.sum(np.diff(unseen_acc) * (seen_acc[1:] + seen_acc[:-1]) / 2.0))
    denom = seen_acc + unseen_acc
    hm = np.divide(2 * seen_acc * unseen_acc, denom, out=np.zeros_like(denom), where=denom > 0)
    return SweepResult(biases, seen_acc, unseen_acc, auc, float(hm.max()))


# ---------------------------------------------------------------- open world


def feasibility_scores(space: LabelSpace, state_feats: np.ndarray,
                       object_feats: np.ndarray) -> np.ndarray:
    """Similarity of each target pair to the seen contexts of its primitives.

    Object side: best cosine between the pair's object and any object seen
    with its state; state side symmetric; the score is their mean.
    """
    t_s = state_feats / np.linalg.norm(state_feats, axis=1, keepdims=True)
    t_o = object_feats / np.linalg.norm(object_feats, axis=1, keepdims=True)
    obj_sim, st_sim = t_o @ t_o.T, t_s @ t_s.T
    seen_objs = {s: [] for s in range(space.n_states)}
    seen_states = {o: [] for o in range(space.n_objects)}
    for s, o in space.seen:
        seen_objs[s].append(o)
        seen_states[o].append(s)
    out = np.empty(len(space.target))
    for j, (s, o) in enumerate(space.target):
        a = obj_sim[o, seen_objs[s]].max() if seen_objs[s] else -1.0
        b = st_sim[s, seen_states[o]].max() if seen_states[o] else -1.0
        out[j] = 0.5 * (a + b)
    return out


def feasibility_filter(space: LabelSpace, state_feats, object_feats,
                       threshold: float = -1.0) -> LabelSpace:
    """Keep compositions whose feasibility score is >= threshold (seen pairs always kept)."""
    if not -1.0 <= threshold <= 1.0:
        raise ValueError(f"feasibility threshold must lie in [-1, 1], got {threshold}")
    if threshold <= -1.0:
        return space
    feas = feasibility_scores(space, np.asarray(state_feats), np.asarray(object_feats))
    return space.restrict(feas >= threshold)


# ---------------------------------------------------------------- reports


def evaluate(model, dataset, mode: str = "closed", phase: str = "test", beta: float = 0.5,
             tau: float = 0.01, t2i_mode: str = "renormalized", threshold: float = -1.0,
             topk: int = 3) -> dict:
    """Metrics report for one phase of a dataset in closed or open world."""
    if mode not in ("closed", "open"):
        raise ValueError(f"mode must be 'closed' or 'open', got {mode!r}")
    space = dataset.label_space(phase, mode)
    if space.n_states != model.n_states or space.n_objects != model.n_objects:
        raise ValueError(
            f"label space is {space.n_states}x{space.n_objects} but the model was built for "
            f"{model.n_states}x{model.n_objects}")
    if mode == "open" and threshold > -1.0:
        space = feasibility_filter(space, model.state_features().data,
                                   model.object_features().data, threshold)
    tokens, states, objects = dataset.phase(phase)
    out = score_images(model, tokens, space, beta, tau, t2i_mode)
    sweep = calibration_sweep(out["scores"], states, objects, space)
    top = predict(out["scores"], space, topk)
    return {
        "mode": mode,
        "phase": phase,
        "target_size": len(space),
        "best_seen": sweep.best_seen,
        "best_unseen": sweep.best_unseen,
        "auc": sweep.auc,
        "best_hm": sweep.best_hm,
        "curve": sweep.curve(),
        "top_predictions": [
            {"truth": space.name((int(s), int(o))), "top": [space.name(p) for p in row]}
            for s, o, row in zip(states, objects, top)
        ],
    }


def _json_safe(x):
    if isinstance(x, float) and not np.isfinite(x):
        return "inf" if x > 0 else "-inf"
    if isinstance(x, list):
        return [_json_safe(v) for v in x]
    if isinstance(x, dict):
        return {k: _json_safe(v) for k, v in x.items()}
    return x


def write_report(report: dict, out_dir, stem: str | None = None) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and the curve as ``<stem>_curve.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = stem or f"metrics_{report['mode']}"
    jpath, cpath = out / f"{stem}.json", out / f"{stem}_curve.csv"
    jpath.write_text(json.dumps(_json_safe(report), indent=1))
    with open(cpath, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bias", "seen", "unseen"])
        w.writerows(report["curve"])
    return jpath, cpath


def dump_predictions(report: dict, path) -> None:
    with open(path, "w") as fh:
        for row in report["top_predictions"]:
            fh.write(f"{row['truth']}\t" + "\t".join(row["top"]) + "\n")


def metrics_only(report: dict, keys: Sequence[str] = ("best_seen", "best_unseen", "auc",
                                                      "best_hm")) -> dict:
    return {k: report[k] for k in keys}
