"""Total objective, Adam with decoupled weight decay, and the training loop."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import alignment
from . import autograd as ag
from .autograd import Tensor
from .checkpoint import Checkpoint
from .dataset import CZSLDataset
from .encoders import EncoderConfig
from .evaluator import calibration_sweep, score_images
from .model import EVAModel

log = logging.getLogger(__name__)

# The reference learning rate (1e-4) was tuned for a pretrained backbone; the
# small randomly initialised encoders here need a larger step to move the
# prompts within 20 epochs.
MICRO_LR = 1e-3


@dataclass
class TrainConfig:
    lambda1: float = 0.5
    lambda2: float = 0.1
    alpha: float = 0.5
    beta: float = 0.5
    tau: float = 0.01
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    t2i_mode: str = "renormalized"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")
        if self.t2i_mode not in alignment.MODES:
            raise ValueError(f"t2i_mode must be one of {alignment.MODES}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def micro(cls, **overrides) -> "TrainConfig":
        """Defaults for the desk-scale synthetic benchmark."""
        overrides.setdefault("lr", MICRO_LR)
        return cls(**overrides)

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        return cls(**dict(d))


# ---------------------------------------------------------------- objective


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict[str, float]


def total_loss(model: EVAModel, tokens: np.ndarray, states, objects, seen_pairs,
               cfg: TrainConfig) -> LossBreakdown:
    """L = L_c + lambda1 (L_s + L_o) + lambda2 (L_s^v + L_o^v) on one batch."""
    states = np.asarray(states, dtype=np.int64)
    objects = np.asarray(objects, dtype=np.int64)
    index = {tuple(p): i for i, p in enumerate(seen_pairs)}
    try:
        labels = np.array([index[(int(s), int(o))] for s, o in zip(states, objects)])
    except KeyError as exc:
        raise ValueError(f"training label {exc.args[0]} is not a seen composition") from None

    img = model.encode_image(tokens, with_variants=True)
    t_c = model.composition_features(seen_pairs)
    t_s = model.state_features()
    t_o = model.object_features()

    logits = alignment.composition_logits(img.global_, t_c, cfg.tau)
    l_c = alignment.loss_composition(logits, labels)

    log_ps = alignment.t2i_state_scores(logits, seen_pairs, model.n_states, model.tau_s,
                                        cfg.t2i_mode, log=True)
    log_po = alignment.t2i_object_scores(logits, seen_pairs, model.n_objects, model.tau_o,
                                         cfg.t2i_mode, log=True)
    l_s, l_o = alignment.loss_t2i(log_ps, log_po, states, objects)

    bundle = alignment.variant_affinities(img.variants, t_s.data[states], t_o.data[objects],
                                          img.global_, cfg.alpha)
    f_s, f_o = alignment.select_variants(bundle, img.variants)
    l_sv, l_ov = alignment.loss_i2t(f_s, f_o, t_s, t_o, states, objects, cfg.tau)

    total = l_c + (l_s + l_o) * cfg.lambda1 + (l_sv + l_ov) * cfg.lambda2
    comps = {"L_c": l_c.item(), "L_s": l_s.item(), "L_o": l_o.item(),
             "L_s_v": l_sv.item(), "L_o_v": l_ov.item()}
    return LossBreakdown(total, comps)


def weighted_sum(components: Mapping[str, float], lambda1: float, lambda2: float) -> float:
    return (components["L_c"] + lambda1 * (components["L_s"] + components["L_o"])
            + lambda2 * (components["L_s_v"] + components["L_o_v"]))


# ---------------------------------------------------------------- optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999),
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam update with decoupled weight decay, in place.

    Only tensors with ``requires_grad`` are touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        if not p.requires_grad or name not in grads:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    model: EVAModel
    checkpoint: Checkpoint
    history: list[dict]
    best_epoch: int


def build_model(cfg: TrainConfig, n_states: int, n_objects: int) -> EVAModel:
    return EVAModel(cfg.encoder, n_states, n_objects, seed=cfg.seed)


def validation_auc(model: EVAModel, dataset: CZSLDataset, cfg: TrainConfig) -> dict:
    space = dataset.label_space("val", "closed")
    tokens, states, objects = dataset.phase("val")
    out = score_images(model, tokens, space, cfg.beta, cfg.tau, cfg.t2i_mode)
    sweep = calibration_sweep(out["scores"], states, objects, space)
    return {"val_auc": sweep.auc, "val_best_seen": sweep.best_seen,
            "val_best_unseen": sweep.best_unseen, "val_best_hm": sweep.best_hm}


def train(cfg: TrainConfig, dataset: CZSLDataset, log_path=None, echo: bool = False,
          validate: bool = True) -> TrainResult:
    """Train on the seen split; keep the parameters with the best validation AUC.

    One JSON object per epoch goes to ``log_path`` (and stdout when ``echo``).
    """
    model = build_model(cfg, dataset.n_states, dataset.n_objects)
    params = model.trainable()
    state = AdamState()
    seen_pairs = dataset.train_pairs
    x, s, o = dataset.phase("train")
    n = len(s)
    history: list[dict] = []
    best = Checkpoint.from_model(model, cfg.to_dict(), epoch=0)
    best_auc, best_epoch = -np.inf, 0
    fh = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, 100, epoch]).permutation(n)
            sums: dict[str, float] = {}
            batches = 0
            for i in range(0, n, cfg.batch_size):
                idx = order[i: i + cfg.batch_size]
                out = total_loss(model, x[idx], s[idx], o[idx], seen_pairs, cfg)
                if not np.isfinite(out.total.item()):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch}")
                grads = ag.grad(out.total, params)
                adam_step(params, grads, state, cfg.lr, cfg.weight_decay)
                for k, v in out.components.items():
                    sums[k] = sums.get(k, 0.0) + v
                sums["loss"] = sums.get("loss", 0.0) + out.total.item()
                batches += 1
            entry = {"epoch": epoch, **{k: v / batches for k, v in sums.items()}}
            if validate:
                entry.update(validation_auc(model, dataset, cfg))
                score = entry["val_auc"]
            else:
                score = -entry["loss"]
            if score > best_auc:
                best_auc, best_epoch = score, epoch
                best = Checkpoint.from_model(model, cfg.to_dict(), epoch=epoch)
            history.append(entry)
            line = json.dumps(entry)
            if fh:
                fh.write(line + "\n")
                fh.flush()
            if echo:
                print(line, file=sys.stdout, flush=True)
            log.info(line)
    finally:
        if fh:
            fh.close()
    best.load_into(model)
    return TrainResult(model, best, history, best_epoch)


def model_from_checkpoint(ckpt: Checkpoint, n_states: int | None = None,
                          n_objects: int | None = None) -> tuple[EVAModel, TrainConfig]:
    cfg = TrainConfig.from_dict(ckpt.config["train"] if "train" in ckpt.config else ckpt.config)
    dims = ckpt.config.get("label_space", {})
    n_states = n_states if n_states is not None else dims.get("n_states")
    n_objects = n_objects if n_objects is not None else dims.get("n_objects")
    if n_states is None or n_objects is None:
        shapes = {name: shape for name, shape, _ in ckpt.manifest}
        n_states = shapes["prompts.state_emb"][0]
        n_objects = shapes["prompts.object_emb"][0]
    model = build_model(cfg, n_states, n_objects)
    ckpt.load_into(model)
    return model, cfg


def save_history(history: list[dict], path) -> None:
    Path(path).write_text("".join(json.dumps(h) + "\n" for h in history))
