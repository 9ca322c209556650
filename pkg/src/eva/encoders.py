"""Tiny frozen transformer encoders for images and text, with MoE adapter hooks.

Layer wiring (pre-norm, adapter parallel to the FFN)::

    u     = h + Attn(LN(h))
    h_out = u + FFN(LN(u)) + MoE(LN(u))

The base weights are seeded random draws standing in for a pretrained
backbone; they are created with ``requires_grad=False`` and never updated.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .moe import LoadTracker, MoEAdapter

PREFIX_WORDS = ("a", "photo", "of")


@dataclass
class EncoderConfig:
    depth: int = 2
    d: int = 64
    heads: int = 4
    d_joint: int = 32
    seq_len_image: int = 17
    prefix_len: int = 3
    d_in: int = 16
    ffn_mult: int = 4
    rank: int = 8
    n_routed: int = 8
    n_shared: int = 1
    top_k: int = 2
    use_adapters: bool = True

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.d_joint > self.d:
            raise ValueError(f"d_joint={self.d_joint} exceeds d={self.d}")
        if self.prefix_len < 1:
            raise ValueError("prefix_len must be at least 1")
        if self.seq_len_image < 2:
            raise ValueError("seq_len_image counts the CLS token and needs at least one patch")

    @property
    def n_patches(self) -> int:
        return self.seq_len_image - 1

    @property
    def n_variants(self) -> int:
        return self.n_shared + self.n_routed

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    global_: Tensor        # (B, d_joint), unit rows
    variants: Tensor | None = None  # (B, n_variants, d_joint), unit rows


def _normal(rng, shape, std):
    return Tensor(rng.normal(0.0, std, size=shape))


def attention(x: Tensor, wq, wk, wv, wo, heads: int, causal: bool = False) -> Tensor:
    b, t, d = x.shape
    dh = d // heads

    def split(y):
        return ag.transpose(ag.reshape(y, (b, t, heads, dh)), (0, 2, 1, 3))

    q, k, v = split(x @ wq), split(x @ wk), split(x @ wv)
    scores = ag.scale(q @ ag.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
    if causal:
        mask = np.triu(np.full((t, t), -np.inf), k=1)
        scores = scores + mask
    att = ag.softmax(scores, axis=-1)
    ctx = ag.reshape(ag.transpose(att @ v, (0, 2, 1, 3)), (b, t, d))
    return ctx @ wo


class TransformerLayer:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 adapter_rng: np.random.Generator | None = None, causal: bool = False):
        d, hidden = cfg.d, cfg.ffn_mult * cfg.d
        self.heads, self.causal = cfg.heads, causal
        s = 1.0 / np.sqrt(d)
        self.wq, self.wk, self.wv, self.wo = (_normal(rng, (d, d), s) for _ in range(4))
        self.w1 = _normal(rng, (d, hidden), s)
        self.w2 = _normal(rng, (hidden, d), 1.0 / np.sqrt(hidden))
        self.adapter: MoEAdapter | None = None
        if cfg.use_adapters:
            self.adapter = MoEAdapter(d, cfg.rank, cfg.n_routed, cfg.top_k, cfg.n_shared,
                                      rng=adapter_rng)

    def frozen(self) -> dict[str, Tensor]:
        return {"wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo,
                "w1": self.w1, "w2": self.w2}

    def ffn(self, x) -> Tensor:
        return ag.gelu(x @ self.w1) @ self.w2

    def forward(self, h: Tensor, use_adapter: bool = True, tracker: LoadTracker | None = None,
                tag: str = "") -> tuple[Tensor, Tensor, Tensor]:
        """Returns (output, post-attention state u, LN(u))."""
        u = h + attention(ag.layer_norm(h), self.wq, self.wk, self.wv, self.wo,
                          self.heads, self.causal)
        n = ag.layer_norm(u)
        out = u + self.ffn(n)
        if use_adapter and self.adapter is not None:
            out = out + self.adapter(n, tracker=tracker, tag=tag)
        return out, u, n


class ImageEncoder:
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 adapter_rng: np.random.Generator | None = None):
        self.cfg = cfg
        d = cfg.d
        self.patch_proj = _normal(rng, (cfg.d_in, d), 1.0 / np.sqrt(cfg.d_in))
        self.cls = _normal(rng, (1, 1, d), 1.0)
        self.pos = _normal(rng, (cfg.seq_len_image, d), 0.1)
        self.layers = [TransformerLayer(cfg, rng, adapter_rng) for _ in range(cfg.depth)]
        self.proj = _normal(rng, (d, cfg.d_joint), 1.0 / np.sqrt(d))

    def frozen(self) -> dict[str, Tensor]:
        out = {"patch_proj": self.patch_proj, "cls": self.cls, "pos": self.pos, "proj": self.proj}
        for j, layer in enumerate(self.layers):
            out.update({f"layer{j}.{k}": v for k, v in layer.frozen().items()})
        return out

    def _project(self, h: Tensor) -> Tensor:
        return ag.l2_normalize(ag.layer_norm(h) @ self.proj)

    def encode(self, x, use_adapters: bool = True, with_variants: bool = True,
               tracker: LoadTracker | None = None) -> EncoderOutput:
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.cfg.n_patches, self.cfg.d_in):
            raise ag.ShapeError(
                f"encode_image: expected patches of shape ({self.cfg.n_patches}, {self.cfg.d_in}),"
                f" got {x.shape[1:]}")
        b = x.shape[0]
        patches = Tensor(x) @ self.patch_proj
        cls = ag.add(Tensor(np.zeros((b, 1, self.cfg.d))), self.cls)
        h = ag.concat([cls, patches], axis=1) + self.pos
        u = n = None
        for j, layer in enumerate(self.layers):
            h, u, n = layer.forward(h, use_adapters, tracker, f"image.layer{j}")
        cls_h = h[:, 0, :]
        out = EncoderOutput(self._project(cls_h))
        if with_variants:
            out.variants = self.variant_extract(self.layers[-1], u[:, 0, :], n[:, 0, :],
                                                use_adapters)
        return out

    def variant_extract(self, layer: TransformerLayer, u_cls: Tensor, n_cls: Tensor,
                        use_adapters: bool = True) -> Tensor:
        """One feature per expert: the CLS mixture replaced by that expert alone."""
        residual = u_cls + layer.ffn(n_cls)                              # (B, d)
        k = self.cfg.n_variants
        if layer.adapter is None or not use_adapters:
            h = ag.add(Tensor(np.zeros((residual.shape[0], k, self.cfg.d))),
                       ag.reshape(residual, (residual.shape[0], 1, self.cfg.d)))
        else:
            experts = layer.adapter.expert_outputs(n_cls)                # (k, B, d)
            h = ag.transpose(experts + residual, (1, 0, 2))               # (B, k, d)
        return self._project(h)


class TextEncoder:
    """Causal encoder over prompt embeddings; the feature is read at an end token."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator,
                 adapter_rng: np.random.Generator | None = None):
        self.cfg = cfg
        d = cfg.d
        self.max_len = cfg.prefix_len + 3
        self.pos = _normal(rng, (self.max_len, d), 0.1)
        self.eot = _normal(rng, (1, 1, d), 1.0)
        self.layers = [TransformerLayer(cfg, rng, adapter_rng, causal=True)
                       for _ in range(cfg.depth)]
        self.proj = _normal(rng, (d, cfg.d_joint), 1.0 / np.sqrt(d))

    def frozen(self) -> dict[str, Tensor]:
        out = {"pos": self.pos, "eot": self.eot, "proj": self.proj}
        for j, layer in enumerate(self.layers):
            out.update({f"layer{j}.{k}": v for k, v in layer.frozen().items()})
        return out

    def encode(self, prompt: Tensor, use_adapters: bool = True,
               tracker: LoadTracker | None = None, tag: str = "text") -> Tensor:
        """Encode prompt embeddings (N, L, d) to unit features (N, d_joint)."""
        n, length, d = prompt.shape
        eot = ag.add(Tensor(np.zeros((n, 1, d))), self.eot)
        h = ag.concat([prompt, eot], axis=1)
        if h.shape[1] > self.max_len:
            raise ag.ShapeError(f"encode_text: prompt of length {length} exceeds {self.max_len - 1}")
        h = h + self.pos[: h.shape[1]]
        for j, layer in enumerate(self.layers):
            h, _, _ = layer.forward(h, use_adapters, tracker, f"{tag}.layer{j}")
        return ag.l2_normalize(ag.layer_norm(h[:, -1, :]) @ self.proj)


class PromptBank:
    """Learnable prefixes for the three prompt families plus shared primitive embeddings."""

    def __init__(self, cfg: EncoderConfig, n_states: int, n_objects: int,
                 rng: np.random.Generator):
        self.n_states, self.n_objects = n_states, n_objects
        words = rng.normal(0.0, 1.0, size=(len(PREFIX_WORDS), cfg.d))
        init = np.resize(words, (cfg.prefix_len, cfg.d))
        self.prefix_c = Tensor(init.copy(), requires_grad=True)
        self.prefix_s = Tensor(init.copy(), requires_grad=True)
        self.prefix_o = Tensor(init.copy(), requires_grad=True)
        self.state_emb = Tensor(rng.normal(0.0, 1.0, size=(n_states, cfg.d)), requires_grad=True)
        self.object_emb = Tensor(rng.normal(0.0, 1.0, size=(n_objects, cfg.d)), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {"prefix_c": self.prefix_c, "prefix_s": self.prefix_s, "prefix_o": self.prefix_o,
                "state_emb": self.state_emb, "object_emb": self.object_emb}

    def _check(self, ids, n, kind):
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= n):
            raise IndexError(f"unknown {kind} id in {ids.tolist()} (have {n})")
        return ids

    @staticmethod
    def _tile(prefix: Tensor, n: int) -> Tensor:
        return ag.add(Tensor(np.zeros((n,) + prefix.shape)), prefix)

    def composition(self, pairs: Sequence[tuple[int, int]]) -> Tensor:
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        s = self._check(pairs[:, 0], self.n_states, "state")
        o = self._check(pairs[:, 1], self.n_objects, "object")
        n = len(pairs)
        return ag.concat([self._tile(self.prefix_c, n),
                          ag.reshape(ag.take(self.state_emb, s), (n, 1, -1)),
                          ag.reshape(ag.take(self.object_emb, o), (n, 1, -1))], axis=1)

    def states(self, ids=None) -> Tensor:
        ids = self._check(np.arange(self.n_states) if ids is None else ids, self.n_states, "state")
        n = len(ids)
        return ag.concat([self._tile(self.prefix_s, n),
                          ag.reshape(ag.take(self.state_emb, ids), (n, 1, -1))], axis=1)

    def objects(self, ids=None) -> Tensor:
        ids = self._check(np.arange(self.n_objects) if ids is None else ids, self.n_objects,
                          "object")
        n = len(ids)
        return ag.concat([self._tile(self.prefix_o, n),
                          ag.reshape(ag.take(self.object_emb, ids), (n, 1, -1))], axis=1)
