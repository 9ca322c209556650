"""The full dual-encoder model and its parameter registry."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoders import EncoderConfig, EncoderOutput, ImageEncoder, PromptBank, TextEncoder
from .moe import LoadTracker

SOFTPLUS_INV_ONE = float(np.log(np.expm1(1.0)))


class EVAModel:
    """Image/text encoders with MoE adapters, prompt bank and primitive temperatures.

    Random streams are split so that configurations differing only in
    adapter settings share the same frozen base and prompt initialisation
    for a given seed.
    """

    def __init__(self, cfg: EncoderConfig, n_states: int, n_objects: int, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.n_states, self.n_objects = n_states, n_objects
        base_img = np.random.default_rng([seed, 0])
        base_txt = np.random.default_rng([seed, 1])
        prompt_rng = np.random.default_rng([seed, 2])
        adapt_img = np.random.default_rng([seed, 3])
        adapt_txt = np.random.default_rng([seed, 4])
        self.image = ImageEncoder(cfg, base_img, adapt_img)
        self.text = TextEncoder(cfg, base_txt, adapt_txt)
        self.prompts = PromptBank(cfg, n_states, n_objects, prompt_rng)
        self.tau_s_raw = Tensor(np.array(SOFTPLUS_INV_ONE), requires_grad=True)
        self.tau_o_raw = Tensor(np.array(SOFTPLUS_INV_ONE), requires_grad=True)

    # ------------------------------------------------------------ registry

    def named_parameters(self) -> dict[str, Tensor]:
        """Every tensor in a fixed order; trainability is ``requires_grad``."""
        out: dict[str, Tensor] = {}
        for prefix, enc in (("image", self.image), ("text", self.text)):
            for name, t in enc.frozen().items():
                out[f"{prefix}.{name}"] = t
            for j, layer in enumerate(enc.layers):
                if layer.adapter is not None:
                    for name, t in layer.adapter.parameters().items():
                        out[f"{prefix}.layer{j}.adapter.{name}"] = t
        for name, t in self.prompts.parameters().items():
            out[f"prompts.{name}"] = t
        out["tau_s_raw"] = self.tau_s_raw
        out["tau_o_raw"] = self.tau_o_raw
        return out

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if v.requires_grad}

    def frozen(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters().items() if not v.requires_grad}

    def adapters(self):
        for prefix, enc in (("image", self.image), ("text", self.text)):
            for j, layer in enumerate(enc.layers):
                if layer.adapter is not None:
                    yield f"{prefix}.layer{j}", layer.adapter

    # ------------------------------------------------------------ features

    @property
    def tau_s(self) -> Tensor:
        return ag.softplus(self.tau_s_raw)

    @property
    def tau_o(self) -> Tensor:
        return ag.softplus(self.tau_o_raw)

    def encode_image(self, x, use_adapters: bool = True, with_variants: bool = True,
                     tracker: LoadTracker | None = None) -> EncoderOutput:
        return self.image.encode(x, use_adapters, with_variants, tracker)

    def encode_text(self, prompt: Tensor, use_adapters: bool = True,
                    tracker: LoadTracker | None = None, tag: str = "text") -> Tensor:
        return self.text.encode(prompt, use_adapters, tracker, tag)

    def composition_features(self, pairs: Sequence[tuple[int, int]], use_adapters: bool = True,
                             tracker: LoadTracker | None = None) -> Tensor:
        return self.encode_text(self.prompts.composition(pairs), use_adapters, tracker, "comp")

    def state_features(self, ids=None, use_adapters: bool = True,
                       tracker: LoadTracker | None = None) -> Tensor:
        return self.encode_text(self.prompts.states(ids), use_adapters, tracker, "state")

    def object_features(self, ids=None, use_adapters: bool = True,
                        tracker: LoadTracker | None = None) -> Tensor:
        return self.encode_text(self.prompts.objects(ids), use_adapters, tracker, "object")
