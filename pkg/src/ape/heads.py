"""Trainable alignment functions over frozen embeddings.

Two text-side heads: a weight-tied MLP applied independently to every token
position (masked-mean pooled, then L2-normalized) and a token-lookup
baseline that averages learned table rows. The image side defaults to
identity + normalization, with an optional MLP for ablations. A learnable
log-scale temperature completes the trainable set; the frozen input
embeddings never receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .tensor import Tape, Tensor, affine, embedding_mean, gelu, masked_mean, normalize_rows

TEMPERATURE_INIT = math.log(1.0 / 0.07)  # ~2.6593
TEMPERATURE_MAX_SCALE = 100.0

MIN_LAYERS, MAX_LAYERS = 1, 8


@dataclass(frozen=True)
class HeadConfig:
    kind: str                 # "mlp" | "lookup"
    d_tok: int
    d_img: int
    d_out: int = 0            # 0 -> d_img
    layers: int = 4
    hidden: int = 0           # 0 -> 2 * d_tok
    vocab_size: int = 0       # lookup only
    image_layers: int = 0     # 0 -> identity image side
    image_hidden: int = 0     # 0 -> 2 * d_img
    temperature_init: float = TEMPERATURE_INIT
    temperature_max: float = TEMPERATURE_MAX_SCALE

    def __post_init__(self):
        if self.kind not in ("mlp", "lookup"):
            raise ConfigError(f"unknown head kind {self.kind!r}")
        # layers = 0 is a countable identity config; construction requires >= 1
        if self.kind == "mlp" and not (0 <= self.layers <= MAX_LAYERS):
            raise ConfigError(f"mlp layers must be in [0, {MAX_LAYERS}], got {self.layers}")
        if self.kind == "lookup" and self.vocab_size < 1:
            raise ConfigError("lookup head needs a positive vocab_size")
        if self.image_layers and not (MIN_LAYERS <= self.image_layers <= MAX_LAYERS):
            raise ConfigError(f"image head layers must be in [{MIN_LAYERS}, {MAX_LAYERS}]")

    @property
    def out_dim(self) -> int:
        return self.d_out or self.d_img

    def text_widths(self) -> list[int]:
        if self.layers == 0:
            return [self.d_tok]
        h = self.hidden or 2 * self.d_tok
        return [self.d_tok] + [h] * (self.layers - 1) + [self.out_dim]

    def image_widths(self) -> list[int]:
        h = self.image_hidden or 2 * self.d_img
        return [self.d_img] + [h] * (self.image_layers - 1) + [self.out_dim]


class MlpHead:
    """Weight-tied MLP: the same layers applied to every input row/position.

    Activation sits between layers, never after the final one, so a single
    identity-weighted layer is an exact identity map.
    """

    def __init__(self, widths: list[int], prefix: str, rng: np.random.Generator | None = None):
        if len(widths) < 2:
            raise ConfigError(f"MLP needs at least one layer, got widths {widths}")
        self.widths = list(widths)
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        n_layers = len(widths) - 1
        for i, (w_in, w_out) in enumerate(zip(widths[:-1], widths[1:])):
            if rng is None:
                w = np.zeros((w_in, w_out))
            else:
                bound = math.sqrt(3.0 / w_in)  # uniform with variance 1/fan_in
                if i == n_layers - 1:
                    bound *= 0.1  # start the output near the pooled-identity regime
                w = rng.uniform(-bound, bound, size=(w_in, w_out))
            self.weights.append(Tensor(w, requires_grad=True, name=f"{prefix}.{i}.w"))
            self.biases.append(Tensor(np.zeros(w_out), requires_grad=True, name=f"{prefix}.{i}.b"))

    @classmethod
    def identity(cls, dim: int, prefix: str = "text") -> "MlpHead":
        head = cls([dim, dim], prefix)
        head.weights[0].data[...] = np.eye(dim, dtype=head.weights[0].data.dtype)
        return head

    def __call__(self, x: Tensor, tape: Tape | None = None) -> Tensor:
        out = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out = affine(out, w, b, tape)
            if i != last:
                out = gelu(out, tape)
        return out

    def parameters(self):
        for w, b in zip(self.weights, self.biases):
            yield w
            yield b

    def param_count(self) -> int:
        return sum(w_in * w_out + w_out for w_in, w_out in zip(self.widths[:-1], self.widths[1:]))


class LookupHead:
    """Learned per-token embedding table, sequence embedding = mean of rows."""

    def __init__(self, vocab_size: int, d_out: int, rng: np.random.Generator | None = None):
        if vocab_size < 1 or d_out < 1:
            raise ConfigError(f"invalid lookup table shape ({vocab_size}, {d_out})")
        bound = math.sqrt(3.0 / d_out)
        data = np.zeros((vocab_size, d_out)) if rng is None else rng.uniform(
            -bound, bound, size=(vocab_size, d_out)
        )
        self.table = Tensor(data, requires_grad=True, name="table")

    def __call__(self, flat_ids, offsets, tape: Tape | None = None) -> Tensor:
        return embedding_mean(self.table, flat_ids, offsets, tape)

    def parameters(self):
        yield self.table

    def param_count(self) -> int:
        v, d = self.table.data.shape
        return v * d


class AlignmentHead:
    """Everything trainable: text head, optional image head, temperature."""

    def __init__(self, config: HeadConfig, seed: int = 0):
        self.config = config
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 917])))
        self.text_mlp: MlpHead | None = None
        self.lookup: LookupHead | None = None
        if config.kind == "mlp":
            self.text_mlp = MlpHead(config.text_widths(), "text", rng)
        else:
            self.lookup = LookupHead(config.vocab_size, config.out_dim, rng)
        self.image_mlp: MlpHead | None = None
        if config.image_layers:
            self.image_mlp = MlpHead(config.image_widths(), "image", rng)
        elif config.d_img != config.out_dim:
            raise ConfigError(
                f"image side is identity but d_img {config.d_img} != d_out {config.out_dim}"
            )
        self.log_scale = Tensor(np.asarray(config.temperature_init), requires_grad=True,
                                name="log_scale")
        self.clamp_temperature()

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        if self.text_mlp is not None:
            params.extend(self.text_mlp.parameters())
        if self.lookup is not None:
            params.extend(self.lookup.parameters())
        if self.image_mlp is not None:
            params.extend(self.image_mlp.parameters())
        params.append(self.log_scale)
        return params

    def named_parameters(self) -> dict[str, Tensor]:
        return {p.name: p for p in self.parameters()}

    def scale(self) -> float:
        return float(np.exp(self.log_scale.data.item()))

    def clamp_temperature(self):
        limit = math.log(self.config.temperature_max)
        if self.log_scale.data.item() > limit:
            self.log_scale.data = np.asarray(limit, dtype=self.log_scale.data.dtype)

    def embed_text(self, tokens, mask, flat_ids, offsets, tape: Tape | None = None) -> Tensor:
        """Unit-norm text embeddings for a batch.

        MLP path: per-token MLP, masked mean over valid positions, normalize.
        Lookup path: mean of table rows for each sample's token ids, normalize.
        """
        if self.lookup is not None:
            return normalize_rows(self.lookup(flat_ids, offsets, tape), tape)
        x = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
        return normalize_rows(masked_mean(self.text_mlp(x, tape), mask, tape), tape)

    def embed_image(self, images, tape: Tape | None = None) -> Tensor:
        """Unit-norm image embeddings; identity path only normalizes."""
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.data.ndim != 2:
            raise ConfigError(f"image batch must be (B, d_img), got {x.data.shape}")
        if self.image_mlp is None:
            if x.data.shape[1] != self.config.out_dim:
                raise ConfigError(
                    f"image dim {x.data.shape[1]} != output dim {self.config.out_dim}"
                    " and the image head is disabled"
                )
            return normalize_rows(x, tape)
        return normalize_rows(self.image_mlp(x, tape), tape)

    def embed_batch(self, batch, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
        txt = self.embed_text(batch.tokens, batch.mask, batch.token_ids, batch.token_offsets, tape)
        img = self.embed_image(batch.images, tape)
        return img, txt


def mlp_param_count(widths: list[int]) -> int:
    return sum(w_in * w_out + w_out for w_in, w_out in zip(widths[:-1], widths[1:]))


def count_params(config: HeadConfig, text_tower_params: int = 0) -> dict:
    """Exact per-component parameter counts and the head/text-tower ratio."""
    if config.kind == "mlp":
        text = mlp_param_count(config.text_widths())
    else:
        text = config.vocab_size * config.out_dim
    image = mlp_param_count(config.image_widths()) if config.image_layers else 0
    counts = {
        "text_head": text,
        "image_head": image,
        "temperature": 1,
        "total": text + image + 1,
    }
    if text_tower_params > 0:
        counts["text_tower"] = text_tower_params
        counts["text_head_ratio"] = text / text_tower_params
    return counts
