"""The guided vision-language model: patch encoder, two-layer adapter, and a
decoder stack with cross-attention interleaved at configured layer indices."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .attention import AttentionConfig, AttentionRecord, CrossAttention, SelfAttention
from .tensor import Parameter, Tensor, ShapeError


@dataclass
class ModelConfig:
    n_layers: int = 16
    d_model: int = 64
    n_heads: int = 4
    vocab_size: int = 64
    cross_attn_indices: tuple = (2, 6, 10, 14)
    image_size: int = 32          # square H = W
    patch_size: int = 4
    encoder_dim: int = 32
    adapter_hidden: int = 64
    mlp_hidden: int = 256
    max_seq_len: int = 32

    def __post_init__(self):
        self.cross_attn_indices = tuple(sorted(self.cross_attn_indices))
        for i in self.cross_attn_indices:
            if not 0 <= i < self.n_layers:
                raise ShapeError(f"cross-attention index {i} outside [0, {self.n_layers})")
        if self.image_size % self.patch_size != 0:
            raise ShapeError("image_size must be a multiple of patch_size")

    @property
    def grid(self) -> tuple[int, int]:
        s = self.image_size // self.patch_size
        return (s, s)

    @property
    def n_visual_tokens(self) -> int:
        h, w = self.grid
        return h * w

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "d_model": self.d_model, "n_heads": self.n_heads,
            "vocab_size": self.vocab_size, "cross_attn_indices": list(self.cross_attn_indices),
            "image_size": self.image_size, "patch_size": self.patch_size,
            "encoder_dim": self.encoder_dim, "adapter_hidden": self.adapter_hidden,
            "mlp_hidden": self.mlp_hidden, "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["cross_attn_indices"] = tuple(d["cross_attn_indices"])
        return cls(**d)


@dataclass
class ImageGrid:
    """Synthetic RGB-like image, channels-first, values in [0, 1]."""

    pixels: np.ndarray  # [3, H, W]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ShapeError(f"image must be [3, H, W], got {self.pixels.shape}")


@dataclass
class VisualTokens:
    tokens: Tensor  # [h*w, d_model]
    grid: tuple[int, int]

    def __post_init__(self):
        h, w = self.grid
        if self.tokens.shape[0] != h * w:
            raise ShapeError(f"visual token count {self.tokens.shape[0]} != grid {h}x{w}")


class LayerNorm:
    def __init__(self, dim: int, name: str):
        self.gain = Parameter(Tensor(np.ones(dim)), f"{name}.gain")
        self.bias = Parameter(Tensor(np.zeros(dim)), f"{name}.bias")

    def parameters(self):
        return [self.gain, self.bias]

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain.value, self.bias.value)


class Mlp:
    def __init__(self, d_in: int, d_hidden: int, name: str, rng: np.random.Generator,
                 zero_out: bool = False):
        self.w1 = Parameter(Tensor(rng.normal(0, 0.02, (d_in, d_hidden))), f"{name}.w1")
        self.b1 = Parameter(Tensor(np.zeros(d_hidden)), f"{name}.b1")
        w2 = np.zeros((d_hidden, d_in)) if zero_out else rng.normal(0, 0.02, (d_hidden, d_in))
        self.w2 = Parameter(Tensor(w2), f"{name}.w2")
        self.b2 = Parameter(Tensor(np.zeros(d_in)), f"{name}.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.gelu(T.add(x @ self.w1.value, self.b1.value)) @ self.w2.value, self.b2.value)


class VisionEncoder:
    """Patch-embedding stand-in for a convolutional backbone.

    Linear patch projection plus learned grid position embeddings, followed
    by a final linear+GELU block (the partially-unfreezable "final block").
    Spatial identity lives here, not in the cross-attention keys.
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        p = config.patch_size
        n = config.n_visual_tokens
        d = config.encoder_dim
        self.config = config
        self.patch_w = Parameter(Tensor(rng.normal(0, 0.05, (3 * p * p, d))), "encoder.patch.w")
        self.patch_b = Parameter(Tensor(np.zeros(d)), "encoder.patch.b")
        self.pos = Parameter(Tensor(rng.normal(0, 0.05, (n, d))), "encoder.pos")
        self.final_w = Parameter(Tensor(rng.normal(0, 0.05, (d, d))), "encoder.final.w")
        self.final_b = Parameter(Tensor(np.zeros(d)), "encoder.final.b")

    def parameters(self):
        return [self.patch_w, self.patch_b, self.pos, self.final_w, self.final_b]

    def patches(self, img: ImageGrid) -> np.ndarray:
        p = self.config.patch_size
        c, hh, ww = img.pixels.shape
        if hh != self.config.image_size or ww != self.config.image_size:
            raise ShapeError(f"image {img.pixels.shape} does not match configured size {self.config.image_size}")
        gh, gw = hh // p, ww // p
        x = img.pixels.reshape(c, gh, p, gw, p)
        x = x.transpose(1, 3, 0, 2, 4).reshape(gh * gw, c * p * p)
        return x

    def __call__(self, img: ImageGrid) -> Tensor:
        x = Tensor(self.patches(img))
        h = T.add(T.add(x @ self.patch_w.value, self.patch_b.value), self.pos.value)
        return T.gelu(T.add(h @ self.final_w.value, self.final_b.value))


class Adapter:
    """Exactly two linear layers with a GELU between, onto d_model."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        e, hid, d = config.encoder_dim, config.adapter_hidden, config.d_model
        self.w1 = Parameter(Tensor(rng.normal(0, 0.05, (e, hid))), "adapter.w1")
        self.b1 = Parameter(Tensor(np.zeros(hid)), "adapter.b1")
        self.w2 = Parameter(Tensor(rng.normal(0, 0.05, (hid, d))), "adapter.w2")
        self.b2 = Parameter(Tensor(np.zeros(d)), "adapter.b2")

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def __call__(self, features: Tensor) -> Tensor:
        h = T.gelu(T.add(features @ self.w1.value, self.b1.value))
        return T.add(h @ self.w2.value, self.b2.value)


class DecoderLayer:
    """Pre-norm decoder layer, optionally carrying a cross-attention block.

    The cross-attention insertion sits after the self-attention residual:
    queries come from that residual stream directly, the block adds its own
    residual and its own LayerNorm+MLP residual, and the layer's standard
    MLP residual runs afterwards. The block's MLP output projection is
    zero-initialized like the attention output so insertion starts inert.
    """

    def __init__(self, index: int, config: ModelConfig, rng: np.random.Generator):
        name = f"layers.{index}"
        attn_cfg = AttentionConfig(config.d_model, config.n_heads)
        self.index = index
        self.ln1 = LayerNorm(config.d_model, f"{name}.ln1")
        self.self_attn = SelfAttention(attn_cfg, f"{name}.self_attn", rng)
        self.has_cross = index in config.cross_attn_indices
        if self.has_cross:
            self.cross_attn = CrossAttention(attn_cfg, f"{name}.cross_attn", rng)
            self.ca_ln = LayerNorm(config.d_model, f"{name}.cross_attn.mlp_ln")
            self.ca_mlp = Mlp(config.d_model, config.mlp_hidden, f"{name}.cross_attn.mlp", rng, zero_out=True)
        self.ln2 = LayerNorm(config.d_model, f"{name}.ln2")
        self.mlp = Mlp(config.d_model, config.mlp_hidden, f"{name}.mlp", rng)

    def parameters(self):
        ps = self.ln1.parameters() + self.self_attn.parameters()
        if self.has_cross:
            ps += self.cross_attn.parameters() + self.ca_ln.parameters() + self.ca_mlp.parameters()
        return ps + self.ln2.parameters() + self.mlp.parameters()

    def __call__(self, h: Tensor, visual: Optional[Tensor]) -> tuple[Tensor, Optional[Tensor]]:
        h = T.add(h, self.self_attn(self.ln1(h)))
        weights = None
        if self.has_cross and visual is not None:
            ca_out, weights = self.cross_attn(h, visual)
            h = T.add(h, ca_out)
            h = T.add(h, self.ca_mlp(self.ca_ln(h)))
        h = T.add(h, self.mlp(self.ln2(h)))
        return h, weights


class Model:
    """Decoder-only LM with interleaved cross-attention over visual tokens."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = VisionEncoder(config, rng)
        self.adapter = Adapter(config, rng)
        self.embed = Parameter(Tensor(rng.normal(0, 0.02, (config.vocab_size, config.d_model))), "embed.tok")
        self.pos_embed = Parameter(Tensor(rng.normal(0, 0.01, (config.max_seq_len, config.d_model))), "embed.pos")
        self.layers = [DecoderLayer(i, config, rng) for i in range(config.n_layers)]
        self.final_ln = LayerNorm(config.d_model, "final_ln")
        self.lm_head = Parameter(Tensor(rng.normal(0, 0.02, (config.d_model, config.vocab_size))), "lm_head.w")

    def parameters(self) -> list[Parameter]:
        ps = self.encoder.parameters() + self.adapter.parameters() + [self.embed, self.pos_embed]
        for layer in self.layers:
            ps += layer.parameters()
        return ps + self.final_ln.parameters() + [self.lm_head]

    def param_dict(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.parameters()}

    def num_params(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def encode_image(self, img: ImageGrid) -> VisualTokens:
        return VisualTokens(self.adapter(self.encoder(img)), self.config.grid)

    def forward(self, token_ids: np.ndarray, visual: Optional[VisualTokens],
                collect_attention: bool = False) -> tuple[Tensor, list[AttentionRecord]]:
        token_ids = np.asarray(token_ids, dtype=np.int64)
        t = token_ids.shape[0]
        if t < 1 or t > self.config.max_seq_len:
            raise ShapeError(f"sequence length {t} outside [1, {self.config.max_seq_len}]")
        vis = None
        if visual is not None:
            vis = visual.tokens
            if vis.shape[0] == 0:
                warnings.warn("empty visual sequence: cross-attention skipped (text-only mode)")
                vis = None
        h = T.add(T.take_rows(self.embed.value, token_ids),
                  T.slice_axis(self.pos_embed.value, 0, 0, t))
        records = []
        for layer in self.layers:
            h, weights = layer(h, vis)
            if collect_attention and weights is not None:
                records.append(AttentionRecord(layer.index, weights))
        logits = self.final_ln(h) @ self.lm_head.value
        return logits, records

    def generate_greedy(self, prompt_ids: np.ndarray, visual: Optional[VisualTokens],
                        max_new: int) -> np.ndarray:
        if max_new < 1:
            raise ValueError("max_new must be >= 1")
        ids = np.asarray(prompt_ids, dtype=np.int64).copy()
        for _ in range(max_new):
            logits, _ = self.forward(ids, visual)
            nxt = int(np.argmax(logits.data[-1]))  # argmax ties break to lowest id
            ids = np.append(ids, nxt)
        return ids

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        params = self.param_dict()
        for name, p in params.items():
            if name not in tensors:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = tensors[name]
            if arr.shape != p.value.data.shape:
                raise ShapeError(f"parameter {name}: checkpoint shape {arr.shape} != model {p.value.data.shape}")
            p.value.data = arr.copy()
        extra = set(tensors) - set(params)
        if extra:
            raise KeyError(f"checkpoint has unknown parameters: {sorted(extra)}")


def expected_param_count(cfg: ModelConfig) -> int:
    """Hand-computed parameter census; must match Model.num_params()."""
    p, e, d, hid = cfg.patch_size, cfg.encoder_dim, cfg.d_model, cfg.mlp_hidden
    n = cfg.n_visual_tokens
    encoder = (3 * p * p) * e + e + n * e + e * e + e
    adapter = e * cfg.adapter_hidden + cfg.adapter_hidden + cfg.adapter_hidden * d + d
    embeds = cfg.vocab_size * d + cfg.max_seq_len * d
    mlp = d * hid + hid + hid * d + d
    ln = 2 * d
    base_layer = ln + 4 * d * d + ln + mlp
    cross_block = 4 * d * d + ln + mlp
    layers = cfg.n_layers * base_layer + len(cfg.cross_attn_indices) * cross_block
    head = ln + d * cfg.vocab_size
    return encoder + adapter + embeds + layers + head
