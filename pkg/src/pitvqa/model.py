"""PitVQA-Net: image-grounded text embedding, causal decoder, EB head.

Pipeline for one batch::

    image -> patches -> linear + pos -> encoder blocks            (image features)
    tokens -> embed + pos -> grounded blocks (self + cross-attn)  (grounded text)
    grounded + pos -> causal decoder blocks -> final LN           (hidden states)
    hidden -> excitation block (optional) -> mean pool -> dropout -> linear

Parameters live in a flat ``name -> ndarray`` dict on :class:`PitVQANet`;
batch-norm running statistics are kept apart in ``buffers`` because they
are not trained by gradient descent.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import stream

EB_GATE_SATURATION = 30.0


class ConfigError(ValueError):
    """A configuration violates one of its invariants."""


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_img_layers: int = 2
    n_text_layers: int = 2
    n_decoder_layers: int = 2
    image_size: int = 64
    patch_size: int = 8
    n_channels: int = 3
    max_question_len: int = 16
    vocab_size: int = 128
    n_classes: int = 59
    dropout_p: float = 0.1
    use_eb: bool = True
    seed: int = 0

    def __post_init__(self):
        problems = self.violations()
        if problems:
            raise ConfigError("invalid ModelConfig: " + "; ".join(problems))

    def violations(self) -> list[str]:
        v = []
        for name in ("d_model", "n_heads", "image_size", "patch_size", "max_question_len", "vocab_size"):
            if getattr(self, name) < 1:
                v.append(f"{name} must be >= 1")
        for name in ("n_img_layers", "n_text_layers", "n_decoder_layers"):
            if getattr(self, name) < 0:
                v.append(f"{name} must be >= 0")
        if self.n_heads >= 1 and self.d_model % self.n_heads:
            v.append("d_model must be divisible by n_heads")
        if self.patch_size >= 1 and self.image_size % self.patch_size:
            v.append("image_size must be divisible by patch_size")
        if self.n_channels != 3:
            v.append("n_channels must be 3")
        if self.n_classes < 2:
            v.append("n_classes must be >= 2")
        if not 0.0 <= self.dropout_p < 1.0:
            v.append("dropout_p must lie in [0, 1)")
        return v

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.n_channels * self.patch_size**2

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


PROFILES: dict[str, dict] = {
    "desk": {},
    "paper-faithful": {"n_decoder_layers": 12},
}


def profile_config(name: str, **overrides) -> ModelConfig:
    if name not in PROFILES:
        raise ConfigError(f"unknown profile {name!r}; choose from {sorted(PROFILES)}")
    return ModelConfig(**{**PROFILES[name], **overrides})


@dataclass
class PitVQANet:
    config: ModelConfig
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "PitVQANet":
        return PitVQANet(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.buffers.items()},
        )


def init_parameters(config: ModelConfig) -> PitVQANet:
    """Normal(0, 0.02) weights, zero biases, unit norm scales; seeded by ``config.seed``."""
    rng = stream(config.seed, "init")
    d = config.d_model
    p: dict[str, np.ndarray] = {}
    p.update(att.init_linear(rng, config.patch_dim, d, "img.patch"))
    p["img.pos"] = rng.normal(0.0, 0.02, (config.n_patches, d))
    for i in range(config.n_img_layers):
        p.update(att.init_encoder_block(rng, d, f"img.blocks.{i}"))
    p["txt.tok"] = rng.normal(0.0, 0.02, (config.vocab_size, d))
    p["txt.pos"] = rng.normal(0.0, 0.02, (config.max_question_len, d))
    for i in range(config.n_text_layers):
        p.update(att.init_grounded_block(rng, d, f"txt.blocks.{i}"))
    p["dec.pos"] = rng.normal(0.0, 0.02, (config.max_question_len, d))
    for i in range(config.n_decoder_layers):
        p.update(att.init_decoder_block(rng, d, f"dec.blocks.{i}"))
    p.update(att.init_layer_norm(d, "dec.ln_f"))
    p.update(att.init_linear(rng, d, d, "eb.feat"))
    p.update(att.init_linear(rng, d, d, "eb.gate"))
    p.update(att.init_layer_norm(d, "eb.bn"))
    p.update(att.init_linear(rng, d, config.n_classes, "head"))
    buffers = {"eb.bn.mean": np.zeros(d), "eb.bn.var": np.ones(d)}
    return PitVQANet(config, p, buffers)


def patchify(image, patch_size: int) -> Tensor:
    """Split ``[..., C, H, W]`` into ``[..., N, C*p*p]`` non-overlapping patches.

    Patches are ordered row-major over the grid; inside a patch the values
    are flattened channel-major (channel, then row, then column).
    """
    img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    *lead, c, h, w = img.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"patchify: image {h}x{w} not divisible by patch {p}")
    gh, gw = h // p, w // p
    x = img.reshape(*lead, c, gh, p, gw, p)
    n = len(lead)
    # -> [..., gh, gw, c, p, p]
    x = np.transpose(x, (*range(n), n + 1, n + 3, n, n + 2, n + 4))
    return Tensor(x.reshape(*lead, gh * gw, c * p * p))


def encode_image(images, p: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    x = att.linear(patchify(images, config.patch_size), p["img.patch.w"], p["img.patch.b"])
    x = ad.add(x, p["img.pos"])
    for i in range(config.n_img_layers):
        x = att.encoder_block(x, att.sub_params(p, f"img.blocks.{i}"), config.n_heads)
    return x


def encode_grounded_text(
    token_ids, pad_mask, image_feats: Tensor, p: Mapping[str, Tensor], config: ModelConfig
) -> Tensor:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.shape[-1] > config.max_question_len:
        raise ShapeError(f"question length {ids.shape[-1]} exceeds max_question_len {config.max_question_len}")
    x = ad.embedding_lookup(p["txt.tok"], ids)
    x = ad.add(x, _rows(p["txt.pos"], ids.shape[-1]))
    for i in range(config.n_text_layers):
        x = att.grounded_encoder_block(
            x, image_feats, att.sub_params(p, f"txt.blocks.{i}"), config.n_heads, pad_mask
        )
    return x


def _rows(table: Tensor, n: int) -> Tensor:
    """First ``n`` rows of a position table, differentiably."""
    if n == table.shape[0]:
        return table
    return ad.embedding_lookup(table, np.arange(n))


def decode(grounded: Tensor, p: Mapping[str, Tensor], config: ModelConfig) -> Tensor:
    x = ad.add(grounded, _rows(p["dec.pos"], grounded.shape[-2]))
    for i in range(config.n_decoder_layers):
        x = att.decoder_block(x, att.sub_params(p, f"dec.blocks.{i}"), config.n_heads)
    return ad.layer_norm(x, p["dec.ln_f.g"], p["dec.ln_f.b"], att.LN_EPS)


def excitation_block(
    h: Tensor, p: Mapping[str, Tensor], buffers: dict[str, np.ndarray], training: bool
) -> Tensor:
    """Sigmoid-gated linear features followed by batch normalization.

    ``out = BN(feat * gate)`` with ``feat = h W_feat + b_feat`` and
    ``gate = sigmoid(h W_gate + b_gate)``.  Batch statistics are taken over
    every position of every sequence.  In training mode the running
    statistics in ``buffers`` are replaced by their updated values.
    """
    feat = att.linear(h, p["eb.feat.w"], p["eb.feat.b"])
    gate = ad.sigmoid(att.linear(h, p["eb.gate.w"], p["eb.gate.b"]))
    gated = ad.mul(feat, gate)
    d = gated.shape[-1]
    flat = ad.reshape(gated, (-1, d))
    out, mean, var = ad.batch_norm_1d(
        flat, p["eb.bn.g"], p["eb.bn.b"], buffers["eb.bn.mean"], buffers["eb.bn.var"], training
    )
    if training:
        buffers["eb.bn.mean"], buffers["eb.bn.var"] = mean, var
    return ad.reshape(out, h.shape)


def classify(
    h: Tensor,
    p: Mapping[str, Tensor],
    config: ModelConfig,
    training: bool,
    rng: np.random.Generator | None,
) -> Tensor:
    pooled = ad.reduce_mean(h, axis=-2)
    pooled = ad.dropout(pooled, config.dropout_p, training, rng)
    return att.linear(pooled, p["head.w"], p["head.b"])


def forward_logits(
    net: PitVQANet,
    images,
    token_ids,
    pad_mask,
    training: bool = False,
    rng: np.random.Generator | None = None,
    params: Mapping[str, Tensor] | None = None,
) -> Tensor:
    """Logits ``[batch, n_classes]`` (or ``[n_classes]`` for one unbatched sample).

    ``params`` overrides the tensors built from ``net.params``; training
    passes grad-enabled leaves here.
    """
    cfg = net.config
    p = net.tensors() if params is None else params
    img_feats = encode_image(images, p, cfg)
    text = encode_grounded_text(token_ids, pad_mask, img_feats, p, cfg)
    h = decode(text, p, cfg)
    if cfg.use_eb:
        h = excitation_block(h, p, net.buffers, training)
    return classify(h, p, cfg, training, rng)


def forward(
    net: PitVQANet,
    images,
    token_ids,
    pad_mask,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Answer-class probabilities."""
    return ad.softmax(forward_logits(net, images, token_ids, pad_mask, training, rng), axis=-1)

