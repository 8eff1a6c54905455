"""Attention kernels and pre-norm transformer blocks.

Block parameters are passed as flat mappings from short names (``"q.w"``,
``"ln1.g"``, ...) to tensors.  Every function accepts optional leading
batch axes in front of the ``[length, d_model]`` sequence axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MASK_FILL = -1e30
LN_EPS = 1e-5

Params = Mapping[str, Tensor]


class MaskError(ValueError):
    """A query row has no attendable key."""


@dataclass(frozen=True)
class AttentionConfig:
    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class MaskSpec:
    """``kind`` is ``"none"``, ``"causal"`` or ``"padding"``.

    For padding, ``padding_mask`` is True on attendable key positions, shape
    ``[Lk]`` or ``[batch, Lk]``.
    """

    kind: str = "none"
    padding_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("none", "causal", "padding"):
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if self.kind == "padding" and self.padding_mask is None:
            raise ValueError("padding mask kind needs padding_mask")

    def allowed(self, lq: int, lk: int) -> np.ndarray | None:
        """Boolean array broadcastable to ``[..., heads, Lq, Lk]``, or None."""
        if self.kind == "none":
            return None
        if self.kind == "causal":
            return np.arange(lk)[None, :] <= np.arange(lq)[:, None]
        pm = np.asarray(self.padding_mask, dtype=bool)
        if pm.shape[-1] != lk:
            raise ShapeError(f"padding mask length {pm.shape[-1]} != key length {lk}")
        return pm if pm.ndim == 1 else pm[..., None, None, :]


NO_MASK = MaskSpec()
CAUSAL = MaskSpec("causal")


def attention_weights(q: Tensor, k: Tensor, mask: MaskSpec = NO_MASK) -> Tensor:
    """``softmax(q k^T / sqrt(d_k))`` with masked logits pushed to -1e30."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    nd = k.ndim
    kt = ad.transpose(k, (*range(nd - 2), nd - 1, nd - 2))
    scores = ad.scale(ad.matmul(q, kt), 1.0 / math.sqrt(q.shape[-1]))
    allowed = mask.allowed(q.shape[-2], k.shape[-2])
    if allowed is not None:
        full = np.broadcast_to(allowed, scores.shape)
        if not full.any(axis=-1).all():
            raise MaskError("attention: a query row has every key masked")
        scores = ad.where_mask(scores, full, MASK_FILL)
    return ad.softmax(scores, axis=-1)


def scaled_dot_product_attention(
    q: Tensor, k: Tensor, v: Tensor, mask: MaskSpec = NO_MASK
) -> Tensor:
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys but {v.shape[-2]} values")
    return ad.matmul(attention_weights(q, k, mask), v)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    if x.ndim == 1:
        return ad.reshape(linear(ad.reshape(x, (1, x.shape[0])), w, b), (w.shape[1],))
    return ad.add(ad.matmul(x, w), b)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    *lead, length, d = x.shape
    x = ad.reshape(x, (*lead, length, n_heads, d // n_heads))
    n = len(lead)
    return ad.transpose(x, (*range(n), n + 1, n, n + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, length, dk = x.shape
    n = len(lead)
    x = ad.transpose(x, (*range(n), n + 1, n, n + 2))
    return ad.reshape(x, (*lead, length, h * dk))


def multi_head_attention(
    x_q: Tensor, x_kv: Tensor, p: Params, n_heads: int, mask: MaskSpec = NO_MASK
) -> Tensor:
    """Project, attend per head, concatenate heads, project back.

    The key projection has no bias: a shared shift of every key adds the
    same logit to each key of a query row, which softmax cancels.

    ``x_kv`` is ``x_q`` for self-attention and the image features for
    cross-attention.
    """
    d = p["q.w"].shape[0]
    if x_q.shape[-1] != d or x_kv.shape[-1] != d:
        raise ShapeError(f"multi_head_attention: inputs {x_q.shape}/{x_kv.shape}, d_model {d}")
    AttentionConfig(d, n_heads)
    q = _split_heads(linear(x_q, p["q.w"], p["q.b"]), n_heads)
    k = _split_heads(ad.matmul(x_kv, p["k.w"]), n_heads)
    v = _split_heads(linear(x_kv, p["v.w"], p["v.b"]), n_heads)
    heads = scaled_dot_product_attention(q, k, v, mask)
    return linear(_merge_heads(heads), p["o.w"], p["o.b"])


def feed_forward(x: Tensor, p: Params) -> Tensor:
    return linear(ad.gelu(linear(x, p["fc1.w"], p["fc1.b"])), p["fc2.w"], p["fc2.b"])


def _ln(x: Tensor, p: Params, name: str) -> Tensor:
    return ad.layer_norm(x, p[name + ".g"], p[name + ".b"], LN_EPS)


def encoder_block(x: Tensor, p: Params, n_heads: int, mask: MaskSpec = NO_MASK) -> Tensor:
    """Pre-norm self-attention block: ``x + MHA(LN(x))`` then ``+ FFN(LN(.))``."""
    h = _ln(x, p, "ln1")
    x = ad.add(x, multi_head_attention(h, h, sub_params(p, "attn"), n_heads, mask))
    return ad.add(x, feed_forward(_ln(x, p, "ln2"), sub_params(p, "mlp")))


def decoder_block(x: Tensor, p: Params, n_heads: int) -> Tensor:
    return encoder_block(x, p, n_heads, CAUSAL)


def grounded_encoder_block(
    x_text: Tensor, x_img: Tensor, p: Params, n_heads: int, pad_mask: np.ndarray | None = None
) -> Tensor:
    """Text self-attention, then text-to-image cross-attention, then FFN.

    Queries of the cross-attention come from the text stream; keys and values
    from ``x_img``.  Each sublayer is a pre-norm residual.
    """
    mask = NO_MASK if pad_mask is None else MaskSpec("padding", pad_mask)
    h = _ln(x_text, p, "ln1")
    x = ad.add(x_text, multi_head_attention(h, h, sub_params(p, "attn"), n_heads, mask))
    x = ad.add(x, multi_head_attention(_ln(x, p, "ln2"), x_img, sub_params(p, "xattn"), n_heads))
    return ad.add(x, feed_forward(_ln(x, p, "ln3"), sub_params(p, "mlp")))


def sub_params(p: Params, prefix: str) -> dict[str, Tensor]:
    """Entries of ``p`` under ``prefix.``, with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in p.items() if k.startswith(prefix + ".")}


# parameter initialisation ------------------------------------------------


def _normal(rng: np.random.Generator, *shape: int, std: float = 0.02) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


def init_layer_norm(d: int, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.g": np.ones(d), f"{prefix}.b": np.zeros(d)}


def init_linear(rng: np.random.Generator, d_in: int, d_out: int, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.w": _normal(rng, d_in, d_out), f"{prefix}.b": np.zeros(d_out)}


def init_mha(rng: np.random.Generator, d: int, prefix: str) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    for proj in ("q", "k", "v", "o"):
        out.update(init_linear(rng, d, d, f"{prefix}.{proj}"))
    del out[f"{prefix}.k.b"]
    return out


def init_ffn(rng: np.random.Generator, d: int, prefix: str, mult: int = 4) -> dict[str, np.ndarray]:
    return {
        **init_linear(rng, d, mult * d, f"{prefix}.fc1"),
        **init_linear(rng, mult * d, d, f"{prefix}.fc2"),
    }


def init_encoder_block(rng: np.random.Generator, d: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        **init_layer_norm(d, f"{prefix}.ln1"),
        **init_mha(rng, d, f"{prefix}.attn"),
        **init_layer_norm(d, f"{prefix}.ln2"),
        **init_ffn(rng, d, f"{prefix}.mlp"),
    }


init_decoder_block = init_encoder_block


def init_grounded_block(rng: np.random.Generator, d: int, prefix: str) -> dict[str, np.ndarray]:
    return {
        **init_layer_norm(d, f"{prefix}.ln1"),
        **init_mha(rng, d, f"{prefix}.attn"),
        **init_layer_norm(d, f"{prefix}.ln2"),
        **init_mha(rng, d, f"{prefix}.xattn"),
        **init_layer_norm(d, f"{prefix}.ln3"),
        **init_ffn(rng, d, f"{prefix}.mlp"),
    }
