"""Gradient-check suite: every layer type, then the whole model.

Each check returns the max relative error between the tape gradient and
central differences.  ``run_suite`` is what the ``gradcheck`` command
prints.
"""

from __future__ import annotations

import time
import zlib
from typing import Callable

import numpy as np

from . import attention as att
from . import autodiff as ad
from .autodiff import Tensor
from .gradcheck import grad_check, relative_error
from .model import ModelConfig, PitVQANet, classify, excitation_block, forward_logits, init_parameters
from .rng import stream

TOLERANCE = 1e-4


def _rand(seed, *shape, scale=1.0):
    return np.random.default_rng(seed).normal(0.0, scale, size=shape)


def _weighted(fn: Callable[[Tensor], Tensor], out_shape, seed) -> Callable[[Tensor], Tensor]:
    # random output weights: a plain sum hides errors in normalised outputs
    c = Tensor(_rand(seed, *out_shape))
    return lambda x: ad.total(ad.mul(fn(x), c))


def _block_params(init, d, seed, prefix="p"):
    raw = init(np.random.default_rng(seed), d, prefix)
    rng = np.random.default_rng(seed + 1)
    out = {}
    for k, v in raw.items():
        if k.endswith(".g"):
            v = 1.0 + 0.1 * rng.normal(size=v.shape)
        elif k.endswith(".b"):
            v = 0.1 * rng.normal(size=v.shape)
        else:
            v = rng.normal(0.0, 0.3, size=v.shape)
        out[k] = Tensor(v)
    return att.sub_params(out, prefix)


def layer_checks(seed: int = 0) -> dict[str, Callable[[], float]]:
    """Named zero-argument checks, one per layer type."""
    d, heads = 8, 2
    w = Tensor(_rand(seed + 1, 5, 4))
    g5, b5 = Tensor(1.0 + 0.2 * _rand(seed + 2, 5)), Tensor(0.1 * _rand(seed + 3, 5))
    x35 = _rand(seed + 4, 3, 5)
    img = Tensor(_rand(seed + 5, 4, d))
    pad = np.array([True, True, True, False, False])

    def bn(training):
        mean, var = np.full(5, 0.2), np.full(5, 1.5)
        return lambda x: ad.batch_norm_1d(x, g5, b5, mean, var, training)[0]

    eb_p = {
        "eb.feat.w": Tensor(_rand(seed + 6, d, d, scale=0.3)), "eb.feat.b": Tensor(_rand(seed + 7, d, scale=0.1)),
        "eb.gate.w": Tensor(_rand(seed + 8, d, d, scale=0.3)), "eb.gate.b": Tensor(_rand(seed + 9, d, scale=0.1)),
        "eb.bn.g": Tensor(1.0 + 0.1 * _rand(seed + 10, d)), "eb.bn.b": Tensor(0.1 * _rand(seed + 11, d)),
    }
    head_cfg = ModelConfig(d_model=d, n_heads=heads, n_classes=6, dropout_p=0.3)
    head_p = {"head.w": Tensor(_rand(seed + 12, d, 6, scale=0.3)), "head.b": Tensor(_rand(seed + 13, 6))}

    def eb(h):
        bufs = {"eb.bn.mean": np.zeros(d), "eb.bn.var": np.ones(d)}
        return excitation_block(h, eb_p, bufs, True)

    cases = {
        "matmul": (lambda x: ad.matmul(x, w), (3, 4), x35),
        "elementwise": (lambda x: ad.mul(ad.add(x, Tensor(x35)), ad.sub(x, b5)), (3, 5), x35),
        "softmax": (lambda x: ad.softmax(x, -1), (3, 5), x35),
        "sigmoid": (ad.sigmoid, (3, 5), x35),
        "gelu": (ad.gelu, (3, 5), x35),
        "layer_norm": (lambda x: ad.layer_norm(x, g5, b5), (3, 5), x35),
        "batch_norm_train": (bn(True), (3, 5), x35),
        "batch_norm_eval": (bn(False), (3, 5), x35),
        "reduce_mean": (lambda x: ad.reduce_mean(x, 0), (5,), x35),
        "dropout": (lambda x: ad.dropout(x, 0.4, True, stream(seed, "dropout-check")), (3, 5), x35),
        "embedding": (lambda t: ad.embedding_lookup(t, [0, 2, 2, 1]), (4, 5), _rand(seed + 14, 3, 5)),
        "attention": (
            lambda x: att.multi_head_attention(x, img, _block_params(att.init_mha, d, seed + 15), heads),
            (5, d), _rand(seed + 16, 5, d),
        ),
        "encoder_block": (
            lambda x: att.encoder_block(x, _block_params(att.init_encoder_block, d, seed + 17), heads),
            (5, d), _rand(seed + 18, 5, d),
        ),
        "decoder_block": (
            lambda x: att.decoder_block(x, _block_params(att.init_decoder_block, d, seed + 19), heads),
            (5, d), _rand(seed + 20, 5, d),
        ),
        "grounded_block": (
            lambda x: att.grounded_encoder_block(x, img, _block_params(att.init_grounded_block, d, seed + 21), heads, pad),
            (5, d), _rand(seed + 22, 5, d),
        ),
        "excitation_block": (eb, (2, 5, d), _rand(seed + 23, 2, 5, d)),
        "classify_head": (
            lambda h: classify(h, head_p, head_cfg, True, stream(seed, "head-check")), (2, 6), _rand(seed + 24, 2, 5, d),
        ),
    }
    checks = {
        name: (lambda fn=fn, shape=shape, x=x, name=name: grad_check(
            _weighted(fn, shape, zlib.crc32(name.encode())), x))
        for name, (fn, shape, x) in cases.items()
    }
    checks["cross_entropy"] = lambda: grad_check(lambda z: ad.cross_entropy(z, [1, 4, 0]), x35)
    return checks


def model_batch(config: ModelConfig, n: int, seed: int):
    """Random images, questions with trailing padding, and labels."""
    rng = stream(seed, "gradcheck-batch")
    images = rng.uniform(0.0, 1.0, (n, config.n_channels, config.image_size, config.image_size))
    ids = rng.integers(2, config.vocab_size, (n, config.max_question_len))
    lengths = rng.integers(1, config.max_question_len + 1, n)
    mask = np.arange(config.max_question_len)[None, :] < lengths[:, None]
    ids = np.where(mask, ids, 0)
    labels = rng.integers(0, config.n_classes, n)
    return images, ids, mask, labels


def generic_point(net: PitVQANet, seed: int = 0) -> PitVQANet:
    """Same architecture at a well-conditioned random point.

    At the Normal(0, 0.02) initialisation the attention logits are nearly
    zero, so query/key weights get gradients around 1e-7, the same size as
    float64 round-off in a central difference with h=1e-5.  Redrawing the
    weights with fan-in scaling gives every parameter a measurable effect.
    """
    rng = stream(seed, "gradcheck-point")
    out = net.copy()
    for name, v in net.params.items():
        if name.endswith(".g"):
            out.params[name] = 1.0 + 0.1 * rng.normal(size=v.shape)
        elif v.ndim == 1:
            out.params[name] = 0.1 * rng.normal(size=v.shape)
        elif name.endswith(".w"):
            out.params[name] = rng.normal(0.0, 1.0 / np.sqrt(v.shape[0]), size=v.shape)
        else:  # embeddings and position tables
            out.params[name] = rng.normal(0.0, 0.5, size=v.shape)
    return out


def model_check(
    net: PitVQANet,
    batch,
    coords_per_tensor: int | None = 4,
    seed: int = 0,
    h: float = 1e-5,
    training: bool = True,
) -> dict[str, float]:
    """Per-parameter max relative error of the full cross-entropy loss.

    Training mode is checked by default (batch statistics in the excitation
    block, dropout with a fixed mask).  ``coords_per_tensor=None`` checks
    every coordinate; otherwise a seeded sample of that many per tensor.
    """
    images, ids, mask, labels = batch

    def loss(params: dict[str, Tensor]) -> Tensor:
        buffers = {k: v.copy() for k, v in net.buffers.items()}
        probe = PitVQANet(net.config, net.params, buffers)
        rng = stream(seed, "gradcheck-dropout")
        return ad.cross_entropy(forward_logits(probe, images, ids, mask, training, rng, params), labels)

    leaves = net.tensors(requires_grad=True)
    with ad.Tape():
        value = loss(leaves)
    grads = ad.backward(value)
    errors = {}
    pick = stream(seed, "gradcheck-coords")
    for name in sorted(net.params):
        base = net.params[name]
        analytic = grads[name].data if name in grads else np.zeros_like(base)
        if coords_per_tensor is None or coords_per_tensor >= base.size:
            coords = range(base.size)
        else:
            coords = pick.choice(base.size, coords_per_tensor, replace=False)
        work = base.copy()
        flat = work.reshape(-1)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            step = h * max(1.0, abs(orig))
            vals = []
            for sign in (1.0, -1.0):
                flat[i] = orig + sign * step
                params = {k: Tensor(work if k == name else v) for k, v in net.params.items()}
                vals.append(loss(params).item())
            flat[i] = orig
            numeric = (vals[0] - vals[1]) / (2.0 * step)
            worst = max(worst, float(relative_error(analytic.reshape(-1)[i], numeric)))
        errors[name] = worst
    return errors


def layer_of(param_name: str) -> str:
    """``txt.blocks.1.xattn.q.w`` -> ``txt.blocks.1``; ``eb.gate.w`` -> ``eb``."""
    parts = param_name.split(".")
    if len(parts) > 2 and parts[1] in ("blocks",):
        return ".".join(parts[:3])
    return parts[0] if parts[0] in ("eb", "head") else ".".join(parts[:2])


def run_suite(
    config: ModelConfig,
    seed: int = 0,
    batch_size: int = 2,
    coords_per_tensor: int | None = 4,
) -> dict[str, float]:
    """Layer-type checks followed by the full model, grouped by layer."""
    results = {f"op:{name}": check() for name, check in layer_checks(seed).items()}
    net = generic_point(init_parameters(config), seed)
    per_param = model_check(net, model_batch(config, batch_size, seed), coords_per_tensor, seed)
    for name, err in per_param.items():
        key = "model:" + layer_of(name)
        results[key] = max(results.get(key, 0.0), err)
    return results


def timed_suite(config: ModelConfig, **kw) -> tuple[dict[str, float], float]:
    t0 = time.perf_counter()
    res = run_suite(config, **kw)
    return res, time.perf_counter() - t0
