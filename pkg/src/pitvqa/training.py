"""Cross-entropy training with Adam, evaluation, and the EB ablation harness.

Every source of randomness is keyed by ``(seed, purpose, step)``: the batch
for step ``s`` comes from the permutation of epoch ``s // batches_per_epoch``
and dropout uses its own per-step stream.  A run can therefore be resumed
from any checkpoint and continue bit-for-bit.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .data.corpus import Corpus
from .data.taxonomy import TAXONOMY
from .data.vocab import Vocabulary, build_vocab, tokenize
from .data.questions import all_template_questions
from .metrics import HEADLINE, MetricsReport, build_report
from .model import EB_GATE_SATURATION, ConfigError, ModelConfig, PitVQANet, forward_logits, init_parameters
from .rng import stream

log = logging.getLogger(__name__)

EVAL_CHUNK = 64


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    max_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 0  # 0: no periodic checkpoints
    use_eb: bool | None = None  # None: keep the model's setting

    def __post_init__(self):
        bad = []
        if not self.learning_rate > 0:
            bad.append("learning_rate must be > 0")
        if self.batch_size < 2:
            bad.append("batch_size must be >= 2")
        if self.max_steps < 0:
            bad.append("max_steps must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            bad.append("betas must lie in [0, 1)")
        if not self.eps > 0:
            bad.append("eps must be > 0")
        if self.eval_every < 0:
            bad.append("eval_every must be >= 0")
        if bad:
            raise ConfigError("invalid TrainConfig: " + "; ".join(bad))


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})

    def copy(self) -> "AdamState":
        return AdamState({k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray | ad.Tensor],
    state: AdamState,
    config: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update; inputs are left untouched.

    Parameters absent from ``grads`` get a zero gradient (their moments
    still decay).
    """
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g.data if isinstance(g, ad.Tensor) else g)
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        new_p[name] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t)


def default_vocab() -> Vocabulary:
    """Vocabulary over every question the generator can produce."""
    return build_vocab(all_template_questions())


@dataclass
class EncodedSet:
    """Arrays ready for batching: one row per QA sample."""

    images: np.ndarray  # [n_frames, 3, H, W]
    frame_idx: np.ndarray  # [n] index into images
    token_ids: np.ndarray  # [n, L]
    pad_mask: np.ndarray  # [n, L]
    labels: np.ndarray  # [n]
    categories: np.ndarray  # [n] category tags
    procedure_ids: np.ndarray  # [n]

    def __len__(self) -> int:
        return int(self.labels.size)

    def take(self, idx) -> "EncodedSet":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self,
            frame_idx=self.frame_idx[idx],
            token_ids=self.token_ids[idx],
            pad_mask=self.pad_mask[idx],
            labels=self.labels[idx],
            categories=self.categories[idx],
            procedure_ids=self.procedure_ids[idx],
        )


def encode_corpus(corpus: Corpus, vocab: Vocabulary, max_len: int) -> EncodedSet:
    paths = sorted({s.frame_path for s in corpus.samples})
    where = {p: i for i, p in enumerate(paths)}
    images = np.stack([corpus.images[p] for p in paths]) if paths else np.zeros((0, 3, 1, 1))
    n = len(corpus.samples)
    ids = np.zeros((n, max_len), dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    for i, s in enumerate(corpus.samples):
        ids[i], mask[i] = tokenize(s.question, vocab, max_len)
    return EncodedSet(
        images=images,
        frame_idx=np.array([where[s.frame_path] for s in corpus.samples], dtype=np.int64),
        token_ids=ids,
        pad_mask=mask,
        labels=np.array([s.answer_idx for s in corpus.samples], dtype=np.int64),
        categories=np.array([s.category for s in corpus.samples]),
        procedure_ids=np.array([s.procedure_id for s in corpus.samples], dtype=np.int64),
    )


def batch_indices(step: int, n: int, batch_size: int, seed: int) -> np.ndarray:
    """Sample indices for ``step``: consecutive slices of a per-epoch shuffle."""
    per_epoch = max(1, n // batch_size)
    epoch, j = divmod(step, per_epoch)
    perm = stream(seed, "shuffle", epoch).permutation(n)
    return perm[j * batch_size:(j + 1) * batch_size]


def batch_loss(
    net: PitVQANet, data: EncodedSet, idx: np.ndarray, training: bool, rng, params=None
) -> ad.Tensor:
    logits = forward_logits(
        net,
        data.images[data.frame_idx[idx]],
        data.token_ids[idx],
        data.pad_mask[idx],
        training,
        rng,
        params,
    )
    return ad.cross_entropy(logits, data.labels[idx])


@dataclass
class TrainState:
    net: PitVQANet
    adam: AdamState
    step: int = 0  # next step to run


@dataclass
class TrainResult:
    net: PitVQANet
    adam: AdamState
    losses: list[tuple[int, float, float]] = field(default_factory=list)  # (step, loss, lr)
    checkpoints: list[Path] = field(default_factory=list)
    step: int = 0


def train_step(state: TrainState, data: EncodedSet, config: TrainConfig) -> float:
    """Run one optimisation step in place; return the pre-update loss."""
    idx = batch_indices(state.step, len(data), config.batch_size, config.seed)
    params = state.net.tensors(requires_grad=True)
    with ad.Tape():
        loss = batch_loss(state.net, data, idx, True, stream(config.seed, "dropout", state.step), params)
    grads = ad.backward(loss)
    state.net.params, state.adam = adam_step(state.net.params, grads, state.adam, config)
    state.step += 1
    return loss.item()


def train(
    net: PitVQANet,
    data: EncodedSet,
    config: TrainConfig,
    checkpoint_dir=None,
    adam: AdamState | None = None,
    start_step: int = 0,
    on_step: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train ``net`` in place for steps ``start_step .. config.max_steps - 1``.

    When ``checkpoint_dir`` is set and ``config.eval_every > 0`` a checkpoint
    is written after every ``eval_every``-th step.
    """
    from .checkpoint import Checkpoint, save_checkpoint

    if len(data) == 0:
        raise ValueError("training set is empty")
    if len(data) < 2:
        raise ValueError("training set needs at least 2 samples for batch normalization")
    if config.use_eb is not None and config.use_eb != net.config.use_eb:
        net.config = net.config.replace(use_eb=config.use_eb)
    state = TrainState(net, adam if adam is not None else AdamState.zeros_like(net.params), start_step)
    result = TrainResult(net, state.adam)
    while state.step < config.max_steps:
        step = state.step
        loss = train_step(state, data, config)
        result.losses.append((step, loss, config.learning_rate))
        if on_step is not None:
            on_step(step, loss)
        if checkpoint_dir is not None and config.eval_every and state.step % config.eval_every == 0:
            path = Path(checkpoint_dir) / f"step_{state.step:06d}.ckpt"
            save_checkpoint(path, Checkpoint(net.config, config, net.params, net.buffers, state.adam, state.step))
            result.checkpoints.append(path)
    result.adam = state.adam
    result.step = state.step
    return result


def predict(net: PitVQANet, data: EncodedSet, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Eval-mode arg-max predictions for every sample."""
    preds = []
    for start in range(0, len(data), chunk):
        idx = np.arange(start, min(start + chunk, len(data)))
        logits = forward_logits(
            net, data.images[data.frame_idx[idx]], data.token_ids[idx], data.pad_mask[idx], False
        )
        preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(net: PitVQANet, data: EncodedSet) -> MetricsReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    preds = predict(net, data)
    names = [TAXONOMY.class_name(i) for i in range(net.config.n_classes)] if net.config.n_classes == TAXONOMY.n_classes else None
    return build_report(data.labels, preds, net.config.n_classes, data.categories.tolist(), names)


def neutralize_eb(net: PitVQANet) -> PitVQANet:
    """Copy of ``net`` whose excitation block is (numerically) the identity.

    Feature transform = identity, gate saturated to 1, batch-norm running
    statistics and affine set to the identity.  Meaningful in eval mode.
    """
    out = net.copy()
    d = net.config.d_model
    out.params["eb.feat.w"] = np.eye(d)
    out.params["eb.feat.b"] = np.zeros(d)
    out.params["eb.gate.w"] = np.zeros((d, d))
    out.params["eb.gate.b"] = np.full(d, EB_GATE_SATURATION)
    out.params["eb.bn.g"] = np.ones(d)
    out.params["eb.bn.b"] = np.zeros(d)
    out.buffers["eb.bn.mean"] = np.zeros(d)
    out.buffers["eb.bn.var"] = np.ones(d)
    return out


def neutral_gap(net: PitVQANet, data: EncodedSet, limit: int = EVAL_CHUNK) -> float:
    """Max |logit difference| between the EB-neutralized net and the same net with EB off."""
    idx = np.arange(min(limit, len(data)))
    args = (data.images[data.frame_idx[idx]], data.token_ids[idx], data.pad_mask[idx])
    on = neutralize_eb(net)
    on.config = on.config.replace(use_eb=True)
    off = net.copy()
    off.config = off.config.replace(use_eb=False)
    return float(np.abs(forward_logits(on, *args).data - forward_logits(off, *args).data).max())


def ablation_run(
    train_data: EncodedSet,
    eval_data: EncodedSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> dict:
    """Matched-seed trainings with and without the excitation block.

    Both runs share the initial weights of every non-EB parameter, the batch
    order and the dropout masks.  ``neutral_gap`` is measured on the trained
    EB-on network.
    """
    reports = {}
    gap = None
    for key, use_eb in (("eb_on", True), ("eb_off", False)):
        net = init_parameters(model_config.replace(use_eb=use_eb))
        train(net, train_data, dataclasses.replace(train_config, use_eb=use_eb))
        reports[key] = evaluate(net, eval_data).to_dict()
        if use_eb:
            gap = neutral_gap(net, eval_data)
        log.info("ablation %s: balanced accuracy %.4f", key, reports[key]["balanced_accuracy"])
    delta = {k: reports["eb_on"][k] - reports["eb_off"][k] for k in HEADLINE}
    return {
        **reports,
        "delta": delta,
        "seed": train_config.seed,
        "steps": train_config.max_steps,
        "neutral_gap": gap,
    }
