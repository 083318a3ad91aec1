"""Transition head for promotional fine-tuning.

A small MLP reads the backbone's hidden representation and emits two
instance-level terms (w_x, b_x) that move the base probability p to its
promotional counterpart

    p_t = p + w_x * (1 - p) + b_x

The head starts as an exact identity (zero output layer), so an untrained
head serves the base model's predictions unchanged. Fine-tuning runs at two
rates: the head takes plain clipped gradient steps at a regular learning
rate, while the backbone is stepped by its own optimizer at a much smaller
one (frozen outright when that rate is zero). Plain steps for the head keep
its update proportional to the actual miscalibration, so a head fine-tuned
on data the model already fits stays near identity; the adaptive optimizer
would inflate near-zero gradients into full-size steps and manufacture
instance noise where none is warranted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RuntimeAbort
from ._rng import child_rng
from .model import (
    CvrModel,
    LabeledExamples,
    ModelConfig,
    OptimizerState,
    _example_weights,
    _forward_cache,
    apply_gradients,
    backward,
    read_checkpoint,
    write_checkpoint,
)

DEFAULT_HEAD_HIDDEN = (100,)
TRAIN_CLAMP_EPS = 1e-6
# The train-time clamp keeps the loss finite but its pass-through slope at
# the boundary is 1/eps; a handful of clamped instances would otherwise kick
# the parameters by lr/eps-sized steps. Shifting predictions down also
# inevitably sends the smallest-p instances below zero (the head's terms are
# additive), so bounded steps are a structural requirement, not a tuning aid.
GRAD_CLIP = 5.0
HEAD_INIT_SCALE = 0.1


@dataclass(frozen=True)
class TransBlockConfig:
    input_dim: int
    hidden_sizes: tuple[int, ...] = DEFAULT_HEAD_HIDDEN

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        sizes = tuple(int(s) for s in self.hidden_sizes)
        if any(s < 1 for s in sizes):
            raise ConfigError(f"hidden sizes must be positive, got {sizes}")
        object.__setattr__(self, "hidden_sizes", sizes)

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden_sizes": list(self.hidden_sizes)}

    @classmethod
    def from_dict(cls, d: dict) -> "TransBlockConfig":
        return cls(input_dim=int(d["input_dim"]), hidden_sizes=tuple(d["hidden_sizes"]))


class TransBlockHead:
    """Head parameters: ReLU MLP from the backbone representation to the
    two transition terms. Output width is always 2: one w_x, one b_x."""

    def __init__(self, config: TransBlockConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = {name: shape for name, shape in self._layout(config)}
        if set(params) != set(expected):
            raise ConfigError(
                f"head parameter set mismatch: got {sorted(params)}, want {sorted(expected)}"
            )
        for name, shape in expected.items():
            arr = np.asarray(params[name], dtype=np.float64)
            if arr.shape != shape:
                raise ConfigError(f"{name}: shape {arr.shape} != expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name}: non-finite entries")
            params[name] = arr
        self.params = params

    @staticmethod
    def _layout(config: TransBlockConfig) -> list[tuple[str, tuple[int, ...]]]:
        dims = [config.input_dim, *config.hidden_sizes, 2]
        layout: list[tuple[str, tuple[int, ...]]] = []
        for i in range(len(dims) - 1):
            layout.append((f"w{i}", (dims[i], dims[i + 1])))
            layout.append((f"b{i}", (dims[i + 1],)))
        return layout

    def param_names(self) -> list[str]:
        return [name for name, _ in self._layout(self.config)]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "TransBlockHead":
        return TransBlockHead(self.config, {k: v.copy() for k, v in self.params.items()})

    @classmethod
    def build(cls, config: TransBlockConfig, seed: int) -> "TransBlockHead":
        """Small random hidden layers, exact zeros on the output layer: the
        freshly built head is the identity map p_t = p.

        The hidden scale is deliberately a tenth of the usual ReLU fan-in
        choice. The output layer aggregates every hidden unit, so its
        effective step size grows with the summed squared activations;
        small activations keep one gradient step from moving the
        transition terms by more than a few thousandths.
        """
        rng = child_rng(seed, "transblock-init")
        params: dict[str, np.ndarray] = {}
        layout = cls._layout(config)
        last_w = f"w{len(config.hidden_sizes)}"
        last_b = f"b{len(config.hidden_sizes)}"
        for name, shape in layout:
            if name in (last_w, last_b) or name.startswith("b"):
                params[name] = np.zeros(shape)
            else:
                scale = HEAD_INIT_SCALE * np.sqrt(2.0 / shape[0])
                params[name] = rng.standard_normal(shape) * scale
        return cls(config, params)


class _HeadCache:
    __slots__ = ("pre", "acts", "out")

    def __init__(self, pre, acts, out):
        self.pre = pre
        self.acts = acts
        self.out = out


def _head_forward(head: TransBlockHead, h: np.ndarray) -> _HeadCache:
    if h.ndim != 2 or h.shape[1] != head.config.input_dim:
        raise ConfigError(
            f"representation shape {h.shape} does not match head input {head.config.input_dim}"
        )
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    a = h
    n_hidden = len(head.config.hidden_sizes)
    for i in range(n_hidden):
        z = a @ head.params[f"w{i}"] + head.params[f"b{i}"]
        a = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(a)
    out = a @ head.params[f"w{n_hidden}"] + head.params[f"b{n_hidden}"]
    return _HeadCache(pre, acts, out)


def _head_backward(
    head: TransBlockHead, h: np.ndarray, cache: _HeadCache, g_out: np.ndarray
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Gradients for the head parameters plus the gradient passed down to h."""
    n_hidden = len(head.config.hidden_sizes)
    grads: dict[str, np.ndarray] = {}
    g = g_out
    grads[f"w{n_hidden}"] = (cache.acts[-1] if n_hidden else h).T @ g
    grads[f"b{n_hidden}"] = g.sum(axis=0)
    ga = g @ head.params[f"w{n_hidden}"].T
    for i in range(n_hidden - 1, -1, -1):
        gz = ga * (cache.pre[i] > 0.0)
        prev = cache.acts[i - 1] if i > 0 else h
        grads[f"w{i}"] = prev.T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        ga = gz @ head.params[f"w{i}"].T
    return grads, ga


def trans_forward(
    head: TransBlockHead, h: np.ndarray, p: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Instance transition terms and the raw promotional probability.

    Returns (w_x, b_x, p_t) with p_t = p + w_x * (1 - p) + b_x, untruncated.
    """
    h = np.asarray(h, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    out = _head_forward(head, h).out
    w_x = out[:, 0]
    b_x = out[:, 1]
    p_t = p + w_x * (1.0 - p) + b_x
    return w_x, b_x, p_t


def truncate(p_t):
    """Serving-side clamp of the raw promotional probability to [0, 1]."""
    arr = np.asarray(p_t, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise RuntimeAbort("cannot truncate non-finite predictions")
    clipped = np.clip(arr, 0.0, 1.0)
    return float(clipped) if np.isscalar(p_t) or arr.ndim == 0 else clipped


def finetuned_predict(model: CvrModel, head: TransBlockHead, clicks) -> np.ndarray:
    """Serve the composite system: backbone, head, exact truncation."""
    cache = _forward_cache(model, clicks)
    _, _, p_t = trans_forward(head, cache.h, cache.p)
    return truncate(p_t)


@dataclass(frozen=True)
class FinetuneConfig:
    head_lr: float = 1e-3
    backbone_lr: float = 1e-5
    ridge: float = 1.0
    batch_size: int = 5000
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.head_lr > 0:
            raise ConfigError(f"head_lr must be positive, got {self.head_lr}")
        if self.backbone_lr < 0:
            raise ConfigError(f"backbone_lr must be >= 0, got {self.backbone_lr}")
        if self.backbone_lr > self.head_lr:
            raise ConfigError(
                f"backbone_lr {self.backbone_lr} exceeds head_lr {self.head_lr}: "
                "the backbone must move more slowly than the head"
            )
        if self.ridge < 0:
            raise ConfigError(f"ridge must be >= 0, got {self.ridge}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")


def finetune_loss(
    model: CvrModel,
    head: TransBlockHead,
    examples: LabeledExamples,
    weights: tuple[float, float] | None = None,
) -> float:
    """Mean weighted cross-entropy of the train-clamped composite output."""
    if examples.n == 0:
        raise ConfigError("empty batch")
    cache = _forward_cache(model, examples)
    _, _, p_t = trans_forward(head, cache.h, cache.p)
    p_c = np.clip(p_t, TRAIN_CLAMP_EPS, 1.0 - TRAIN_CLAMP_EPS)
    y = examples.label
    w = _example_weights(y, weights)
    per = -(y * np.log(p_c) + (1.0 - y) * np.log1p(-p_c))
    return float(np.mean(w * per))


def finetune_gradients(
    model: CvrModel,
    head: TransBlockHead,
    examples: LabeledExamples,
    weights: tuple[float, float] | None = None,
    *,
    backbone: bool = True,
) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray] | None]:
    """Loss and gradients of the composite fine-tuning objective.

    The clamp to (eps, 1-eps) keeps the loss finite but passes its gradient
    straight through, so out-of-range raw predictions still receive a
    corrective signal. ``backbone=False`` skips the backbone walk entirely
    for the frozen-backbone mode.
    """
    if examples.n == 0:
        raise ConfigError("empty batch")
    cache = _forward_cache(model, examples)
    head_cache = _head_forward(head, cache.h)
    w_x = head_cache.out[:, 0]
    b_x = head_cache.out[:, 1]
    p = cache.p
    p_t = p + w_x * (1.0 - p) + b_x
    p_c = np.clip(p_t, TRAIN_CLAMP_EPS, 1.0 - TRAIN_CLAMP_EPS)
    y = examples.label
    w = _example_weights(y, weights)
    per = -(y * np.log(p_c) + (1.0 - y) * np.log1p(-p_c))
    loss = float(np.mean(w * per))

    # pass-through clamp: d(loss)/d(p_t) evaluated at the clamped value
    g_pt = w * (p_c - y) / (p_c * (1.0 - p_c)) / examples.n
    g_out = np.stack([g_pt * (1.0 - p), g_pt], axis=1)
    head_grads, g_h = _head_backward(head, cache.h, head_cache, g_out)
    if not backbone:
        return loss, head_grads, None
    # backbone receives gradient along two routes: through its own output
    # probability (scaled by 1 - w_x) and through the representation the
    # head reads
    g_p = g_pt * (1.0 - w_x)
    g_logit = g_p * p * (1.0 - p) * cache.grad_mask
    backbone_grads = backward(model, examples, cache, g_logit, g_hidden=g_h)
    return loss, head_grads, backbone_grads


def _clipped_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float):
    """Plain gradient step with a global-norm clip over the parameter set."""
    norm = float(np.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values())))
    scale = lr if norm <= GRAD_CLIP else lr * GRAD_CLIP / norm
    for name, g in grads.items():
        params[name] -= scale * g


@dataclass
class FinetuneReport:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0
    backbone_updated: bool = False


def finetune(
    model: CvrModel,
    head: TransBlockHead,
    data: LabeledExamples,
    weights: tuple[float, float] | None,
    config: FinetuneConfig,
) -> tuple[CvrModel, TransBlockHead, FinetuneReport]:
    """Dual-rate fine-tuning of the composite system on a retrieved set.

    The head moves at ``head_lr`` by clipped plain steps; the backbone moves
    at ``backbone_lr`` under its own optimizer with moments fresh for this
    call, and with a zero backbone rate its parameters are left untouched at
    the bit level. Both are updated in place and returned. Deterministic
    given ``config.seed``.
    """
    if data.n == 0:
        raise ConfigError("empty fine-tuning set")
    if head.config.input_dim != model.config.representation_dim:
        raise ConfigError(
            f"head reads {head.config.input_dim}-dim input but the backbone "
            f"exposes {model.config.representation_dim}"
        )
    update_backbone = config.backbone_lr > 0
    backbone_state = OptimizerState(model) if update_backbone else None
    report = FinetuneReport(backbone_updated=update_backbone)
    for epoch in range(config.epochs):
        rng = child_rng(config.seed, "finetune-shuffle", epoch)
        perm = rng.permutation(data.n)
        total = 0.0
        for start in range(0, data.n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            batch = data.select(idx)
            loss, head_grads, backbone_grads = finetune_gradients(
                model, head, batch, weights, backbone=update_backbone
            )
            if not np.isfinite(loss):
                raise RuntimeAbort(
                    f"non-finite fine-tuning loss {loss} on batch of {idx.size}; "
                    "aborting before the update"
                )
            _clipped_step(head.params, head_grads, config.head_lr)
            if update_backbone:
                apply_gradients(
                    model, backbone_grads, config.backbone_lr, "adam", backbone_state
                )
            total += loss * idx.size
            report.steps += 1
        report.epoch_losses.append(total / data.n)
    return model, head, report


# ---------------------------------------------------------------------------
# combined checkpoints: backbone plus head, flagged as fine-tuned


def save_finetuned(path, model: CvrModel, head: TransBlockHead) -> None:
    arrays: dict[str, np.ndarray] = {}
    entries = []
    for name in model.param_names():
        arrays[f"model.{name}"] = model.params[name]
        entries.append({"name": f"model.{name}", "shape": list(model.params[name].shape)})
    for name in head.param_names():
        arrays[f"head.{name}"] = head.params[name]
        entries.append({"name": f"head.{name}", "shape": list(head.params[name].shape)})
    header = {
        "kind": "cvr_model+transblock",
        "fine_tuned": True,
        "config": model.config.to_dict(),
        "head_config": head.config.to_dict(),
        "arrays": entries,
    }
    write_checkpoint(path, header, arrays)


def load_finetuned(path) -> tuple[CvrModel, TransBlockHead]:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "cvr_model+transblock":
        raise ConfigError(
            f"{path}: checkpoint kind {header.get('kind')!r}, expected 'cvr_model+transblock'"
        )
    model_params = {
        k[len("model.") :]: v for k, v in arrays.items() if k.startswith("model.")
    }
    head_params = {k[len("head.") :]: v for k, v in arrays.items() if k.startswith("head.")}
    model = CvrModel(ModelConfig.from_dict(header["config"]), model_params)
    head = TransBlockHead(TransBlockConfig.from_dict(header["head_config"]), head_params)
    return model, head
