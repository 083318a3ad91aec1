"""Conversion-rate model: id embeddings plus a small MLP, trained by
weighted cross-entropy with hand-written gradients.

Everything here is dense float64 numpy. Gradients are derived and coded by
hand on purpose: the test suite checks them against central finite
differences, which only means something when no autodiff library is in the
loop. A model instance has a single writer during training; inference over
a snapshot (``copy()``) may run concurrently with further training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RuntimeAbort
from ._rng import child_rng
from .synthgen import NOISE_DIM, ClickBatch

DEFAULT_EMBED_DIM = 8
# Wide enough that the last hidden layer keeps per-cell structure beyond the
# scalar it predicts; a narrower stack converges to the same accuracy but its
# representation collapses, starving any downstream reader of signal.
DEFAULT_HIDDEN = (128, 64)
LOGIT_CLIP = 30.0

CHECKPOINT_MAGIC = b"PFITCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the network. Frozen at construction; checkpoints carry it."""

    n_user_groups: int
    n_categories: int
    embed_dim: int = DEFAULT_EMBED_DIM
    hidden_sizes: tuple[int, ...] = DEFAULT_HIDDEN
    noise_dim: int = NOISE_DIM
    # which hidden activation is handed to downstream heads; -1 picks the
    # last hidden layer
    representation_layer: int = -1

    def __post_init__(self):
        if self.n_user_groups < 1 or self.n_categories < 1:
            raise ConfigError("embedding tables need at least one row each")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be positive, got {self.embed_dim}")
        if self.noise_dim < 0:
            raise ConfigError(f"noise_dim must be nonnegative, got {self.noise_dim}")
        sizes = tuple(int(s) for s in self.hidden_sizes)
        if not sizes or any(s < 1 for s in sizes):
            raise ConfigError(f"hidden_sizes must be nonempty positive, got {sizes}")
        object.__setattr__(self, "hidden_sizes", sizes)
        k = self.representation_layer
        if not -len(sizes) <= k < len(sizes):
            raise ConfigError(f"representation_layer {k} outside {len(sizes)} hidden layers")

    @property
    def input_dim(self) -> int:
        return 2 * self.embed_dim + self.noise_dim

    @property
    def representation_dim(self) -> int:
        return self.hidden_sizes[self.representation_layer]

    def to_dict(self) -> dict:
        return {
            "n_user_groups": self.n_user_groups,
            "n_categories": self.n_categories,
            "embed_dim": self.embed_dim,
            "hidden_sizes": list(self.hidden_sizes),
            "noise_dim": self.noise_dim,
            "representation_layer": self.representation_layer,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            n_user_groups=int(d["n_user_groups"]),
            n_categories=int(d["n_categories"]),
            embed_dim=int(d["embed_dim"]),
            hidden_sizes=tuple(d["hidden_sizes"]),
            noise_dim=int(d["noise_dim"]),
            representation_layer=int(d["representation_layer"]),
        )


class CvrModel:
    """Parameter container. ``params`` maps name -> float64 array; the
    ordering of ``param_names()`` is fixed and shared by optimizers,
    checkpoints, and gradient dictionaries."""

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray]):
        self.config = config
        expected = {name: shape for name, shape in self._layout(config)}
        if set(params) != set(expected):
            raise ConfigError(
                f"parameter set mismatch: got {sorted(params)}, want {sorted(expected)}"
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
    def _layout(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
        layout = [
            ("user_embed", (config.n_user_groups, config.embed_dim)),
            ("cat_embed", (config.n_categories, config.embed_dim)),
        ]
        dims = [config.input_dim, *config.hidden_sizes, 1]
        for i in range(len(dims) - 1):
            layout.append((f"w{i}", (dims[i], dims[i + 1])))
            layout.append((f"b{i}", (dims[i + 1],)))
        return layout

    def param_names(self) -> list[str]:
        return [name for name, _ in self._layout(self.config)]

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "CvrModel":
        return CvrModel(self.config, {k: v.copy() for k, v in self.params.items()})

    @classmethod
    def build(cls, config: ModelConfig, seed: int) -> "CvrModel":
        rng = child_rng(seed, "model-init")
        params: dict[str, np.ndarray] = {}
        for name, shape in cls._layout(config):
            if name.startswith("b"):
                params[name] = np.zeros(shape)
            elif name.endswith("_embed"):
                params[name] = 0.1 * rng.standard_normal(shape)
            else:
                fan_in = shape[0]
                params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return cls(config, params)

    @classmethod
    def zeros(cls, config: ModelConfig) -> "CvrModel":
        return cls(config, {name: np.zeros(shape) for name, shape in cls._layout(config)})


@dataclass(frozen=True)
class LabeledExamples:
    """Feature columns plus a binary label, the unit every trainer consumes."""

    user_group: np.ndarray
    category: np.ndarray
    noise: np.ndarray
    label: np.ndarray

    def __post_init__(self):
        ug = np.asarray(self.user_group, dtype=np.int64)
        cat = np.asarray(self.category, dtype=np.int64)
        noise = np.asarray(self.noise, dtype=np.float64)
        label = np.asarray(self.label, dtype=np.float64)
        n = ug.shape[0]
        if not (cat.shape == (n,) and label.shape == (n,) and noise.ndim == 2 and noise.shape[0] == n):
            raise ConfigError("misaligned example columns")
        if not np.all((label == 0.0) | (label == 1.0)):
            raise ConfigError("labels must be binary")
        for fname, arr in (("user_group", ug), ("category", cat), ("noise", noise), ("label", label)):
            object.__setattr__(self, fname, arr)

    @property
    def n(self) -> int:
        return self.user_group.shape[0]

    def select(self, idx) -> "LabeledExamples":
        return LabeledExamples(
            user_group=self.user_group[idx],
            category=self.category[idx],
            noise=self.noise[idx],
            label=self.label[idx],
        )

    @classmethod
    def from_batch(cls, batch: ClickBatch, labels: np.ndarray | None = None) -> "LabeledExamples":
        y = batch.converted if labels is None else labels
        return cls(
            user_group=batch.user_group,
            category=batch.category,
            noise=batch.noise,
            label=np.asarray(y, dtype=np.float64),
        )


def _check_ids(model: CvrModel, user_group: np.ndarray, category: np.ndarray) -> None:
    cfg = model.config
    if user_group.size and (user_group.min() < 0 or user_group.max() >= cfg.n_user_groups):
        raise ConfigError(
            f"user_group id outside [0, {cfg.n_user_groups}): ids are never hashed or wrapped"
        )
    if category.size and (category.min() < 0 or category.max() >= cfg.n_categories):
        raise ConfigError(
            f"category id outside [0, {cfg.n_categories}): ids are never hashed or wrapped"
        )


class _ForwardCache:
    """Everything the backward pass needs, kept deliberately explicit."""

    __slots__ = ("x", "pre", "acts", "logit", "grad_mask", "p", "h")

    def __init__(self, x, pre, acts, logit, grad_mask, p, h):
        self.x = x
        self.pre = pre
        self.acts = acts
        self.logit = logit
        self.grad_mask = grad_mask
        self.p = p
        self.h = h


def _forward_cache(model: CvrModel, clicks) -> _ForwardCache:
    cfg = model.config
    ug = np.asarray(clicks.user_group, dtype=np.int64)
    cat = np.asarray(clicks.category, dtype=np.int64)
    noise = np.asarray(clicks.noise, dtype=np.float64)
    _check_ids(model, ug, cat)
    if noise.shape != (ug.shape[0], cfg.noise_dim):
        raise ConfigError(f"noise shape {noise.shape} != (n, {cfg.noise_dim})")
    p = model.params
    x = np.concatenate([p["user_embed"][ug], p["cat_embed"][cat], noise], axis=1)
    pre: list[np.ndarray] = []
    acts: list[np.ndarray] = []
    a = x
    n_hidden = len(cfg.hidden_sizes)
    for i in range(n_hidden):
        z = a @ p[f"w{i}"] + p[f"b{i}"]
        a = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(a)
    logit = (a @ p[f"w{n_hidden}"] + p[f"b{n_hidden}"]).ravel()
    # hard clamp: probabilities never reach exactly 0 or 1, and the clamp
    # contributes zero gradient where it is active
    clipped = np.clip(logit, -LOGIT_CLIP, LOGIT_CLIP)
    grad_mask = np.abs(logit) < LOGIT_CLIP
    prob = 1.0 / (1.0 + np.exp(-clipped))
    h = acts[cfg.representation_layer]
    return _ForwardCache(x, pre, acts, logit, grad_mask, prob, h)


def forward(model: CvrModel, clicks) -> tuple[np.ndarray, np.ndarray]:
    """Return (hidden representation, probability) for each click.

    ``clicks`` is anything with aligned ``user_group``, ``category`` and
    ``noise`` columns: a ClickBatch or a LabeledExamples both qualify.
    """
    cache = _forward_cache(model, clicks)
    return cache.h, cache.p


def predict(model: CvrModel, clicks) -> np.ndarray:
    return _forward_cache(model, clicks).p


def _example_weights(label: np.ndarray, weights: tuple[float, float] | None) -> np.ndarray:
    if weights is None:
        return np.ones_like(label)
    w_pos, w_neg = float(weights[0]), float(weights[1])
    if w_pos <= 0 or w_neg <= 0:
        raise ConfigError(f"importance weights must be positive, got ({w_pos}, {w_neg})")
    return np.where(label == 1.0, w_pos, w_neg)


def batch_loss(
    model: CvrModel,
    examples: LabeledExamples,
    weights: tuple[float, float] | None = None,
) -> float:
    """Mean weighted cross-entropy, exactly the quantity the trainers descend."""
    if examples.n == 0:
        raise ConfigError("empty batch")
    p = _forward_cache(model, examples).p
    w = _example_weights(examples.label, weights)
    y = examples.label
    per = -(y * np.log(p) + (1.0 - y) * np.log1p(-p))
    return float(np.mean(w * per))


def backward(
    model: CvrModel,
    examples: LabeledExamples,
    cache: _ForwardCache,
    g_logit: np.ndarray,
    g_hidden: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate to every parameter from a per-example logit gradient.

    ``g_hidden``, when given, is an extra gradient arriving at the exposed
    hidden representation (composite heads feed their upstream term here).
    The logit clamp's zero-gradient region is already folded into
    ``cache.grad_mask`` by the caller.
    """
    cfg = model.config
    n_hidden = len(cfg.hidden_sizes)
    rep = cfg.representation_layer % n_hidden
    grads: dict[str, np.ndarray] = {}
    g = g_logit[:, None]
    grads[f"w{n_hidden}"] = cache.acts[-1].T @ g
    grads[f"b{n_hidden}"] = g.sum(axis=0)
    ga = g @ model.params[f"w{n_hidden}"].T
    for i in range(n_hidden - 1, -1, -1):
        if g_hidden is not None and i == rep:
            ga = ga + g_hidden
        gz = ga * (cache.pre[i] > 0.0)
        prev = cache.acts[i - 1] if i > 0 else cache.x
        grads[f"w{i}"] = prev.T @ gz
        grads[f"b{i}"] = gz.sum(axis=0)
        ga = gz @ model.params[f"w{i}"].T
    e = cfg.embed_dim
    g_user = np.zeros_like(model.params["user_embed"])
    g_cat = np.zeros_like(model.params["cat_embed"])
    np.add.at(g_user, examples.user_group, ga[:, :e])
    np.add.at(g_cat, examples.category, ga[:, e : 2 * e])
    grads["user_embed"] = g_user
    grads["cat_embed"] = g_cat
    return grads


def loss_gradients(
    model: CvrModel,
    examples: LabeledExamples,
    weights: tuple[float, float] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss plus its gradient for every parameter, including embeddings."""
    if examples.n == 0:
        raise ConfigError("empty batch")
    cache = _forward_cache(model, examples)
    y = examples.label
    w = _example_weights(y, weights)
    per = -(y * np.log(cache.p) + (1.0 - y) * np.log1p(-cache.p))
    loss = float(np.mean(w * per))
    # d(mean weighted BCE)/d(logit) = w * (p - y) / n, zero where clamped
    g_logit = (w * (cache.p - y) / examples.n) * cache.grad_mask
    return loss, backward(model, examples, cache, g_logit)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 5000
    epochs: int = 1
    importance_weights: tuple[float, float] | None = None
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.importance_weights is not None:
            w_pos, w_neg = self.importance_weights
            if not (w_pos > 0 and w_neg > 0):
                raise ConfigError(f"importance weights must be positive, got {self.importance_weights}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class OptimizerState:
    """Adam moments. Plain gradient descent keeps no state but accepts one,
    so training loops do not branch."""

    def __init__(self, model: CvrModel):
        self.m = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in model.params.items()}
        self.t = 0


def apply_gradients(
    model: CvrModel,
    grads: dict[str, np.ndarray],
    learning_rate: float,
    optimizer: str,
    state: OptimizerState | None,
) -> None:
    """One in-place optimizer step over every parameter in fixed name order."""
    names = model.param_names()
    if optimizer == "sgd":
        for name in names:
            model.params[name] -= learning_rate * grads[name]
        return
    if state is None:
        raise ConfigError("adam updates need a persistent OptimizerState")
    state.t += 1
    b1t = 1.0 - ADAM_BETA1**state.t
    b2t = 1.0 - ADAM_BETA2**state.t
    for name in names:
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * np.square(g)
        model.params[name] -= learning_rate * (m / b1t) / (np.sqrt(v / b2t) + ADAM_EPS)


def train_step(
    model: CvrModel,
    examples: LabeledExamples,
    config: TrainConfig,
    state: OptimizerState | None = None,
) -> float:
    """One optimizer step on the mean weighted cross-entropy of ``examples``.

    Returns the pre-update loss. For multi-step Adam training the caller
    owns ``state``; a lone call may omit it and gets a fresh first step.
    """
    loss, grads = loss_gradients(model, examples, config.importance_weights)
    if not np.isfinite(loss):
        raise RuntimeAbort(
            f"non-finite training loss {loss} on batch of {examples.n} "
            f"(labels mean {float(examples.label.mean()):.4f}); aborting before the update"
        )
    if config.optimizer == "adam" and state is None:
        state = OptimizerState(model)
    apply_gradients(model, grads, config.learning_rate, config.optimizer, state)
    return loss


@dataclass
class TrainReport:
    epoch_losses: list[float] = field(default_factory=list)
    steps: int = 0


def train(model: CvrModel, dataset: LabeledExamples, config: TrainConfig) -> TrainReport:
    """Shuffled minibatch training, deterministic given ``config.seed``.

    The model is updated in place; the report carries per-epoch mean loss
    (an example-weighted average of the per-step pre-update losses).
    """
    if dataset.n == 0:
        raise ConfigError("empty dataset")
    state = OptimizerState(model) if config.optimizer == "adam" else None
    report = TrainReport()
    for epoch in range(config.epochs):
        rng = child_rng(config.seed, "shuffle", epoch)
        perm = rng.permutation(dataset.n)
        total = 0.0
        for start in range(0, dataset.n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss = train_step(model, dataset.select(idx), config, state)
            total += loss * idx.size
            report.steps += 1
        report.epoch_losses.append(total / dataset.n)
    return report


# ---------------------------------------------------------------------------
# checkpoints: magic + version + json header + raw row-major float64 arrays


def write_checkpoint(path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Low-level writer shared by base-model and fine-tuned checkpoints.

    ``header["arrays"]`` fixes the storage order; payload bytes are exact
    float64, so load/save round-trips bit for bit.
    """
    order = [entry["name"] for entry in header["arrays"]]
    if set(order) != set(arrays):
        raise ConfigError("header array list does not match the arrays given")
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        f.write(np.uint32(len(blob)).tobytes())
        f.write(blob)
        for name in order:
            f.write(np.ascontiguousarray(arrays[name], dtype=np.float64).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path}: not a model checkpoint")
        version = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        if version != CHECKPOINT_VERSION:
            raise ConfigError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        hlen = int(np.frombuffer(f.read(4), dtype=np.uint32)[0])
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays: dict[str, np.ndarray] = {}
        for entry in header["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = f.read(8 * count)
            if len(raw) != 8 * count:
                raise ConfigError(f"{path}: truncated payload for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=np.float64).reshape(shape).copy()
        if f.read(1):
            raise ConfigError(f"{path}: trailing bytes after the declared arrays")
    return header, arrays


def save_model(path, model: CvrModel) -> None:
    names = model.param_names()
    header = {
        "kind": "cvr_model",
        "config": model.config.to_dict(),
        "arrays": [{"name": n, "shape": list(model.params[n].shape)} for n in names],
    }
    write_checkpoint(path, header, model.params)


def load_model(path) -> CvrModel:
    header, arrays = read_checkpoint(path)
    if header.get("kind") != "cvr_model":
        raise ConfigError(f"{path}: checkpoint kind {header.get('kind')!r}, expected 'cvr_model'")
    return CvrModel(ModelConfig.from_dict(header["config"]), arrays)


def inspect_checkpoint(path) -> dict:
    """Header plus cheap parameter statistics, for the CLI inspect verb."""
    header, arrays = read_checkpoint(path)
    return {
        "kind": header.get("kind"),
        "config": header.get("config"),
        "fine_tuned": header.get("fine_tuned", False),
        "n_arrays": len(arrays),
        "n_params": int(sum(a.size for a in arrays.values())),
        "arrays": [
            {
                "name": entry["name"],
                "shape": entry["shape"],
                "l2": float(np.linalg.norm(arrays[entry["name"]])),
            }
            for entry in header["arrays"]
        ],
    }
