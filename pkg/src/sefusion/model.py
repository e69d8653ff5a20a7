"""Classification head, logit-adjusted loss, training and checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, LabelPrior, TaskSpec, compute_priors, get_task
from .errors import DataFormatError, NumericalError, ShapeError, UsageError
from .fusion import FusionParams, init_fusion_params, sefusion_forward
from .metrics import accuracy, weighted_f1
from .numerics import (
    AdamState,
    Parameter,
    Tensor,
    adam_step,
    add,
    affine,
    backward,
    concat_cols,
    constant,
    glorot_uniform,
    relu,
    resolve_dtype,
    softmax_cross_entropy,
)

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "sefusion-checkpoint"
CHECKPOINT_VERSION = 1


def default_layers(task) -> int:
    """Two dense layers for tasks A and B, five for the C scales."""
    return 5 if get_task(task).group == "C" else 2


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class FusionConfig:
    kind: str = "sefusion"  # or "concat" for the plain-concatenation baseline
    biases: bool = True
    dims: tuple[int, int] = (768, 512)

    def __post_init__(self):
        if self.kind not in ("sefusion", "concat"):
            raise UsageError(f"unknown fusion kind {self.kind!r}")
        self.dims = tuple(int(d) for d in self.dims)


@dataclass
class HeadConfig:
    n_layers: int = 2
    hidden_width: int = 64
    output_classes: int = 3
    final_activation: str = "softmax"
    zero_final: bool = False

    def __post_init__(self):
        if self.n_layers < 1:
            raise UsageError("the head needs at least one layer")
        if self.output_classes < 2:
            raise UsageError("the head needs at least two classes")
        if self.final_activation not in ("softmax", "sigmoid"):
            raise UsageError(f"final activation must be softmax or sigmoid, got {self.final_activation!r}")
        if self.final_activation == "sigmoid" and self.output_classes != 2:
            raise UsageError("the single-logit sigmoid head is only defined for two classes")

    @property
    def final_width(self) -> int:
        return 1 if self.final_activation == "sigmoid" else self.output_classes


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    tau: float = 1.0
    precision: str = "float32"
    smooth_prior: bool = False
    select_on: str = "accuracy"  # or "weighted_f1"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise UsageError("epochs must be >= 0 and batch_size >= 1")
        if self.select_on not in ("accuracy", "weighted_f1"):
            raise UsageError(f"select_on must be accuracy or weighted_f1, got {self.select_on!r}")
        resolve_dtype(self.precision)


# ---------------------------------------------------------------------------
# head and loss
# ---------------------------------------------------------------------------


@dataclass
class Head:
    config: HeadConfig
    input_width: int
    weights: list[Parameter]
    biases: list[Parameter]

    def parameters(self) -> list[Parameter]:
        return [p for pair in zip(self.weights, self.biases) for p in pair]


def init_head(config: HeadConfig, input_width: int, rng: np.random.Generator, precision="float32") -> Head:
    dtype = resolve_dtype(precision)
    widths = [input_width] + [config.hidden_width] * (config.n_layers - 1) + [config.final_width]
    weights, biases = [], []
    for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = glorot_uniform(rng, fan_in, fan_out, dtype)
        if config.zero_final and k == config.n_layers - 1:
            w = np.zeros_like(w)
        weights.append(Parameter(w, f"head.W{k}"))
        biases.append(Parameter(np.zeros((1, fan_out), dtype=dtype), f"head.b{k}"))
    return Head(config, input_width, weights, biases)


def head_forward(fused, head: Head) -> Tensor:
    """Hidden affine+ReLU layers then a final affine; returns raw logits.

    In single-logit sigmoid mode the output is expanded to ``[0, l]`` so that
    softmax over it equals ``[1 - sigmoid(l), sigmoid(l)]``.
    """
    x = constant(fused, head.weights[0].dtype)
    if x.cols != head.input_width:
        raise ShapeError(f"head expects width {head.input_width}, got {x.cols}")
    last = len(head.weights) - 1
    for k, (w, b) in enumerate(zip(head.weights, head.biases)):
        x = affine(x, w, b)
        if k < last:
            x = relu(x)
    if head.config.final_activation == "sigmoid":
        x = concat_cols(np.zeros((x.rows, 1), dtype=x.dtype), x)
    return x


def concat_baseline_forward(xt, xi, head: Head) -> Tensor:
    """Head applied to the plain concatenation of both modalities."""
    dtype = head.weights[0].dtype
    return head_forward(concat_cols(constant(xt, dtype), constant(xi, dtype)), head)


def logit_offset(prior: LabelPrior, tau: float) -> np.ndarray:
    if tau == 0:
        return np.zeros((1, len(prior.counts)))
    return (tau * prior.log_probabilities()).reshape(1, -1)


def logit_adjusted_loss(logits, labels, prior: LabelPrior, tau: float = 1.0) -> Tensor:
    """Mean of ``-log softmax(logits + tau * log prior)[label]`` over rows."""
    logits = constant(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if len(prior.counts) != logits.cols:
        raise ShapeError(f"prior has {len(prior.counts)} classes but logits have {logits.cols}")
    if tau != 0:
        logits = add(logits, logit_offset(prior, tau))
    return softmax_cross_entropy(logits, labels)


# ---------------------------------------------------------------------------
# trained model
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float
    val_weighted_f1: float


@dataclass
class TrainedModel:
    task: TaskSpec
    fusion_config: FusionConfig
    head: Head
    fusion: FusionParams | None
    prior: LabelPrior
    tau: float = 1.0
    precision: str = "float32"
    seed: int | None = None
    history: list[EpochRecord] = field(default_factory=list)
    selected_epoch: int | None = None

    @property
    def dims(self) -> tuple[int, int]:
        return self.fusion_config.dims

    def parameters(self) -> list[Parameter]:
        fusion = self.fusion.parameters() if self.fusion is not None else []
        return fusion + self.head.parameters()

    def logits(self, xt, xi) -> Tensor:
        dtype = resolve_dtype(self.precision)
        xt, xi = constant(xt, dtype), constant(xi, dtype)
        if (xt.cols, xi.cols) != self.dims:
            raise ShapeError(f"model expects feature widths {self.dims}, got ({xt.cols}, {xi.cols})")
        if self.fusion is None:
            return concat_baseline_forward(xt, xi, self.head)
        return head_forward(sefusion_forward(xt, xi, self.fusion).fused, self.head)

    def loss(self, xt, xi, labels) -> Tensor:
        return logit_adjusted_loss(self.logits(xt, xi), labels, self.prior, self.tau)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.value[...] = values[p.name]


def predict(model: TrainedModel, xt, xi, adjusted: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Class indices and probabilities for each row.

    Probabilities are ``softmax(logits + tau * log prior)``, the same
    adjustment the training loss applies; ``adjusted=False`` drops the prior
    term and scores with the raw logits. Ties go to the lowest index.
    """
    logits = model.logits(xt, xi).value.astype(np.float64)
    if adjusted and model.tau != 0:
        logits = logits + logit_offset(model.prior, model.tau)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return np.argmax(probs, axis=1), probs


def evaluate_split(model: TrainedModel, data: Dataset, adjusted: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Gold labels and predictions on a labelled dataset."""
    gold = data.labels(model.task)
    xt, xi = data.features()
    pred, _ = predict(model, xt, xi, adjusted)
    return gold, pred


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def build_model(
    task,
    prior: LabelPrior,
    fusion_cfg: FusionConfig | None = None,
    head_cfg: HeadConfig | None = None,
    tau: float = 1.0,
    precision: str = "float32",
    seed: int | None = 0,
) -> TrainedModel:
    spec = get_task(task)
    fusion_cfg = fusion_cfg or FusionConfig()
    head_cfg = head_cfg or HeadConfig(n_layers=default_layers(spec), output_classes=spec.class_count)
    if head_cfg.output_classes != spec.class_count:
        raise UsageError(f"head has {head_cfg.output_classes} outputs but task {spec.id} has {spec.class_count} classes")
    init_rng = np.random.default_rng([seed or 0, 0])
    if fusion_cfg.kind == "sefusion":
        fusion = init_fusion_params(fusion_cfg.dims, biases=fusion_cfg.biases, rng=init_rng, precision=precision)
        width = fusion.fused_width
    else:
        fusion = None
        width = sum(fusion_cfg.dims)
    head = init_head(head_cfg, width, init_rng, precision)
    return TrainedModel(spec, fusion_cfg, head, fusion, prior, tau, precision, seed)


def _labelled_split(dataset: Dataset, split: str, spec: TaskSpec) -> Dataset:
    part = dataset.split(split)
    if not len(part):
        raise UsageError(f"the {split} split is empty")
    labelled = part.labelled(spec)
    if not len(labelled):
        raise DataFormatError(f"no {split} records carry labels for task {spec.id}")
    return labelled


def train(
    dataset: Dataset,
    task,
    fusion_cfg: FusionConfig | None = None,
    head_cfg: HeadConfig | None = None,
    train_cfg: TrainConfig | None = None,
    seed: int = 0,
) -> TrainedModel:
    """Mini-batch Adam on the train split, keeping the best validation epoch.

    The prior comes from the train split only. After the last epoch the
    parameters are restored to the epoch with the highest validation
    accuracy (or weighted-F1 with ``select_on="weighted_f1"``); ties go to
    the earliest epoch. Everything, shuffling included, is driven by ``seed``.
    """
    spec = get_task(task)
    cfg = train_cfg or TrainConfig()
    fusion_cfg = fusion_cfg or FusionConfig(dims=(dataset.text_dim, dataset.image_dim))
    if (dataset.text_dim, dataset.image_dim) != fusion_cfg.dims:
        raise ShapeError(f"dataset widths ({dataset.text_dim}, {dataset.image_dim}) differ from fusion dims {fusion_cfg.dims}")
    tr = _labelled_split(dataset, "train", spec)
    va = _labelled_split(dataset, "validation", spec)

    prior = compute_priors(dataset, spec, "train", smooth=cfg.smooth_prior)
    if cfg.tau != 0:
        prior.log_probabilities()  # fail early on a degenerate prior
    model = build_model(spec, prior, fusion_cfg, head_cfg, cfg.tau, cfg.precision, seed)
    params = model.parameters()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    shuffle_rng = np.random.default_rng([seed, 1])

    dtype = resolve_dtype(cfg.precision)
    xt_all, xi_all = (a.astype(dtype) for a in tr.features())
    y_all = tr.labels(spec)
    val_xt, val_xi = va.features()
    val_y = va.labels(spec)
    n = len(tr)

    best_score, best_values = -np.inf, None
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss = model.loss(xt_all[idx], xi_all[idx], y_all[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            backward(loss, params)
            adam_step(params, state)
            loss_sum += value * len(idx)
        pred, _ = predict(model, val_xt, val_xi)
        acc, wf1 = accuracy(val_y, pred), weighted_f1(val_y, pred, spec.class_count)
        model.history.append(EpochRecord(epoch, loss_sum / n, acc, wf1))
        score = acc if cfg.select_on == "accuracy" else wf1
        if score > best_score:
            best_score, best_values = score, model.snapshot()
            model.selected_epoch = epoch
        log.debug("epoch %d loss %.6f val acc %.4f val wF1 %.4f", epoch, loss_sum / n, acc, wf1)

    if best_values is not None:
        model.restore(best_values)
    return model


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: TrainedModel, path) -> None:
    """JSON container; parameter values are stored as 64-bit floats."""
    obj = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "task": model.task.id,
        "seed": model.seed,
        "precision": model.precision,
        "tau": model.tau,
        "fusion": {"kind": model.fusion_config.kind, "biases": model.fusion_config.biases, "dims": list(model.dims)},
        "head": asdict(model.head.config),
        "prior": {"counts": list(model.prior.counts), "smoothed": model.prior.smoothed},
        "selected_epoch": model.selected_epoch,
        "params": {
            p.name: {"shape": list(p.shape), "values": [float(v) for v in p.value.astype(np.float64).reshape(-1)]}
            for p in model.parameters()
        },
    }
    Path(path).write_text(json.dumps(obj, allow_nan=False) + "\n", encoding="utf-8")


def load_checkpoint(path) -> TrainedModel:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"cannot read checkpoint {path}: {exc}") from None
    if obj.get("format") != CHECKPOINT_FORMAT or obj.get("version") != CHECKPOINT_VERSION:
        raise DataFormatError(f"{path} is not a version-{CHECKPOINT_VERSION} checkpoint")
    fusion_cfg = FusionConfig(**obj["fusion"])
    head_cfg = HeadConfig(**obj["head"])
    prior = LabelPrior(tuple(obj["prior"]["counts"]), obj["prior"]["smoothed"])
    model = build_model(obj["task"], prior, fusion_cfg, head_cfg, obj["tau"], obj["precision"], obj["seed"])
    model.selected_epoch = obj["selected_epoch"]
    stored = obj["params"]
    dtype = resolve_dtype(model.precision)
    for p in model.parameters():
        if p.name not in stored:
            raise DataFormatError(f"checkpoint {path} lacks parameter {p.name}")
        entry = stored[p.name]
        if tuple(entry["shape"]) != p.shape:
            raise DataFormatError(f"checkpoint {path}: {p.name} has shape {entry['shape']}, expected {list(p.shape)}")
        p.value[...] = np.asarray(entry["values"], dtype=np.float64).reshape(p.shape).astype(dtype)
    return model


def save_history(model: TrainedModel, path) -> None:
    obj = {
        "task": model.task.id,
        "seed": model.seed,
        "selected_epoch": model.selected_epoch,
        "history": [asdict(r) for r in model.history],
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")
