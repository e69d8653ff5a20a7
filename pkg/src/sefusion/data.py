"""Sub-task definitions, feature files, text rules, priors and synthetic data.

The feature file is line-delimited JSON. The first line is a header::

    {"format": "sefusion-features", "version": 1, "text_dim": 768, "image_dim": 512}

and every following line is one record::

    {"id": "...", "split": "train", "labels": {"A": 1}, "text_features": [...], "image_features": [...]}

Floats are written with Python's shortest round-trip repr, so a
save/load cycle reproduces float64 values bit for bit. Paths ending in
``.gz`` are read and written gzip-compressed.
"""

from __future__ import annotations

import gzip
import io
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataFormatError, PriorError, UsageError

FORMAT_NAME = "sefusion-features"
FORMAT_VERSION = 1
SPLITS = ("train", "validation", "test")


# ---------------------------------------------------------------------------
# sub-tasks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TaskSpec:
    id: str
    label_names: tuple[str, ...]
    description: str = ""

    @property
    def class_count(self) -> int:
        return len(self.label_names)

    @property
    def group(self) -> str:
        return self.id[0]


TASKS: dict[str, TaskSpec] = {
    t.id: t
    for t in (
        TaskSpec("A", ("positive", "neutral", "negative"), "overall sentiment"),
        TaskSpec("B1", ("humorous", "not_humorous"), "humour"),
        TaskSpec("B2", ("sarcastic", "not_sarcastic"), "sarcasm"),
        TaskSpec("B3", ("offensive", "not_offensive"), "offense"),
        TaskSpec("B4", ("motivational", "not_motivational"), "motivation"),
        TaskSpec("C1", ("not_funny", "funny", "very_funny", "hilarious"), "scale of humour"),
        TaskSpec("C2", ("not_sarcastic", "general", "twisted_meaning", "very_twisted"), "scale of sarcasm"),
        TaskSpec("C3", ("not_offensive", "slight", "very_offensive", "hateful_offensive"), "scale of offense"),
    )
}

# the motivational scale is binary, so C4 is the same problem as B4
TASK_ALIASES = {"C4": "B4"}

TASK_GROUPS = {"A": ("A",), "B": ("B1", "B2", "B3", "B4"), "C": ("C1", "C2", "C3", "C4")}

# Memotion 3 label counts per split, in label_names order
MEMOTION3_COUNTS: dict[str, dict[str, tuple[int, ...]]] = {
    "A": {"train": (2275, 2970, 1755), "validation": (341, 579, 580), "test": (586, 533, 381)},
    "B1": {"train": (5990, 1010), "validation": (1401, 99), "test": (1389, 111)},
    "B2": {"train": (5524, 1476), "validation": (1377, 123), "test": (1367, 133)},
    "B3": {"train": (2736, 4264), "validation": (859, 641), "test": (825, 675)},
    "B4": {"train": (830, 6170), "validation": (43, 1457), "test": (56, 1444)},
    "C1": {"train": (1010, 3393, 2038, 559), "validation": (99, 973, 375, 53), "test": (111, 928, 406, 55)},
    "C2": {"train": (1476, 1953, 3021, 550), "validation": (123, 977, 376, 24), "test": (133, 936, 403, 28)},
    "C3": {"train": (4264, 1935, 610, 191), "validation": (641, 804, 44, 11), "test": (675, 762, 50, 13)},
}


def canonical_task_id(task_id: str) -> str:
    tid = str(task_id).strip().upper()
    tid = TASK_ALIASES.get(tid, tid)
    if tid not in TASKS:
        raise UsageError(f"unknown sub-task {task_id!r}; expected one of {sorted(TASKS) + sorted(TASK_ALIASES)}")
    return tid


def get_task(task) -> TaskSpec:
    if isinstance(task, TaskSpec):
        return task
    return TASKS[canonical_task_id(task)]


# ---------------------------------------------------------------------------
# preprocessing contracts
# ---------------------------------------------------------------------------

_USER_RE = re.compile(r"(?<!\S)@\S+")
_URL_RE = re.compile(r"(?<!\S)(?:https?://|www\.)\S*", re.IGNORECASE)


def preprocess_text(raw: str) -> str:
    """Replace user handles with ``@user`` and links with ``http``.

    A token is a maximal run of non-whitespace. Tokens starting with ``@``
    (plus at least one more character) become ``@user``; tokens starting with
    ``http://``, ``https://`` or ``www.`` become ``http``. Whitespace and every
    other character are left alone, so ``a@b.c`` survives.
    """
    return _USER_RE.sub("@user", _URL_RE.sub("http", raw))


def average_pool(token_features) -> np.ndarray:
    """Column-wise mean of a (T x D) token matrix, returned as (1 x D)."""
    arr = np.asarray(token_features, dtype=np.float64)
    if arr.ndim != 2:
        raise UsageError(f"token features must be 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise UsageError("cannot average zero tokens")
    return arr.mean(axis=0, keepdims=True)


def l2_normalize(v, eps: float = 1e-12) -> np.ndarray:
    """``v / max(||v||, eps)`` row by row; a zero row stays zero."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    norms = np.sqrt((arr * arr).sum(axis=1, keepdims=True))
    return arr / np.maximum(norms, eps)


# ---------------------------------------------------------------------------
# records and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    id: str
    split: str
    text_features: np.ndarray
    image_features: np.ndarray
    labels: Mapping[str, int | None] = field(default_factory=dict)

    def label(self, task) -> int | None:
        return self.labels.get(get_task(task).id)


class Dataset:
    """An ordered, immutable collection of records with uniform widths."""

    def __init__(self, records: Iterable[Record] = (), text_dim: int | None = None, image_dim: int | None = None):
        self.records: tuple[Record, ...] = tuple(records)
        if self.records:
            text_dim = self.records[0].text_features.shape[0] if text_dim is None else text_dim
            image_dim = self.records[0].image_features.shape[0] if image_dim is None else image_dim
        self.text_dim = text_dim
        self.image_dim = image_dim
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataFormatError(f"duplicate record id {r.id!r}")
            seen.add(r.id)
            _validate_record(r, text_dim, image_dim)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[Record]:
        return iter(self.records)

    def split(self, name: str) -> "Dataset":
        return Dataset([r for r in self.records if r.split == name], self.text_dim, self.image_dim)

    def splits(self) -> list[str]:
        present = {r.split for r in self.records}
        return [s for s in SPLITS if s in present]

    def features(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.records:
            return np.zeros((0, self.text_dim or 0)), np.zeros((0, self.image_dim or 0))
        xt = np.stack([r.text_features for r in self.records])
        xi = np.stack([r.image_features for r in self.records])
        return xt, xi

    def labels(self, task) -> np.ndarray:
        """Label indices for ``task``; raises if any record lacks one."""
        spec = get_task(task)
        out = []
        for r in self.records:
            y = r.labels.get(spec.id)
            if y is None:
                raise DataFormatError(f"record {r.id!r} has no label for task {spec.id}")
            out.append(y)
        return np.asarray(out, dtype=np.int64)

    def labelled(self, task) -> "Dataset":
        spec = get_task(task)
        return Dataset([r for r in self.records if r.labels.get(spec.id) is not None], self.text_dim, self.image_dim)

    def tasks(self) -> list[str]:
        found = {t for r in self.records for t, y in r.labels.items() if y is not None}
        return [t for t in TASKS if t in found]


def _validate_record(r: Record, text_dim, image_dim):
    if r.split not in SPLITS:
        raise DataFormatError(f"record {r.id!r}: unknown split {r.split!r}; expected one of {SPLITS}")
    for what, vec, dim in (("text", r.text_features, text_dim), ("image", r.image_features, image_dim)):
        if vec.ndim != 1:
            raise DataFormatError(f"record {r.id!r}: {what} features must be a flat vector")
        if dim is not None and vec.shape[0] != dim:
            raise DataFormatError(f"record {r.id!r}: {what} features have width {vec.shape[0]}, expected {dim}")
        if not np.all(np.isfinite(vec)):
            raise DataFormatError(f"record {r.id!r}: {what} features contain non-finite values")
    for tid, y in r.labels.items():
        if tid not in TASKS:
            raise DataFormatError(f"record {r.id!r}: unknown task key {tid!r}")
        if y is not None and not 0 <= y < TASKS[tid].class_count:
            raise DataFormatError(f"record {r.id!r}: label {y} out of range for task {tid}")


def _normalise_labels(raw: Mapping) -> dict[str, int | None]:
    out = {}
    for k, v in raw.items():
        tid = canonical_task_id(k)
        if v is not None and (isinstance(v, bool) or not isinstance(v, int)):
            raise DataFormatError(f"label for task {k} must be an integer index, got {v!r}")
        out[tid] = v
    return out


def make_record(id: str, split: str, text_features, image_features, labels: Mapping | None = None) -> Record:
    return Record(
        id=str(id),
        split=split,
        text_features=np.asarray(text_features, dtype=np.float64).reshape(-1),
        image_features=np.asarray(image_features, dtype=np.float64).reshape(-1),
        labels=_normalise_labels(labels or {}),
    )


def _open_text(path: Path, mode: str):
    if path.suffix == ".gz":
        if "w" in mode:
            # fixed mtime and no embedded filename keep the output byte-identical
            raw = open(path, "wb")
            return io.TextIOWrapper(gzip.GzipFile(filename="", mode="wb", fileobj=raw, mtime=0), encoding="utf-8", newline="\n"), raw
        return io.TextIOWrapper(gzip.open(path, "rb"), encoding="utf-8"), None
    return open(path, mode, encoding="utf-8", newline="\n" if "w" in mode else None), None


def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    fh, raw = _open_text(path, "w")
    try:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "text_dim": dataset.text_dim, "image_dim": dataset.image_dim}
        fh.write(json.dumps(header) + "\n")
        for r in dataset:
            line = {
                "id": r.id,
                "split": r.split,
                "labels": dict(r.labels),
                "text_features": [float(v) for v in r.text_features],
                "image_features": [float(v) for v in r.image_features],
            }
            fh.write(json.dumps(line, allow_nan=False) + "\n")
    finally:
        fh.close()
        if raw is not None:
            raw.close()


def load_dataset(path, text_dim: int | None = None, image_dim: int | None = None) -> Dataset:
    """Parse a feature file. An empty file gives an empty dataset."""
    path = Path(path)
    try:
        fh, _ = _open_text(path, "r")
    except OSError as exc:
        raise DataFormatError(f"cannot open feature file {path}: {exc}") from exc
    records: list[Record] = []
    header = None
    seen: set[str] = set()
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            if header is None:
                if obj.get("format") != FORMAT_NAME:
                    raise DataFormatError(f"{path}:{lineno}: missing header line with format {FORMAT_NAME!r}")
                if obj.get("version") != FORMAT_VERSION:
                    raise DataFormatError(f"{path}:{lineno}: unsupported format version {obj.get('version')!r}")
                header = obj
                for key, want in (("text_dim", text_dim), ("image_dim", image_dim)):
                    if want is not None and header.get(key) is not None and header[key] != want:
                        raise DataFormatError(f"{path}: header declares {key}={header[key]}, expected {want}")
                text_dim = header.get("text_dim") if text_dim is None else text_dim
                image_dim = header.get("image_dim") if image_dim is None else image_dim
                continue
            try:
                rec = make_record(obj["id"], obj["split"], obj["text_features"], obj["image_features"], obj.get("labels") or {})
            except KeyError as exc:
                raise DataFormatError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except (TypeError, ValueError) as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            if rec.id in seen:
                raise DataFormatError(f"{path}:{lineno}: duplicate record id {rec.id!r}")
            seen.add(rec.id)
            try:
                _validate_record(rec, text_dim, image_dim)
            except DataFormatError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            records.append(rec)
    return Dataset(records, text_dim, image_dim)


# ---------------------------------------------------------------------------
# priors and summaries
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LabelPrior:
    """Class counts from one split and the distribution they imply."""

    counts: tuple[int, ...]
    smoothed: bool = False

    @property
    def probabilities(self) -> np.ndarray:
        c = np.asarray(self.counts, dtype=np.float64)
        return c / c.sum()

    def log_probabilities(self) -> np.ndarray:
        if any(c <= 0 for c in self.counts):
            missing = [i for i, c in enumerate(self.counts) if c <= 0]
            raise PriorError(f"class(es) {missing} have zero prior probability; smooth the prior first (--smooth-prior)")
        return np.log(self.probabilities)

    def majority(self) -> int:
        return int(np.argmax(self.counts))

    def to_dict(self) -> dict:
        return {"counts": list(self.counts), "smoothed": self.smoothed, "probabilities": [float(p) for p in self.probabilities]}


def compute_priors(dataset: Dataset, task, split: str = "train", smooth: bool = False) -> LabelPrior:
    """Label distribution of ``task`` on one split; ``smooth`` adds one to each count."""
    spec = get_task(task)
    part = dataset.split(split).labelled(spec)
    if not len(part):
        raise UsageError(f"split {split!r} has no records labelled for task {spec.id}")
    tally = Counter(int(y) for y in part.labels(spec))
    counts = tuple(tally.get(k, 0) + (1 if smooth else 0) for k in range(spec.class_count))
    return LabelPrior(counts, smoothed=smooth)


def round_half_up_percent(count: int, total: int) -> int:
    if total == 0:
        return 0
    return (200 * count + total) // (2 * total)


@dataclass(frozen=True)
class LabelDistribution:
    counts: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.counts)

    @property
    def percents(self) -> tuple[int, ...]:
        return tuple(round_half_up_percent(c, self.total) for c in self.counts)

    def cells(self) -> list[str]:
        return [f"{c:,}({p}%)" for c, p in zip(self.counts, self.percents)]


@dataclass
class DatasetSummary:
    split_sizes: dict[str, int]
    distributions: dict[str, dict[str, LabelDistribution]]

    def to_dict(self) -> dict:
        return {
            "split_sizes": dict(self.split_sizes),
            "tasks": {
                tid: {s: {"counts": list(d.counts), "percents": list(d.percents)} for s, d in per.items()}
                for tid, per in self.distributions.items()
            },
        }

    def format(self) -> str:
        lines = ["split sizes: " + ", ".join(f"{s}={n}" for s, n in self.split_sizes.items())]
        for tid, per in self.distributions.items():
            names = TASKS[tid].label_names
            lines.append(f"task {tid}")
            width = max(len(n) for n in names)
            lines.append(" " * width + "  " + "  ".join(f"{s:>14}" for s in per))
            for k, name in enumerate(names):
                lines.append(f"{name:<{width}}  " + "  ".join(f"{d.cells()[k]:>14}" for d in per.values()))
        return "\n".join(lines)


def summarize(dataset: Dataset) -> DatasetSummary:
    sizes = {s: 0 for s in SPLITS}
    for r in dataset:
        sizes[r.split] += 1
    dists: dict[str, dict[str, LabelDistribution]] = {}
    for tid in dataset.tasks():
        spec = TASKS[tid]
        per = {}
        for s in SPLITS:
            tally = Counter(r.labels.get(tid) for r in dataset if r.split == s)
            per[s] = LabelDistribution(tuple(tally.get(k, 0) for k in range(spec.class_count)))
        dists[tid] = per
    return DatasetSummary(sizes, dists)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


def allocate_counts(n: int, proportions: Sequence[float]) -> list[int]:
    """Split ``n`` into per-class counts by largest remainder, at least one each."""
    p = np.asarray(proportions, dtype=np.float64)
    ideal = n * p / p.sum()
    counts = np.floor(ideal).astype(int)
    order = sorted(range(len(p)), key=lambda k: (-(ideal[k] - counts[k]), k))
    for k in order[: n - counts.sum()]:
        counts[k] += 1
    for k in range(len(counts)):
        if counts[k] == 0:
            counts[int(np.argmax(counts))] -= 1
            counts[k] = 1
    return counts.tolist()


def synth_dataset(
    seed: int,
    n_per_split: int | Mapping[str, int],
    task,
    separability: float = 1.0,
    proportions: Sequence[float] | str | None = None,
    dims: tuple[int, int] = (768, 512),
    noise: float = 1.0,
) -> Dataset:
    """Gaussian class clusters in the joint (text ++ image) feature space.

    Class centres sit on mutually orthogonal directions, scaled so that
    neighbouring centres are ``12 * noise * separability`` apart: each centre
    is six noise standard deviations from the bisecting hyperplane when
    ``separability`` is 1, and all classes share one distribution at 0.
    ``proportions`` may be explicit weights, ``"uniform"`` or ``"memotion"``
    (the Memotion 3 training split's label distribution for ``task``).
    A split size of 0 omits the split; otherwise every class gets at least
    one sample.
    """
    spec = get_task(task)
    C = spec.class_count
    if not 0.0 <= separability <= 1.0:
        raise UsageError(f"separability must lie in [0, 1], got {separability}")
    if isinstance(n_per_split, Mapping):
        sizes = {s: int(n) for s, n in n_per_split.items()}
    else:
        sizes = {s: int(n_per_split) for s in SPLITS}
    for s, n in sizes.items():
        if s not in SPLITS:
            raise UsageError(f"unknown split {s!r}")
        if 0 < n < C or n < 0:
            raise UsageError(f"split {s!r} needs 0 or at least {C} samples for task {spec.id}, got {n}")
    sizes = {s: n for s, n in sizes.items() if n > 0}

    if proportions is None or proportions == "uniform":
        props = np.ones(C)
    elif proportions == "memotion":
        props = np.asarray(MEMOTION3_COUNTS[spec.id]["train"], dtype=np.float64)
    else:
        props = np.asarray(proportions, dtype=np.float64)
    if props.shape != (C,) or not np.all(np.isfinite(props)) or np.any(props < 0) or props.sum() <= 0:
        raise UsageError(f"proportions must be {C} non-negative weights with a positive sum, got {proportions!r}")

    dt, di = int(dims[0]), int(dims[1])
    D = dt + di
    if D < C:
        raise UsageError(f"feature width {D} is too small for {C} orthogonal class centres")
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((D, C)))
    radius = 12.0 * noise * separability / np.sqrt(2.0)
    centres = radius * q.T

    records = []
    for s in SPLITS:
        if s not in sizes:
            continue
        counts = allocate_counts(sizes[s], props)
        labels = rng.permutation(np.repeat(np.arange(C), counts))
        x = centres[labels] + noise * rng.standard_normal((len(labels), D))
        for i, (y, row) in enumerate(zip(labels, x)):
            records.append(Record(f"{s}-{i:05d}", s, row[:dt].copy(), row[dt:].copy(), {spec.id: int(y)}))
    return Dataset(records, dt, di)
