"""Raw sensor streams to normalized, reduced, cleaned token sequences.

The pipeline: align multi-rate channel streams on their timestamps, cut
non-overlapping 15 s windows of 15 one-second tokens, split chronologically
per subject (70/10/20), min-max scale, project with PCA fitted on train, and
drop low-quality samples by clustering per-sample training-loss curves.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .io import MAGIC_CHECKPOINT, load_container, load_tensor_blob, save_container, save_tensor_blob
from .numerics import AdamState, adam_update, kmeans2, sym_eig
from .seeding import rng_from
from .errors import DegeneracyError

SEQUENCE_TOKENS = 15
SPLIT_FRACTIONS = (0.7, 0.1, 0.2)

# Canonical channel registry: (name, sampling rate Hz, components per sample).
# Wrist device rows first, then handset rows; this fixed order defines the
# feature layout inside every one-second token (299 features total).
DEFAULT_CHANNELS: tuple[tuple[str, int, int], ...] = (
    ("gsr", 4, 1),
    ("skin_temperature", 4, 1),
    ("acceleration", 32, 3),
    ("heart_rate", 1, 1),
    ("blood_volume_pulse", 64, 1),
    ("humidity", 5, 1),
    ("ambient_illuminance", 5, 1),
    ("ambient_light_rgbw", 5, 4),
    ("ambient_temperature", 5, 1),
    ("gravity", 5, 3),
    ("angular_velocity", 5, 3),
    ("orientation", 5, 3),
    ("phone_acceleration", 5, 3),
    ("linear_acceleration", 5, 3),
    ("air_pressure", 5, 1),
    ("proximity", 5, 1),
    ("wifi_strength", 5, 1),
    ("magnetic_field", 5, 1),
)


@dataclass
class ChannelStream:
    """One sensor channel: samples at a fixed integer rate from `start` seconds."""

    rate: int
    start: float
    values: np.ndarray  # (n,) or (n, width)

    def __post_init__(self):
        if int(self.rate) != self.rate or self.rate <= 0:
            raise ValidationError(f"channel rate must be a positive integer, got {self.rate}")
        self.rate = int(self.rate)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        if self.values.ndim != 2:
            raise ValidationError("channel values must be 1-D or 2-D (samples, components)")

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def end(self) -> float:
        return self.start + self.values.shape[0] / self.rate


@dataclass
class RawRecording:
    subject_id: str
    label: int | None
    streams: dict[str, ChannelStream]


@dataclass
class SensorSequence:
    """One 15-token sequence; rows are one-second feature vectors."""

    tokens: np.ndarray
    subject_id: str
    label: int | None = None
    task_id: str | None = None

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        if self.tokens.ndim != 2 or self.tokens.shape[0] != SEQUENCE_TOKENS:
            raise ValidationError(
                f"sequence must have exactly {SEQUENCE_TOKENS} tokens, got {self.tokens.shape}"
            )
        if not np.isfinite(self.tokens).all():
            raise ValidationError("sequence contains non-finite values")

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


def align_and_window(
    rec: RawRecording,
    window_seconds: int = SEQUENCE_TOKENS,
    expected_channels: list[str] | None = None,
) -> list[SensorSequence]:
    """Cut a recording into non-overlapping 15 s sequences of 1 s tokens.

    Channels are aligned on their timestamps; within each token, every
    channel's samples for that second are flattened (time order, components
    within a sample kept adjacent) and concatenated in the recording's channel
    order. A trailing partial window is dropped; less than one full window
    yields an empty list.
    """
    if expected_channels is not None:
        missing = [c for c in expected_channels if c not in rec.streams]
        if missing:
            raise ValidationError(f"recording {rec.subject_id!r} missing channels {missing}")
        names = list(expected_channels)
    else:
        names = list(rec.streams)
    if not names:
        raise ValidationError("recording has no channels")

    streams = [rec.streams[n] for n in names]
    common_start = max(s.start for s in streams)
    common_end = min(s.end for s in streams)
    n_windows = int((common_end - common_start) // window_seconds)
    if n_windows <= 0:
        return []

    offsets = []
    for name, s in zip(names, streams):
        off = (common_start - s.start) * s.rate
        if abs(off - round(off)) > 1e-6:
            raise ValidationError(f"channel {name!r} is not sample-aligned to the common start")
        offsets.append(int(round(off)))

    total_seconds = n_windows * window_seconds
    per_second = []
    for s, off in zip(streams, offsets):
        chunk = s.values[off : off + total_seconds * s.rate]
        # (seconds, rate * width), samples in time order within each second
        per_second.append(chunk.reshape(total_seconds, s.rate * s.width))
    features = np.concatenate(per_second, axis=1)  # (seconds, D)

    out = []
    for w in range(n_windows):
        tokens = features[w * window_seconds : (w + 1) * window_seconds]
        out.append(SensorSequence(tokens=tokens, subject_id=rec.subject_id, label=rec.label))
    return out


@dataclass
class SplitDataset:
    train: list[SensorSequence]
    validation: list[SensorSequence]
    test: list[SensorSequence]
    provenance: dict = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "validation": self.validation, "test": self.test}


def chronological_split(
    sequences: list[SensorSequence], fractions: tuple[float, float, float] = SPLIT_FRACTIONS
) -> SplitDataset:
    """Per-subject time split: earliest 70% train, next 10% validation, rest test.

    The first two cuts use floor; the remainder goes to test, so a
    single-sequence subject lands entirely in test.
    """
    if not sequences:
        raise ValidationError("cannot split an empty sequence list")
    if abs(sum(fractions) - 1.0) > 1e-9 or any(f < 0 for f in fractions):
        raise ValidationError(f"split fractions must be non-negative and sum to 1, got {fractions}")
    by_subject: dict[str, list[SensorSequence]] = {}
    for s in sequences:
        by_subject.setdefault(s.subject_id, []).append(s)
    train: list[SensorSequence] = []
    val: list[SensorSequence] = []
    test: list[SensorSequence] = []
    for subj_seqs in by_subject.values():
        n = len(subj_seqs)
        n_train = int(fractions[0] * n)
        n_val = int(fractions[1] * n)
        train.extend(subj_seqs[:n_train])
        val.extend(subj_seqs[n_train : n_train + n_val])
        test.extend(subj_seqs[n_train + n_val :])
    prov = {"split": f"chronological per subject {fractions[0]}/{fractions[1]}/{fractions[2]}"}
    return SplitDataset(train=train, validation=val, test=test, provenance=prov)


@dataclass
class MinMaxScaler:
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        self.minimum = np.asarray(self.minimum, dtype=np.float64)
        self.maximum = np.asarray(self.maximum, dtype=np.float64)
        if (self.minimum > self.maximum).any():
            raise ValidationError("scaler has min > max")


def minmax_fit(train: list[SensorSequence]) -> MinMaxScaler:
    if not train:
        raise ValidationError("minmax_fit needs at least one sequence")
    x = np.concatenate([s.tokens for s in train], axis=0)
    return MinMaxScaler(minimum=x.min(axis=0), maximum=x.max(axis=0))


def minmax_apply(scaler: MinMaxScaler, sequences: list[SensorSequence]) -> list[SensorSequence]:
    """Scale to [0,1] with the fitted range; out-of-range values are clipped
    and constant features map to 0."""
    span = scaler.maximum - scaler.minimum
    safe = np.where(span > 0, span, 1.0)
    out = []
    for s in sequences:
        scaled = (s.tokens - scaler.minimum) / safe
        scaled = np.where(span > 0, scaled, 0.0)
        np.clip(scaled, 0.0, 1.0, out=scaled)
        out.append(SensorSequence(scaled, s.subject_id, s.label, s.task_id))
    return out


@dataclass
class PcaModel:
    mean: np.ndarray
    std: np.ndarray
    projection: np.ndarray  # (D, k), orthonormal columns
    k: int
    explained_variance_ratio: float


def pca_fit(train: list[SensorSequence], k: int = 128) -> PcaModel:
    """Standardize train features, eigendecompose the population covariance,
    and keep the top-k eigenvector directions."""
    if not train:
        raise ValidationError("pca_fit needs training sequences")
    x = np.concatenate([s.tokens for s in train], axis=0)
    n, d = x.shape
    if k > d:
        raise ValidationError(f"pca k={k} exceeds feature dimension {d}")
    if k < 1:
        raise ValidationError("pca k must be >= 1")
    if n <= k:
        raise ValidationError(f"pca needs more than k={k} training instances, got {n}")
    mean = x.mean(axis=0)
    std = x.std(axis=0)  # population std
    std_safe = np.where(std > 0, std, 1.0)
    z = (x - mean) / std_safe
    cov = (z.T @ z) / n
    vals, vecs = sym_eig(cov)
    vals = np.maximum(vals, 0.0)
    total = vals.sum()
    ratio = float(vals[:k].sum() / total) if total > 0 else 1.0
    return PcaModel(
        mean=mean, std=std_safe, projection=vecs[:, :k], k=k, explained_variance_ratio=ratio
    )


def pca_apply(model: PcaModel, sequences: list[SensorSequence]) -> list[SensorSequence]:
    out = []
    for s in sequences:
        z = (s.tokens - model.mean) / model.std
        out.append(SensorSequence(z @ model.projection, s.subject_id, s.label, s.task_id))
    return out


# -- loss-curve cleaning -------------------------------------------------------


@dataclass
class CtrlProbeConfig:
    hidden: int = 128
    epochs: int = 30
    lr: float = 0.005
    batch: int = 128


@dataclass
class CtrlCleanResult:
    clean: list[SensorSequence]
    rejected_indices: list[int]
    warning: bool = False
    curves: np.ndarray | None = None


def _probe_loss_and_grads(params, x, onehot):
    w1 = ad.Tensor(params["w1"], requires_grad=True)
    b1 = ad.Tensor(params["b1"], requires_grad=True)
    w2 = ad.Tensor(params["w2"], requires_grad=True)
    b2 = ad.Tensor(params["b2"], requires_grad=True)
    logits = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(ad.Tensor(x), w1), b1)), w2), b2)
    ls = ad.log_softmax(logits, axis=-1)
    loss = ad.mul(ad.tensor_sum(ad.mul(ls, ad.Tensor(onehot))), -1.0 / x.shape[0])
    loss.backward()
    return loss.item(), {"w1": w1.grad, "b1": b1.grad, "w2": w2.grad, "b2": b2.grad}


def _probe_sample_losses(params, x, labels) -> np.ndarray:
    h = np.maximum(x @ params["w1"] + params["b1"], 0.0)
    logits = h @ params["w2"] + params["b2"]
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels]


def cluster_loss_curves(curves: np.ndarray, seed: int) -> tuple[np.ndarray, bool]:
    """Split loss curves into a low-loss (keep) and high-loss (reject) group.

    Returns (keep_mask, degenerate). Clustering is considered degenerate when
    the two centroid mean losses are within 1e-3, in which case everything is
    kept.
    """
    try:
        assign, centroids = kmeans2(curves, seed=seed)
    except DegeneracyError:
        return np.ones(len(curves), dtype=bool), True
    means = centroids.mean(axis=1)
    if abs(means[0] - means[1]) < 1e-3:
        return np.ones(len(curves), dtype=bool), True
    low = int(means.argmin())
    return assign == low, False


def ctrl_clean(
    split: list[SensorSequence],
    config: CtrlProbeConfig | None = None,
    seed: int = 0,
) -> CtrlCleanResult:
    """Drop samples whose training-loss curves cluster with the high-loss centroid.

    Trains a small one-hidden-layer probe on the split, records each sample's
    loss after every epoch, and 2-means clusters the per-sample curves; the
    lower-centroid cluster is retained. Splits that cannot support the probe
    (fewer than 2 samples, missing labels, or a single class) are returned
    unchanged with ``warning=True``.
    """
    config = config or CtrlProbeConfig()
    if len(split) < 2:
        return CtrlCleanResult(clean=list(split), rejected_indices=[], warning=True)
    labels = [s.label for s in split]
    if any(lbl is None for lbl in labels) or len(set(labels)) < 2:
        return CtrlCleanResult(clean=list(split), rejected_indices=[], warning=True)

    x = np.stack([s.tokens.reshape(-1) for s in split])
    y = np.asarray(labels, dtype=np.int64)
    n, feat = x.shape
    classes = int(y.max()) + 1
    onehot_all = np.eye(classes)[y]

    rng = rng_from(seed, "ctrl-init")
    params = {
        "w1": rng.normal(0.0, 0.02, size=(feat, config.hidden)),
        "b1": np.zeros(config.hidden),
        "w2": rng.normal(0.0, 0.02, size=(config.hidden, classes)),
        "b2": np.zeros(classes),
    }
    state = AdamState.init(params)
    curves = np.empty((n, config.epochs))
    for epoch in range(config.epochs):
        order = rng_from(seed, "ctrl-shuffle", epoch).permutation(n)
        for lo in range(0, n, config.batch):
            idx = order[lo : lo + config.batch]
            _, grads = _probe_loss_and_grads(params, x[idx], onehot_all[idx])
            params, state = adam_update(params, grads, state, lr=config.lr)
        curves[:, epoch] = _probe_sample_losses(params, x, y)

    keep_mask, degenerate = cluster_loss_curves(curves, seed=seed)
    clean = [s for s, k in zip(split, keep_mask) if k]
    rejected = [i for i, k in enumerate(keep_mask) if not k]
    return CtrlCleanResult(clean=clean, rejected_indices=rejected, warning=degenerate, curves=curves)


# -- array helpers and on-disk datasets ---------------------------------------


def stack_sequences(seqs: list[SensorSequence]) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack into (n, 15, D) features and an int label vector (None if unlabeled)."""
    if not seqs:
        raise ValidationError("cannot stack an empty sequence list")
    x = np.stack([s.tokens for s in seqs])
    if any(s.label is None for s in seqs):
        return x, None
    return x, np.asarray([s.label for s in seqs], dtype=np.int64)


def sequences_from_arrays(
    x: np.ndarray,
    labels=None,
    subjects=None,
    task_id: str | None = None,
) -> list[SensorSequence]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"expected (n, {SEQUENCE_TOKENS}, D) array, got shape {x.shape}")
    out = []
    for i in range(x.shape[0]):
        lbl = None if labels is None else int(labels[i])
        subj = "unknown" if subjects is None else str(subjects[i])
        out.append(SensorSequence(x[i], subject_id=subj, label=lbl, task_id=task_id))
    return out


def save_dataset(
    directory,
    name: str,
    dataset: SplitDataset,
    label_map: dict[int, str] | None = None,
    task_id: str | None = None,
    transforms: dict[str, np.ndarray] | None = None,
    transform_meta: dict | None = None,
) -> None:
    """Write manifest.json plus one tensor blob per split (and fitted transforms)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest: dict = {
        "name": name,
        "seq_len": SEQUENCE_TOKENS,
        "task_id": task_id,
        "label_map": {str(k): v for k, v in label_map.items()} if label_map else None,
        "provenance": dataset.provenance,
        "splits": {},
    }
    dims = set()
    for split_name, seqs in dataset.splits().items():
        entry: dict = {"count": len(seqs)}
        if seqs:
            x, y = stack_sequences(seqs)
            dims.add(x.shape[2])
            fname = f"{split_name}.cmft"
            save_tensor_blob(directory / fname, x)
            entry["file"] = fname
            entry["labels"] = None if y is None else [int(v) for v in y]
            entry["subjects"] = [s.subject_id for s in seqs]
        manifest["splits"][split_name] = entry
    if len(dims) > 1:
        raise ValidationError(f"splits disagree on feature dimension: {sorted(dims)}")
    manifest["feature_dim"] = dims.pop() if dims else 0
    if transforms:
        save_container(directory / "transforms.cmfc", MAGIC_CHECKPOINT, transform_meta or {}, transforms)
        manifest["transforms_file"] = "transforms.cmfc"
    tmp = directory / ".manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(directory / "manifest.json")


def load_dataset(directory) -> tuple[SplitDataset, dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    splits = {}
    for split_name in ("train", "validation", "test"):
        entry = manifest["splits"].get(split_name, {"count": 0})
        if entry.get("count", 0) == 0:
            splits[split_name] = []
            continue
        x = load_tensor_blob(directory / entry["file"]).astype(np.float64)
        splits[split_name] = sequences_from_arrays(
            x, labels=entry.get("labels"), subjects=entry.get("subjects"), task_id=manifest.get("task_id")
        )
    ds = SplitDataset(
        train=splits["train"],
        validation=splits["validation"],
        test=splits["test"],
        provenance=manifest.get("provenance", {}),
    )
    return ds, manifest


def load_raw_manifest(path) -> list[RawRecording]:
    """Read a raw-recordings manifest: JSON with per-recording channel blobs."""
    path = Path(path)
    spec = json.loads(path.read_text())
    recordings = []
    for rec in spec["recordings"]:
        streams = {}
        for cname, cspec in rec["streams"].items():
            values = load_tensor_blob(path.parent / cspec["file"]).astype(np.float64)
            streams[cname] = ChannelStream(
                rate=cspec["rate"], start=float(cspec.get("start", 0.0)), values=values
            )
        recordings.append(
            RawRecording(subject_id=str(rec["subject"]), label=rec.get("label"), streams=streams)
        )
    return recordings
