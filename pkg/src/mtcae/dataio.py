"""Feature ingestion, channel manifests, standardization, folds and synthetic data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

CLASS_NAMES = ("happy", "angry", "sad", "neutral")
LABEL_INDEX = {name: i for i, name in enumerate(CLASS_NAMES)}
ID_COLUMNS = ("utterance_id", "speaker_id", "label")
STD_FLOOR = 1e-8


class ParseError(ValueError):
    """Malformed feature CSV; the message names the offending line."""


class ManifestError(ValueError):
    """Channel manifest is not an exact partition of the feature columns."""


class FoldError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    features: np.ndarray  # [N x D] float64
    labels: np.ndarray  # [N] int, 0..3
    speaker_ids: np.ndarray  # [N] str
    utterance_ids: np.ndarray  # [N] str
    class_names: tuple[str, ...] = CLASS_NAMES
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.speaker_ids = np.asarray(self.speaker_ids, dtype=str)
        self.utterance_ids = np.asarray(self.utterance_ids, dtype=str)
        n = self.features.shape[0]
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-d matrix")
        if not (len(self.labels) == len(self.speaker_ids) == len(self.utterance_ids) == n):
            raise ValueError("features, labels and ids disagree on row count")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class table")

    @property
    def n_samples(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def speakers(self) -> list[str]:
        return sorted(set(self.speaker_ids.tolist()))

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=len(self.class_names)).tolist()

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.speaker_ids[idx],
                       self.utterance_ids[idx], self.class_names, self.feature_names)


def load_features_csv(path) -> Dataset:
    """Read ``utterance_id,speaker_id,label,<D feature columns>``."""
    path = Path(path)
    utts, spks, labels, rows = [], [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: line 1: empty file") from None
        if tuple(h.strip() for h in header[:3]) != ID_COLUMNS:
            raise ParseError(f"{path}: line 1: header must start with {','.join(ID_COLUMNS)}")
        n_feat = len(header) - 3
        if n_feat < 1:
            raise ParseError(f"{path}: line 1: no feature columns")
        for row in reader:
            line = reader.line_num
            if not row:
                continue
            if len(row) != n_feat + 3:
                raise ParseError(
                    f"{path}: line {line}: expected {n_feat + 3} fields, got {len(row)}")
            label = row[2].strip()
            if label not in LABEL_INDEX:
                raise ParseError(f"{path}: line {line}: unknown label {label!r}")
            try:
                values = np.array(row[3:], dtype=np.float64)
            except ValueError:
                bad = next(v for v in row[3:] if not _is_float(v))
                raise ParseError(f"{path}: line {line}: non-numeric feature {bad!r}") from None
            if not np.isfinite(values).all():
                raise ParseError(f"{path}: line {line}: non-finite feature value")
            utts.append(row[0])
            spks.append(row[1])
            labels.append(LABEL_INDEX[label])
            rows.append(values)
    features = np.vstack(rows) if rows else np.zeros((0, n_feat))
    return Dataset(features, labels, spks, utts, CLASS_NAMES, [h.strip() for h in header[3:]])


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def write_features_csv(dataset: Dataset, path) -> None:
    names = dataset.feature_names or [f"f{j}" for j in range(dataset.n_features)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*ID_COLUMNS, *names])
        for i in range(dataset.n_samples):
            w.writerow([dataset.utterance_ids[i], dataset.speaker_ids[i],
                        dataset.class_names[dataset.labels[i]],
                        *(repr(float(v)) for v in dataset.features[i])])


# ---------------------------------------------------------------------------
# Channel manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Channel:
    name: str
    columns: tuple[int, ...]


@dataclass(frozen=True)
class ChannelManifest:
    channels: tuple[Channel, ...]
    n_features: int
    name: str = ""

    def __post_init__(self):
        chans = tuple(c if isinstance(c, Channel) else Channel(c[0], tuple(c[1]))
                      for c in self.channels)
        object.__setattr__(self, "channels", chans)
        validate_partition([c.columns for c in chans], self.n_features,
                           [c.name for c in chans])

    def __len__(self) -> int:
        return len(self.channels)

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.channels]

    @property
    def widths(self) -> list[int]:
        return [len(c.columns) for c in self.channels]

    def to_dict(self) -> dict:
        return {"name": self.name, "n_features": self.n_features,
                "channels": [{"name": c.name, "columns": list(c.columns)}
                             for c in self.channels]}

    @classmethod
    def from_dict(cls, d: dict, n_features: int | None = None) -> "ChannelManifest":
        try:
            chans = [Channel(str(c["name"]), tuple(int(j) for j in c["columns"]))
                     for c in d["channels"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed manifest record: {exc}") from None
        declared = d.get("n_features")
        if n_features is not None and declared is not None and declared != n_features:
            raise ManifestError(
                f"manifest covers {declared} columns but the data has {n_features}")
        if n_features is None:
            n_features = declared
        if n_features is None:
            n_features = 1 + max((max(c.columns) for c in chans if c.columns), default=-1)
        return cls(tuple(chans), int(n_features), str(d.get("name", "")))


def validate_partition(column_lists: Sequence[Sequence[int]], n_features: int,
                       names: Sequence[str] | None = None) -> None:
    names = names or [str(i) for i in range(len(column_lists))]
    if not column_lists:
        raise ManifestError("manifest has no channels")
    owner: dict[int, str] = {}
    for name, cols in zip(names, column_lists):
        if not cols:
            raise ManifestError(f"channel {name!r} is empty")
        for j in cols:
            if not 0 <= j < n_features:
                raise ManifestError(
                    f"channel {name!r}: column {j} outside 0..{n_features - 1}")
            if j in owner:
                raise ManifestError(
                    f"column {j} assigned to both {owner[j]!r} and {name!r}")
            owner[j] = name
    if len(owner) != n_features:
        missing = min(set(range(n_features)) - owner.keys())
        raise ManifestError(f"column {missing} is not assigned to any channel")


def load_manifest(path_or_name, n_features: int | None = None) -> ChannelManifest:
    """Load a JSON manifest from a path or the name of a bundled one."""
    p = Path(path_or_name)
    if p.is_file():
        text = p.read_text(encoding="utf-8")
    else:
        res = resources.files("mtcae") / "manifests" / f"{p.name.removesuffix('.json')}.json"
        if not res.is_file():
            raise FileNotFoundError(f"no manifest file or bundled manifest {path_or_name!r}")
        text = res.read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from None
    return ChannelManifest.from_dict(d, n_features)


def save_manifest(manifest: ChannelManifest, path) -> None:
    # one channel record per line keeps the file diffable
    d = manifest.to_dict()
    lines = [json.dumps(c) for c in d["channels"]]
    text = (f'{{"name": {json.dumps(d["name"])}, "n_features": {d["n_features"]},\n'
            ' "channels": [\n  ' + ",\n  ".join(lines) + "\n ]}\n")
    Path(path).write_text(text, encoding="utf-8")


# openSMILE IS10 paralinguistic layout: 34 LLDs x 21 functionals, their deltas,
# 4 pitch-derived LLDs x 19 functionals, their deltas, then 2 turn-level F0 features.
IS10_MAIN_LLDS = (
    ["pcm_loudness"]
    + [f"mfcc_{i}" for i in range(15)]
    + [f"log_mel_freq_band_{i}" for i in range(8)]
    + [f"lsp_freq_{i}" for i in range(8)]
    + ["f0_envelope", "voicing_prob"]
)
IS10_PITCH_LLDS = ["f0_final", "jitter_local", "jitter_ddp", "shimmer_local"]
IS10_CHANNEL_ORDER = (
    IS10_MAIN_LLDS[:32] + ["f0_final", "f0_envelope", "voicing_prob"] + IS10_PITCH_LLDS[1:]
)


def is10_manifest() -> ChannelManifest:
    """The 38-channel grouping of the 1582 IS10 functionals by LLD base name."""
    cols: dict[str, list[int]] = {name: [] for name in IS10_CHANNEL_ORDER}
    offset = 0
    for n_func, llds in ((21, IS10_MAIN_LLDS), (19, IS10_PITCH_LLDS)):
        for _delta in (False, True):
            for name in llds:
                cols[name].extend(range(offset, offset + n_func))
                offset += n_func
    cols["f0_final"].extend([offset, offset + 1])  # turn onsets, turn duration
    offset += 2
    return ChannelManifest(tuple(Channel(n, tuple(cols[n])) for n in IS10_CHANNEL_ORDER),
                           offset, "is10_38ch")


def channel_view(dataset_or_features, manifest: ChannelManifest, i: int) -> np.ndarray:
    """Columns of channel ``i`` in manifest order."""
    feats = getattr(dataset_or_features, "features", dataset_or_features)
    if not 0 <= i < len(manifest):
        raise IndexError(f"channel {i} out of range for {len(manifest)} channels")
    if feats.shape[1] != manifest.n_features:
        raise ManifestError(
            f"data has {feats.shape[1]} columns, manifest covers {manifest.n_features}")
    return feats[:, list(manifest.channels[i].columns)]


def channel_views(dataset_or_features, manifest: ChannelManifest) -> list[np.ndarray]:
    return [channel_view(dataset_or_features, manifest, i) for i in range(len(manifest))]


# ---------------------------------------------------------------------------
# Standardization
# ---------------------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_standardizer(features: np.ndarray) -> Standardizer:
    x = np.asarray(features, dtype=np.float64)
    return Standardizer(x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR))


def apply_standardizer(std: Standardizer, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.shape[-1] != std.mean.shape[0]:
        raise ValueError(f"standardizer fit on {std.mean.shape[0]} columns, got {x.shape[-1]}")
    out = (x - std.mean) / std.std
    # constant columns: guarantee exact zeros despite roundoff in the mean
    out[:, std.std <= STD_FLOOR] = 0.0
    return out


# ---------------------------------------------------------------------------
# Leave-one-speaker-out folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    test_speaker: str
    validation_speaker: str
    train_speakers: tuple[str, ...]

    def indices(self, speaker_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        spk = np.asarray(speaker_ids)
        train = np.flatnonzero(np.isin(spk, self.train_speakers))
        val = np.flatnonzero(spk == self.validation_speaker)
        test = np.flatnonzero(spk == self.test_speaker)
        return train, val, test


@dataclass
class FoldPlan:
    folds: list[Fold] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def make_loso_folds(speaker_ids) -> FoldPlan:
    """One fold per speaker; the next speaker in sorted order validates."""
    speakers = sorted(set(np.asarray(speaker_ids, dtype=str).tolist()))
    if len(speakers) < 3:
        raise FoldError(f"LOSO needs at least 3 speakers, found {len(speakers)}")
    folds = []
    for k, test in enumerate(speakers):
        val = speakers[(k + 1) % len(speakers)]
        train = tuple(s for s in speakers if s not in (test, val))
        folds.append(Fold(test, val, train))
    return FoldPlan(folds)


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    channels: int = 38
    dims: int | tuple[int, ...] = 5
    samples_per_class: int = 500
    speakers: int = 10
    separation: float = 5.0
    noise: float = 1.0
    seed: int = 0
    n_classes: int = 4

    def channel_dims(self) -> list[int]:
        if isinstance(self.dims, int):
            return [self.dims] * self.channels
        if len(self.dims) != self.channels:
            raise ValueError("dims list length must equal the channel count")
        return [int(d) for d in self.dims]


def synth_generate(spec: SynthSpec) -> tuple[Dataset, ChannelManifest]:
    """Class-conditional Gaussian features with round-robin pseudo-speakers."""
    dims = spec.channel_dims()
    if min([spec.channels, spec.samples_per_class, spec.speakers, *dims]) < 1:
        raise ValueError("all synthetic counts must be >= 1")
    if spec.separation < 0 or spec.noise < 0:
        raise ValueError("separation and noise must be non-negative")
    rng = np.random.default_rng(spec.seed)
    D = sum(dims)
    means = np.empty((spec.n_classes, D))
    for c in range(spec.n_classes):
        offset = 0
        for d in dims:
            means[c, offset:offset + d] = rng.standard_normal(d) * spec.separation
            offset += d
    n = spec.n_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.n_classes), spec.samples_per_class)
    features = means[labels] + spec.noise * rng.standard_normal((n, D))
    width = len(str(spec.speakers - 1))
    speakers = [f"spk{k % spec.speakers:0{width}d}" for k in range(n)]
    utts = [f"utt{k:06d}" for k in range(n)]
    names = CLASS_NAMES if spec.n_classes == 4 else tuple(f"c{c}" for c in range(spec.n_classes))
    dataset = Dataset(features, labels, speakers, utts, names)

    channels, offset = [], 0
    for j, d in enumerate(dims):
        channels.append(Channel(f"ch{j:02d}", tuple(range(offset, offset + d))))
        offset += d
    return dataset, ChannelManifest(tuple(channels), D, "synthetic")
