"""Tri-modal samples, the synthetic gated task, the on-disk format and batching."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

MODALITIES = ("A", "T", "V")
SPLITS = ("train", "val", "test")
DEFAULT_DIMS = {"A": 8, "T": 12, "V": 6}
FORMAT_TAG = "mmlatch-dataset"
FORMAT_VERSION = 1


class DatasetError(ValueError):
    pass


class AlignmentError(DatasetError):
    pass


class DimensionError(DatasetError):
    pass


class LabelRangeError(DatasetError):
    pass


@dataclass(eq=False)
class MultimodalSample:
    audio: np.ndarray
    text: np.ndarray
    visual: np.ndarray
    label: float

    def __post_init__(self):
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.text = np.asarray(self.text, dtype=np.float64)
        self.visual = np.asarray(self.visual, dtype=np.float64)
        self.label = float(self.label)
        validate_sample(self)

    @property
    def features(self) -> dict[str, np.ndarray]:
        return {"A": self.audio, "T": self.text, "V": self.visual}

    @property
    def length(self) -> int:
        return self.audio.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, MultimodalSample):
            return NotImplemented
        return self.label == other.label and all(
            np.array_equal(self.features[k], other.features[k]) for k in MODALITIES
        )


def validate_sample(sample: MultimodalSample, dims: dict[str, int] | None = None, index: int | None = None) -> None:
    where = "" if index is None else f"sample {index}: "
    feats = sample.features
    for k, x in feats.items():
        if x.ndim != 2:
            raise DimensionError(f"{where}modality {k} must be a (length, features) matrix, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DatasetError(f"{where}modality {k} has non-finite values")
    lengths = {k: x.shape[0] for k, x in feats.items()}
    if len(set(lengths.values())) != 1:
        raise AlignmentError(f"{where}sequence lengths differ across modalities: {lengths}")
    if lengths["A"] < 1:
        raise AlignmentError(f"{where}empty sequence")
    if dims is not None:
        for k, x in feats.items():
            if x.shape[1] != dims[k]:
                raise DimensionError(f"{where}modality {k} has {x.shape[1]} features, expected {dims[k]}")
    if not -3.0 <= sample.label <= 3.0 or np.isnan(sample.label):
        raise LabelRangeError(f"{where}label {sample.label} outside [-3, 3]")


@dataclass
class DatasetSplits:
    train: list[MultimodalSample]
    val: list[MultimodalSample]
    test: list[MultimodalSample]
    dims: dict[str, int] = field(default_factory=lambda: dict(DEFAULT_DIMS))
    seed: int | None = None

    def __post_init__(self):
        for name in SPLITS:
            for i, s in enumerate(getattr(self, name)):
                validate_sample(s, self.dims, i)

    def split(self, name: str) -> list[MultimodalSample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)


# ------------------------------------------------------------------ synthetic task


def gated_samples(n: int, length: int, dims: dict[str, int], rng: np.random.Generator,
                  jitter: float = 0.1, cue: str = "onset"):
    """Draw ``n`` samples of the gated task together with their true feature gates.

    Each modality has a pair of candidate channels (0 and 1). One carries the
    modality's signal u_k, the other an equally distributed decoy; which one
    is chosen by a hidden bit z_k. The bit of modality k is announced, as a
    +/-1 cue, in a dedicated channel of each of the other two modalities, so
    only cross-modal information says which candidate to trust. Remaining
    channels are Gaussian noise. The label is u_A + u_T + u_V, inside [-3, 3].

    With ``cue="onset"`` the cue is present only at the first timestep, so a
    model has to carry it across the sequence; ``"constant"`` repeats it at
    every step.

    Returns (samples, gates) where gates[k] is (n, d_k): 1 on the signal
    channel and on cue/noise channels, 0 on the decoy.
    """
    if cue not in ("onset", "constant"):
        raise ValueError(f"cue must be 'onset' or 'constant', got {cue!r}")
    cue_channel = {}
    for k in MODALITIES:
        others = [m for m in MODALITIES if m != k]
        cue_channel[k] = {m: 2 + i for i, m in enumerate(others)}
    samples, gates = [], {k: np.ones((n, dims[k])) for k in MODALITIES}
    for i in range(n):
        u = rng.uniform(-1.0, 1.0, size=3)
        v = rng.uniform(-1.0, 1.0, size=3)
        z = rng.integers(0, 2, size=3)
        feats = {}
        for idx, k in enumerate(MODALITIES):
            x = rng.normal(0.0, 1.0, size=(length, dims[k]))
            x[:, :4] = jitter * rng.normal(size=(length, 4))
            x[:, z[idx]] += u[idx]
            x[:, 1 - z[idx]] += v[idx]
            for m, ch in cue_channel[k].items():
                if cue == "constant":
                    x[:, ch] += 2.0 * z[MODALITIES.index(m)] - 1.0
                else:
                    x[0, ch] += 2.0 * z[MODALITIES.index(m)] - 1.0
            gates[k][i, 1 - z[idx]] = 0.0
            feats[k] = x
        label = float(np.clip(u.sum(), -3.0, 3.0))
        samples.append(MultimodalSample(feats["A"], feats["T"], feats["V"], label))
    return samples, gates


def generate_gated_dataset(n: int, length: int = 8, dims: dict[str, int] | None = None,
                           seed: int = 0, cue: str = "onset") -> DatasetSplits:
    """Synthetic gated task split 70/15/15; fully determined by its arguments."""
    dims = dict(DEFAULT_DIMS if dims is None else dims)
    if n < 10:
        raise ValueError(f"need at least 10 samples, got n={n}")
    if length < 2:
        raise ValueError(f"need sequences of length >= 2, got {length}")
    if set(dims) != set(MODALITIES) or any(int(d) < 4 for d in dims.values()):
        raise DimensionError(f"every modality needs >= 4 feature channels, got {dims}")
    rng = np.random.default_rng(seed)
    samples, _ = gated_samples(n, length, dims, rng, cue=cue)
    n_train = int(round(0.7 * n))
    n_val = int(round(0.15 * n))
    return DatasetSplits(
        samples[:n_train],
        samples[n_train : n_train + n_val],
        samples[n_train + n_val :],
        dims=dims,
        seed=seed,
    )


# ---------------------------------------------------------------------- file format


def _encode_matrix(tag: str, x: np.ndarray) -> str:
    values = ",".join(repr(float(v)) for v in x.reshape(-1))
    return f"{tag} {x.shape[0]}x{x.shape[1]} {values}"


def _decode_matrix(field_text: str, index: int) -> tuple[str, np.ndarray]:
    try:
        tag, shape, values = field_text.split(" ", 2)
        rows, cols = (int(s) for s in shape.split("x"))
        flat = np.array([float(v) for v in values.split(",")]) if values else np.zeros(0)
    except ValueError as exc:
        raise DatasetError(f"sample {index}: malformed field {field_text[:40]!r}: {exc}") from None
    if flat.size != rows * cols:
        raise DimensionError(f"sample {index}: modality {tag} header says {rows}x{cols} but has {flat.size} values")
    return tag, flat.reshape(rows, cols)


def save_split(samples: Sequence[MultimodalSample], path: str | Path, dims: dict[str, int], seed) -> None:
    header = f"# {FORMAT_TAG} {FORMAT_VERSION} dims=" + ",".join(f"{k}:{dims[k]}" for k in MODALITIES)
    header += f" seed={seed}"
    lines = [header]
    for s in samples:
        fields = [repr(s.label)] + [_encode_matrix(k, s.features[k]) for k in MODALITIES]
        lines.append("\t".join(fields))
    Path(path).write_text("\n".join(lines) + "\n")


def load_split(path: str | Path) -> tuple[list[MultimodalSample], dict[str, int], int | None]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {FORMAT_TAG} "):
        raise DatasetError(f"{path}: missing '{FORMAT_TAG}' header")
    parts = lines[0][2:].split()
    if int(parts[1]) != FORMAT_VERSION:
        raise DatasetError(f"{path}: unsupported format version {parts[1]}")
    meta = dict(p.split("=", 1) for p in parts[2:])
    dims = {k: int(v) for k, v in (item.split(":") for item in meta["dims"].split(","))}
    seed = None if meta.get("seed", "None") == "None" else int(meta["seed"])
    samples = []
    for index, line in enumerate(l for l in lines[1:] if l.strip()):
        fields = line.split("\t")
        if len(fields) != 4:
            raise DatasetError(f"sample {index}: expected label + 3 modality fields, got {len(fields)} fields")
        label = float(fields[0])
        feats = dict(_decode_matrix(f, index) for f in fields[1:])
        if set(feats) != set(MODALITIES):
            raise DatasetError(f"sample {index}: modalities {sorted(feats)} instead of {list(MODALITIES)}")
        lengths = {k: feats[k].shape[0] for k in MODALITIES}
        if len(set(lengths.values())) != 1:
            raise AlignmentError(f"sample {index}: sequence lengths differ across modalities: {lengths}")
        for k in MODALITIES:
            if feats[k].shape[1] != dims[k]:
                raise DimensionError(f"sample {index}: modality {k} has {feats[k].shape[1]} features, expected {dims[k]}")
        if not -3.0 <= label <= 3.0:
            raise LabelRangeError(f"sample {index}: label {label} outside [-3, 3]")
        samples.append(MultimodalSample(feats["A"], feats["T"], feats["V"], label))
    return samples, dims, seed


def save_dataset(splits: DatasetSplits, path: str | Path) -> None:
    """Write ``train.txt``, ``val.txt`` and ``test.txt`` under directory ``path``.

    One line per sample: the label, then one field per modality holding
    ``<modality> <N>x<d>`` and the row-major values, tab separated.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name in SPLITS:
        save_split(splits.split(name), path / f"{name}.txt", splits.dims, splits.seed)


def load_dataset(path: str | Path, format: str = "text") -> DatasetSplits:
    if format != "text":
        raise ValueError(f"unsupported dataset format {format!r}")
    path = Path(path)
    loaded = {}
    dims = seed = None
    for name in SPLITS:
        file = path / f"{name}.txt"
        if not file.exists():
            raise FileNotFoundError(f"missing split file {file}")
        samples, split_dims, split_seed = load_split(file)
        if dims is not None and split_dims != dims:
            raise DimensionError(f"{file}: dims {split_dims} differ from other splits {dims}")
        dims, seed = split_dims, split_seed
        loaded[name] = samples
    return DatasetSplits(loaded["train"], loaded["val"], loaded["test"], dims=dims, seed=seed)


# -------------------------------------------------------------------------- batches


@dataclass
class Batch:
    features: dict[str, np.ndarray]  # modality -> (B, N, d_k)
    labels: np.ndarray  # (B, 1)

    def __len__(self) -> int:
        return self.labels.shape[0]


def collate(samples: Sequence[MultimodalSample]) -> Batch:
    lengths = {s.length for s in samples}
    if len(lengths) != 1:
        raise AlignmentError(f"a batch needs equal sequence lengths, got {sorted(lengths)}")
    features = {k: np.stack([s.features[k] for s in samples]) for k in MODALITIES}
    labels = np.array([[s.label] for s in samples])
    return Batch(features, labels)


def batch_iterator(samples: Sequence[MultimodalSample], batch_size: int, shuffle: bool = False,
                   seed=None) -> Iterator[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(samples))
    for start in range(0, len(samples), batch_size):
        yield collate([samples[i] for i in order[start : start + batch_size]])
