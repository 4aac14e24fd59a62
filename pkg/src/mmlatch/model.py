"""Full model: unimodal encoders, cross-modal fusion and the top-down feedback masks.

With feedback enabled a forward pass runs in two stages. Stage I encodes the
raw features with gradient flow into the encoders switched off, turns the
representations into sigmoid masks through the feedback pathways and masks
the raw features. Stage II encodes the masked features, fuses and regresses.
The feedback pathways are trained by the Stage II loss through the masks.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as T
from .encoders import LSTMParams, ModalityEncoder, lstm
from .fusion import FusionParams, RegressionHead, fuse, regress
from .metrics import round_half_away
from .module import Linear, Module
from .tensor import ShapeError, Tensor

MODALITIES = ("A", "T", "V")
FEEDBACK_TYPES = ("none", "feedforward", "lstm")
SENTIMENT_BINS = ("neg++", "neg+", "neg", "neu", "pos", "pos+", "pos++")


@dataclass
class ModelConfig:
    dims: dict[str, int] = field(default_factory=lambda: {"A": 8, "T": 12, "V": 6})
    hidden: int = 100
    dropout: float = 0.2
    feedback: str = "lstm"
    # "zero" starts every mask at exactly 0.5; "xavier" randomises the mask projections too
    feedback_init: str = "zero"
    seed: int = 0

    def __post_init__(self):
        if self.feedback not in FEEDBACK_TYPES:
            raise ValueError(f"feedback must be one of {FEEDBACK_TYPES}, got {self.feedback!r}")
        if self.feedback_init not in ("zero", "xavier"):
            raise ValueError(f"unknown feedback_init {self.feedback_init!r}")
        if set(self.dims) != set(MODALITIES):
            raise ValueError(f"dims must cover modalities {MODALITIES}, got {sorted(self.dims)}")
        self.dims = {k: int(self.dims[k]) for k in MODALITIES}

    def to_dict(self) -> dict:
        return asdict(self)


class FeedbackPathway(Module):
    """Maps one source representation to masks over the other two modalities' features."""

    def __init__(self, source: str, d: int, target_dims: Mapping[str, int], kind: str,
                 rng: np.random.Generator, init: str = "zero"):
        if kind not in ("lstm", "feedforward"):
            raise ValueError(f"unknown feedback kind {kind!r}")
        self.source = source
        self.kind = kind
        if kind == "lstm":
            self.fwd = LSTMParams(d, d, rng)
            self.bwd = LSTMParams(d, d, rng)
        else:
            self.layer = Linear(d, d, rng)
        self.project = {
            k: Linear(d, dk, rng, zero=(init == "zero"))
            for k, dk in target_dims.items()
            if k != source
        }

    def hidden(self, r: Tensor) -> Tensor:
        if self.kind == "lstm":
            fw = lstm(r, self.fwd)
            bw = lstm(r, self.bwd, reverse=True)
            return T.stack([a + b for a, b in zip(fw, bw)], axis=1)
        return T.tanh(self.layer(r))

    def __call__(self, r: Tensor) -> dict[str, Tensor]:
        h = self.hidden(r)
        return {k: T.sigmoid(proj(h)) for k, proj in self.project.items()}


def compute_masks(reprs: Mapping[str, Tensor], pathways: Mapping[str, FeedbackPathway]) -> dict[tuple[str, str], Tensor]:
    """Masks keyed by (source, target) for the six ordered modality pairs."""
    shape = reprs[MODALITIES[0]].shape
    for k in MODALITIES:
        if reprs[k].ndim != 3 or reprs[k].shape != shape:
            raise ShapeError(f"representations must share one (B, N, d) shape, got {reprs[k].shape} vs {shape}")
    masks = {}
    for j in MODALITIES:
        for k, f in pathways[j](reprs[j]).items():
            masks[(j, k)] = f
    return masks


def apply_masks(inputs: Mapping[str, Tensor], masks: Mapping[tuple[str, str], Tensor]) -> dict[str, Tensor]:
    """Each modality's features times the mean of the two masks aimed at it."""
    out = {}
    for k in MODALITIES:
        j, l = (m for m in MODALITIES if m != k)
        f_j, f_l = masks[(j, k)], masks[(l, k)]
        if f_j.shape != inputs[k].shape or f_l.shape != inputs[k].shape:
            raise ShapeError(
                f"masks for {k} have shapes {f_j.shape}, {f_l.shape}; features are {inputs[k].shape}"
            )
        out[k] = T.mul(T.scale(f_j + f_l, 0.5), inputs[k])
    return out


class MMLatchModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        d = config.hidden
        self.encoders = {k: ModalityEncoder(config.dims[k], d, rng, config.dropout) for k in MODALITIES}
        self.fusion = FusionParams(d, rng)
        self.head = RegressionHead(d, rng, config.dropout)
        if config.feedback == "none":
            self.feedback = None
        else:
            self.feedback = {
                j: FeedbackPathway(j, d, config.dims, config.feedback, rng, config.feedback_init)
                for j in MODALITIES
            }
        self._rng = np.random.default_rng([config.seed, 1])

    @property
    def has_feedback(self) -> bool:
        return self.feedback is not None

    def encoder_parameters(self) -> list[Tensor]:
        return [p for k in MODALITIES for p in self.encoders[k].parameters()]

    def feedback_parameters(self) -> list[Tensor]:
        if self.feedback is None:
            return []
        return [p for j in MODALITIES for p in self.feedback[j].parameters()]

    def reseed_dropout(self, seed) -> None:
        self._rng = np.random.default_rng(seed)

    def __call__(self, batch, training: bool = False) -> Tensor:
        if self.feedback is None:
            return baseline_forward(batch, self, training)
        return two_stage_forward(batch, self, training)


def _inputs(batch) -> dict[str, Tensor]:
    features = batch.features if hasattr(batch, "features") else batch
    inputs = {k: T.as_tensor(features[k]) for k in MODALITIES}
    lengths = {k: inputs[k].shape[:2] for k in MODALITIES}
    if len(set(lengths.values())) != 1:
        raise ShapeError(f"modalities are not aligned: (batch, length) per modality = {lengths}")
    return inputs


def _encode_fuse_regress(inputs: Mapping[str, Tensor], model: MMLatchModel, training: bool) -> Tensor:
    rng = model._rng
    r = {k: model.encoders[k](inputs[k], training, rng) for k in MODALITIES}
    o = fuse(r["A"], r["T"], r["V"], model.fusion)
    return regress(o, model.head, training, rng)


def baseline_forward(batch, model: MMLatchModel, training: bool = False) -> Tensor:
    """Single pass: encode, fuse, regress. No masking."""
    return _encode_fuse_regress(_inputs(batch), model, training)


def stage_one(inputs: Mapping[str, Tensor], model: MMLatchModel, isolate_encoders: bool = True) -> dict[tuple[str, str], Tensor]:
    """Feedback masks from raw inputs.

    Encoders run without dropout. With ``isolate_encoders`` no gradient path is
    recorded through this encoding, so only the feedback pathways learn from it.
    """
    if model.feedback is None:
        raise ValueError("model was built without feedback pathways")
    if isolate_encoders:
        with T.no_grad():
            reprs = {k: model.encoders[k](inputs[k], False) for k in MODALITIES}
    else:
        reprs = {k: model.encoders[k](inputs[k], False) for k in MODALITIES}
    return compute_masks(reprs, model.feedback)


def two_stage_forward(
    batch,
    model: MMLatchModel,
    training: bool = False,
    masks: Mapping[tuple[str, str], Tensor] | str | None = None,
    detach_masks: bool = False,
    isolate_encoders: bool = True,
) -> Tensor:
    """Stage I masks the raw features, Stage II predicts from the masked features.

    ``masks="ones"`` forces every mask to one (the identity mask); a mapping
    substitutes precomputed masks. ``detach_masks`` turns the Stage I masks
    into constants.
    """
    inputs = _inputs(batch)
    if isinstance(masks, str):
        if masks != "ones":
            raise ValueError(f"unknown mask override {masks!r}")
        masks = {(j, k): Tensor(np.ones(inputs[k].shape)) for j in MODALITIES for k in MODALITIES if j != k}
    elif masks is None:
        masks = stage_one(inputs, model, isolate_encoders)
    if detach_masks:
        masks = {key: m.detach() for key, m in masks.items()}
    return _encode_fuse_regress(apply_masks(inputs, masks), model, training)


def averaged_masks(batch, model: MMLatchModel) -> dict[str, np.ndarray]:
    """The effective multiplier 0.5 * (f_j + f_l) per target modality, (B, N, d_k)."""
    inputs = _inputs(batch)
    with T.no_grad():
        masks = stage_one(inputs, model)
    out = {}
    for k in MODALITIES:
        j, l = (m for m in MODALITIES if m != k)
        out[k] = 0.5 * (masks[(j, k)].data + masks[(l, k)].data)
    return out


@dataclass
class MaskHeatmap:
    modality: str
    values: np.ndarray  # (d_k, 7); NaN where the bin is empty
    counts: np.ndarray  # samples per bin

    @property
    def missing(self) -> np.ndarray:
        return self.counts == 0

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(SENTIMENT_BINS)
            for row in self.values:
                writer.writerow(["NA" if np.isnan(v) else repr(float(v)) for v in row])


def export_mask_heatmap(model: MMLatchModel, samples, batch_size: int = 64) -> dict[str, MaskHeatmap]:
    """Average mask value per feature and per rounded sentiment class (-3..3).

    Averages run over every timestep of every sample in the class.
    """
    from .data import batch_iterator

    if model.feedback is None:
        raise ValueError("mask heatmaps need a model trained with feedback")
    dims = model.config.dims
    sums = {k: np.zeros((dims[k], 7)) for k in MODALITIES}
    steps = np.zeros(7)
    counts = np.zeros(7, dtype=int)
    for batch in batch_iterator(samples, batch_size, shuffle=False):
        bins = round_half_away(np.clip(batch.labels[:, 0], -3, 3)).astype(int) + 3
        masks = averaged_masks(batch, model)
        n_steps = masks["A"].shape[1]
        for b, col in enumerate(bins):
            counts[col] += 1
            steps[col] += n_steps
            for k in MODALITIES:
                sums[k][:, col] += masks[k][b].sum(axis=0)
    out = {}
    for k in MODALITIES:
        with np.errstate(invalid="ignore", divide="ignore"):
            values = np.where(counts > 0, sums[k] / np.maximum(steps, 1), np.nan)
        out[k] = MaskHeatmap(k, values, counts.copy())
    return out
