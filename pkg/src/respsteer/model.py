"""Surrogate-to-target correspondence models.

Target displacement is estimated from the surrogate signal by per-axis
polynomial regression: SI from the sensor z channel and AP from the sensor
y channel, with separate models for regular breathing and for the pooled
breath-hold states.  Coefficients come from an ordinary least-squares fit
of the Vandermonde system solved by SVD (never the normal equations), and
every model carries its train and, once evaluated, test mean absolute
error.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .phantom import Phase
from .surrogate import TrainingPair

# Pooled breath-hold surrogate variance below this (mm^2) means the sensor
# saw an essentially constant input; fall back to a constant predictor.
CONSTANT_FALLBACK_VARIANCE = 1e-6

REGULAR_CLASS = "regular"
BREATH_HOLD_CLASS = "breath_hold"
AXES = ("si", "ap")
PHASE_CLASSES = (REGULAR_CLASS, BREATH_HOLD_CLASS)


class DegenerateFitError(ValueError):
    """The design matrix is rank deficient (too few distinct inputs)."""


class IncompleteTrainingError(RuntimeError):
    """The training pair is missing a breathing-phase class."""


@dataclass(frozen=True)
class PolynomialModel:
    """Polynomial map from one surrogate channel to one motion axis."""

    coefficients: tuple[float, ...]  # beta_0 .. beta_n
    input_channel: str | None = None  # "s_y" | "s_z"
    output_axis: str | None = None  # "si" | "ap"

    def __post_init__(self):
        if not self.coefficients:
            raise ValueError("a polynomial model needs at least beta_0")
        if not np.all(np.isfinite(self.coefficients)):
            raise ValueError("polynomial coefficients must be finite")

    @property
    def order(self) -> int:
        return len(self.coefficients) - 1

    def estimate(self, s):
        """Evaluate the polynomial at surrogate value(s) `s` (Horner)."""
        acc = np.zeros_like(np.asarray(s, dtype=float))
        for beta in reversed(self.coefficients):
            acc = acc * s + beta
        return float(acc) if np.ndim(s) == 0 else acc


def estimate(model: PolynomialModel, s):
    return model.estimate(s)


def fit_polynomial(
    x,
    y,
    order: int,
    input_channel: str | None = None,
    output_axis: str | None = None,
) -> PolynomialModel:
    """Least-squares polynomial fit of y on x.

    Requires at least order+1 samples with order+1 distinct x values;
    raises DegenerateFitError otherwise.  The Vandermonde system is solved
    with numpy's SVD-backed lstsq for numerical stability.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if order < 0:
        raise ValueError("order must be >= 0")
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D arrays of equal length")
    if x.size < order + 1:
        raise DegenerateFitError(
            f"need at least {order + 1} samples for an order-{order} fit, got {x.size}"
        )
    if np.unique(x).size < order + 1:
        raise DegenerateFitError(
            f"need at least {order + 1} distinct x values for an order-{order} fit"
        )
    vander = np.vander(x, order + 1, increasing=True)
    beta, _, rank, _ = np.linalg.lstsq(vander, y, rcond=None)
    if rank < order + 1:
        raise DegenerateFitError("design matrix is rank deficient")
    return PolynomialModel(
        coefficients=tuple(float(b) for b in beta),
        input_channel=input_channel,
        output_axis=output_axis,
    )


def mae(y_true, y_pred) -> float:
    """Mean absolute error between two equal-length value lists."""
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise ValueError("mae needs two 1-D arrays of equal length")
    if y_true.size == 0:
        raise ValueError("mae of empty lists is undefined")
    return float(np.mean(np.abs(y_true - y_pred)))


@dataclass(frozen=True)
class BankEntry:
    model: PolynomialModel
    train_mae: float
    test_mae: float | None = None


@dataclass(frozen=True)
class ModelBank:
    """Four correspondence models: {regular, breath-hold} x {SI, AP}."""

    entries: dict[tuple[str, str], BankEntry]

    def entry(self, phase_class: str, axis: str) -> BankEntry:
        return self.entries[(phase_class, axis)]

    def models_for(self, phase: Phase) -> tuple[PolynomialModel, PolynomialModel]:
        """(SI model, AP model) used for the given breathing phase."""
        cls = BREATH_HOLD_CLASS if phase.is_hold else REGULAR_CLASS
        return self.entry(cls, "si").model, self.entry(cls, "ap").model

    def to_dict(self) -> dict:
        out = {}
        for (cls, axis), e in sorted(self.entries.items()):
            out[f"{cls}.{axis}"] = {
                "coefficients": list(e.model.coefficients),
                "order": e.model.order,
                "input_channel": e.model.input_channel,
                "output_axis": e.model.output_axis,
                "train_mae_mm": e.train_mae,
                "test_mae_mm": e.test_mae,
            }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelBank":
        entries = {}
        for key, d in data.items():
            phase_class, axis = key.split(".")
            entries[(phase_class, axis)] = BankEntry(
                model=PolynomialModel(
                    coefficients=tuple(d["coefficients"]),
                    input_channel=d["input_channel"],
                    output_axis=d["output_axis"],
                ),
                train_mae=d["train_mae_mm"],
                test_mae=d["test_mae_mm"],
            )
        return cls(entries=entries)


def save_model_bank(bank: ModelBank, path: str | Path) -> None:
    Path(path).write_text(json.dumps(bank.to_dict(), indent=2, sort_keys=True))


def load_model_bank(path: str | Path) -> ModelBank:
    return ModelBank.from_dict(json.loads(Path(path).read_text()))


_CHANNEL_FOR_AXIS = {"si": "s_z", "ap": "s_y"}


def _split_by_class(pair: TrainingPair) -> dict[str, np.ndarray]:
    is_hold = np.array([p.is_hold for p in pair.phases], dtype=bool)
    return {REGULAR_CLASS: ~is_hold, BREATH_HOLD_CLASS: is_hold}


def _class_samples(pair: TrainingPair, mask: np.ndarray, axis: str):
    channel = _CHANNEL_FOR_AXIS[axis]
    x = (pair.s_z if channel == "s_z" else pair.s_y)[mask]
    y = (pair.d_si if axis == "si" else pair.d_ap)[mask]
    return x, y, channel


def _fit_entry(pair: TrainingPair, mask: np.ndarray, axis: str, order: int) -> BankEntry:
    x, y, channel = _class_samples(pair, mask, axis)
    if x.size > 0 and float(np.var(x)) < CONSTANT_FALLBACK_VARIANCE:
        # Breath-holds barely move the sensor; a mean predictor avoids a
        # rank-deficient Vandermonde system.
        model = PolynomialModel(
            coefficients=(float(np.mean(y)),), input_channel=channel, output_axis=axis
        )
    else:
        model = fit_polynomial(x, y, order, input_channel=channel, output_axis=axis)
    return BankEntry(model=model, train_mae=mae(y, model.estimate(x)))


def train_model_bank(pair: TrainingPair, order: int = 2) -> ModelBank:
    """Fit the four-entry model bank from an aligned training pair.

    Regular-breathing samples train the M_r entries and the pooled
    breath-hold samples train the M_b-h entries.  Raises
    IncompleteTrainingError unless the pair contains regular samples and
    samples from all three holds.
    """
    masks = _split_by_class(pair)
    if not masks[REGULAR_CLASS].any():
        raise IncompleteTrainingError("training pair has no regular-breathing samples")
    hold_ids = {p.hold_index for p in pair.phases if p.is_hold}
    missing = {1, 2, 3} - hold_ids
    if missing:
        raise IncompleteTrainingError(
            f"training pair is missing breath-hold segment(s) {sorted(missing)}"
        )
    entries = {}
    for cls in PHASE_CLASSES:
        for axis in AXES:
            entries[(cls, axis)] = _fit_entry(pair, masks[cls], axis, order)
    return ModelBank(entries=entries)


def evaluate_model_bank(bank: ModelBank, test_pair: TrainingPair) -> ModelBank:
    """Fill each entry's test MAE from held-out samples of its phase class."""
    masks = _split_by_class(test_pair)
    entries = {}
    for (cls, axis), e in bank.entries.items():
        mask = masks[cls]
        if mask.any():
            x, y, _ = _class_samples(test_pair, mask, axis)
            entries[(cls, axis)] = replace(e, test_mae=mae(y, e.model.estimate(x)))
        else:
            entries[(cls, axis)] = e
    return ModelBank(entries=entries)
