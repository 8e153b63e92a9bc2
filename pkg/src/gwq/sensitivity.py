"""Turn calibration gradients into outlier masks.

Scoring methods:

* ``abs_gradient_mean`` — |mean over calibration samples of the gradient|,
  the toolkit's primary selection signal (mean first, then absolute value,
  so opposing gradients cancel);
* ``hessian_diag_fisher`` — mean of squared per-sample gradients, a
  Fisher-style diagonal curvature proxy;
* ``hessian_diag_input_sq`` — per-column second moment of each linear
  layer's input, broadcast over output rows (the diagonal curvature of the
  layer's reconstruction objective);
* ``random`` — the control arm, implemented by the evaluation harness.

Selection takes the top fraction of scores either independently per tensor
(``per_layer``, the default) or jointly over all scored tensors
(``global``), with exact ceil-cardinality and flat-index tie-breaking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .container import GradientBundle, ModelBundle, MASK_SUFFIX, atomic_write_bytes, encode_raw
from .errors import AlignmentError, DomainError, InputError
from .tensor import abs_quantile, select_top_fraction

ABS_GRADIENT_MEAN = "abs_gradient_mean"
HESSIAN_FISHER = "hessian_diag_fisher"
HESSIAN_INPUT_SQ = "hessian_diag_input_sq"
RANDOM = "random"

PER_LAYER = "per_layer"
GLOBAL = "global"


@dataclass
class SensitivityScores:
    """Non-negative per-weight scores, shaped exactly like the weights."""

    scores: dict[str, np.ndarray]
    method: str

    def __post_init__(self):
        for name, arr in self.scores.items():
            if (arr < 0).any():
                raise DomainError(f"scores for {name!r} contain negative values")

    def restrict(self, names) -> "SensitivityScores":
        keep = set(names)
        return SensitivityScores({n: a for n, a in self.scores.items() if n in keep}, self.method)


@dataclass
class OutlierMask:
    """Boolean masks with the fraction, scope and per-tensor thresholds that made them."""

    masks: dict[str, np.ndarray]
    selected_fraction: float
    scope: str
    threshold_used: dict[str, float] = field(default_factory=dict)

    def count(self, name: str) -> int:
        return int(self.masks[name].sum())

    def total(self) -> int:
        return sum(int(m.sum()) for m in self.masks.values())


def _check_same_shapes(bundles: list[GradientBundle]) -> list[str]:
    first = bundles[0]
    names = sorted(first.tensors)
    for other in bundles[1:]:
        if sorted(other.tensors) != names:
            raise AlignmentError("gradient bundles name sets differ")
        for n in names:
            if other.tensors[n].dims != first.tensors[n].dims:
                raise AlignmentError(f"gradient {n!r} shapes differ across bundles")
    return names


def aggregate_gradients(grads: list[GradientBundle], *, abs_before_mean: bool = False) -> SensitivityScores:
    """Average gradients over calibration samples into sensitivity scores.

    Default order is mean-then-abs; ``abs_before_mean`` switches to the
    mean-of-magnitudes ablation.
    """
    if not grads:
        raise DomainError("no gradient bundles to aggregate")
    names = _check_same_shapes(grads)
    out: dict[str, np.ndarray] = {}
    for grad_name in names:
        stack = [b.tensors[grad_name].data.astype(np.float64) for b in grads]
        if abs_before_mean:
            acc = sum(np.abs(a) for a in stack) / len(grads)
        else:
            acc = np.abs(sum(stack) / len(grads))
        out[grad_name.removesuffix(".grad")] = acc.astype(np.float32)
    return SensitivityScores(out, ABS_GRADIENT_MEAN)


def hessian_diag_scores(weights: ModelBundle, calibration, variant: str) -> SensitivityScores:
    """Diagonal-curvature sensitivity baselines.

    ``calibration`` is a list of GradientBundle for the Fisher variant, or a
    ``{weight name: per-column input second moment}`` map (see
    :func:`gwq.refmodel.linear_input_second_moments`) for the input-moment
    variant.
    """
    if variant == HESSIAN_FISHER:
        if not calibration:
            raise InputError("fisher variant needs at least one gradient bundle")
        names = _check_same_shapes(calibration)
        out = {}
        for grad_name in names:
            sq = sum(np.square(b.tensors[grad_name].data.astype(np.float64)) for b in calibration)
            out[grad_name.removesuffix(".grad")] = (sq / len(calibration)).astype(np.float32)
        return SensitivityScores(out, HESSIAN_FISHER)
    if variant == HESSIAN_INPUT_SQ:
        if not isinstance(calibration, dict) or not calibration:
            raise InputError("input_sq variant needs a {name: column moments} map")
        out = {}
        for name, moments in calibration.items():
            if name not in weights:
                raise InputError(f"moments supplied for unknown weight {name!r}")
            rows, cols = weights[name].dims
            moments = np.asarray(moments, dtype=np.float32)
            if moments.shape != (cols,):
                raise InputError(f"moments for {name!r} must have shape ({cols},), got {moments.shape}")
            out[name] = np.broadcast_to(moments, (rows, cols)).copy()
        return SensitivityScores(out, HESSIAN_INPUT_SQ)
    raise InputError(f"unknown curvature variant {variant!r}")


def select_outliers(scores: SensitivityScores, fraction: float, scope: str = PER_LAYER) -> OutlierMask:
    """Mask the top-fraction scores under the requested scope.

    Cardinality is exact: per tensor under ``per_layer``, over the
    concatenation of all scored tensors under ``global``.
    """
    if not (0.0 < fraction <= 1.0):
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    if scope == PER_LAYER:
        masks = {}
        thresholds = {}
        for name, arr in scores.scores.items():
            masks[name] = select_top_fraction(arr, fraction)
            thresholds[name] = abs_quantile(arr, fraction)
        return OutlierMask(masks, fraction, scope, thresholds)
    if scope == GLOBAL:
        names = list(scores.scores)
        flat = np.concatenate([scores.scores[n].ravel() for n in names])
        mask_flat = select_top_fraction(flat, fraction)
        threshold = abs_quantile(flat, fraction)
        masks = {}
        offset = 0
        for n in names:
            size = scores.scores[n].size
            masks[n] = mask_flat[offset : offset + size].reshape(scores.scores[n].shape)
            offset += size
        return OutlierMask(masks, fraction, scope, {n: threshold for n in names})
    raise DomainError(f"unknown scope {scope!r}")


def predicted_loss_delta(grads: GradientBundle, w: ModelBundle, wq: ModelBundle) -> float:
    """First-order estimate of the loss change caused by replacing w with wq.

    Returns -sum(g * (w - wq)); adding it to the loss at w predicts the
    loss at wq.
    """
    return -sum(sensitivity_objective(grads, w, wq).values())


def sensitivity_objective(grads: GradientBundle, w: ModelBundle, wq: ModelBundle) -> dict[str, float]:
    """Per-tensor inner product g . (w - wq), the layer-ranking diagnostic."""
    out: dict[str, float] = {}
    for name in w.names():
        if name not in wq:
            raise AlignmentError(f"tensor {name!r} missing from the dequantized bundle")
        g = grads.grad_for(name).data.astype(np.float64)
        delta = w[name].data.astype(np.float64) - wq[name].data.astype(np.float64)
        if g.shape != delta.shape:
            raise AlignmentError(f"gradient/weight shape mismatch for {name!r}")
        out[name] = float(np.sum(g * delta))
    return out


def write_mask(mask: OutlierMask, path) -> None:
    """Export masks as a container of uint8 tensors named "<weight>.mask"."""
    arrays = {name + MASK_SUFFIX: m.astype(np.uint8) for name, m in mask.masks.items()}
    meta = {"selected_fraction": repr(mask.selected_fraction), "scope": mask.scope}
    atomic_write_bytes(path, encode_raw(arrays, meta))
