"""End-to-end experiment orchestration.

A spec names a reference model, a calibration corpus (gradients come from
its first N max_seq_len-token windows, N defaulting to a single sample),
evaluation corpora, and a grid of (selection method, outlier fraction,
bits, group size) cells. The harness captures gradients once per method,
quantizes per cell, evaluates perplexity and next-token accuracy per
corpus, and assembles a table with an always-present FP16 baseline row.
Cell failures are isolated: one bad cell is recorded with its reason and
the rest of the grid still completes.

Report tolerances used by the trend checks (recorded here so regressions
are auditable): nested-fraction perplexity monotonicity allows 0.5%
relative slack per step; the all-outlier configuration must match the
baseline within 0.1% relative (pure float16 storage rounding).
"""

from __future__ import annotations

import csv
import io
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import refmodel, sensitivity
from .container import GradientBundle, ModelBundle, encode_raw, read_container
from .errors import DomainError, GwqError, UsageError
from .gwqfile import encode_gwq
from .quantizer import QuantConfig, average_bits, quantize_model
from .sensitivity import (ABS_GRADIENT_MEAN, HESSIAN_FISHER, HESSIAN_INPUT_SQ, RANDOM,
                          OutlierMask, SensitivityScores, aggregate_gradients,
                          hessian_diag_scores, select_outliers)

TREND_TOLERANCE = 0.005      # relative slack per nested-fraction step
FP16_ROUNDTRIP_TOLERANCE = 0.001

GRADIENT = "gradient"
_METHODS = (GRADIENT, HESSIAN_FISHER, HESSIAN_INPUT_SQ, RANDOM)


@dataclass(frozen=True)
class CellSpec:
    method: str
    fraction: float
    bits: int
    group_size: int = 16

    def __post_init__(self):
        if self.method not in _METHODS:
            raise UsageError(f"unknown selection method {self.method!r}; pick from {_METHODS}")

    @property
    def cell_id(self) -> str:
        return f"{self.method}-b{self.bits}-g{self.group_size}-f{self.fraction:g}"


@dataclass
class ExperimentSpec:
    model_path: str
    calibration_path: str
    eval_paths: list[str]
    cells: list[CellSpec]
    sample_count: int = 1
    seed: int = 0
    scope: str = "per_layer"
    threads: int = 1

    def __post_init__(self):
        if self.sample_count < 1:
            raise UsageError("sample_count must be >= 1")


@dataclass
class EvalReport:
    corpus_names: list[str]
    rows: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def header(self) -> list[str]:
        cols = ["cell_id", "method", "fraction", "bits", "group", "avg_bits"]
        for name in self.corpus_names:
            cols += [f"ppl_{name}", f"acc_{name}"]
        cols += ["clamp_rate", "file_bytes", "seconds"]
        return cols

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.header())
        for row in self.rows:
            writer.writerow([_format_cell(row.get(col)) for col in self.header()])
        return buf.getvalue()

    def to_text(self) -> str:
        header = self.header()
        table = [header] + [[_format_cell(r.get(c)) for c in header] for r in self.rows]
        widths = [max(len(line[i]) for line in table) for i in range(len(header))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip()
                 for line in table]
        for row in self.rows:
            if row.get("error"):
                lines.append(f"# {row['cell_id']} failed: {row['error']}")
            if "predicted_loss_after" in row:
                lines.append(
                    f"# {row['cell_id']} first-order check: loss {row['loss_before']:.6f} -> "
                    f"{row['loss_after']:.6f} (predicted {row['predicted_loss_after']:.6f})"
                )
        lines.extend(f"# {note}" for note in self.notes)
        return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def render_report(report: EvalReport, fmt: str = "text-table") -> bytes:
    if fmt in ("text", "text-table"):
        return report.to_text().encode("utf-8")
    if fmt == "csv":
        return report.to_csv().encode("utf-8")
    raise UsageError(f"unknown report format {fmt!r}")


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def random_baseline(shapes: dict[str, tuple[int, ...]], fraction: float, seed: int) -> OutlierMask:
    """Uniformly random mask of exact per-tensor cardinality ceil(fraction*numel)."""
    if not (0.0 < fraction <= 1.0):
        raise DomainError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    masks = {}
    for name, shape in shapes.items():
        numel = int(np.prod(shape))
        k = math.ceil(fraction * numel)
        flat = np.zeros(numel, dtype=bool)
        flat[rng.choice(numel, size=k, replace=False)] = True
        masks[name] = flat.reshape(shape)
    return OutlierMask(masks, fraction, "per_layer", {})


def quantizable_shapes(weights: ModelBundle, cfg: QuantConfig) -> dict[str, tuple[int, ...]]:
    return {n: t.dims for n, t in weights.items() if cfg.quantize_set(n, t.dims)}


def _mask_for(method: str, fraction: float, scope: str, seed: int,
              weights: ModelBundle, scores_by_method: dict[str, SensitivityScores],
              shapes: dict[str, tuple[int, ...]]) -> OutlierMask:
    if method == RANDOM:
        return random_baseline(shapes, fraction, seed)
    scores = scores_by_method[method].restrict(shapes)
    return select_outliers(scores, fraction, scope)


def calibration_windows(weights: ModelBundle, corpus_text: str, sample_count: int) -> list[np.ndarray]:
    """The first ``sample_count`` max_seq_len-token windows of the corpus."""
    config = refmodel.config_from_bundle(weights)
    tokens = refmodel.tokenize_for(weights, corpus_text)
    windows = refmodel.corpus_windows(tokens, config.max_seq_len)
    if len(windows) < sample_count:
        raise DomainError(
            f"calibration corpus has {len(windows)} windows, spec needs {sample_count}"
        )
    return windows[:sample_count]


def capture_gradients(weights: ModelBundle, samples: list[np.ndarray],
                      kind: refmodel.LossKind = refmodel.DEFAULT_LOSS) -> list[GradientBundle]:
    """One backward pass per calibration sample, weights untouched."""
    return [refmodel.backward(weights, window, kind) for window in samples]


def _scores_for_methods(methods: set[str], weights: ModelBundle,
                        samples: list[np.ndarray],
                        grads: list[GradientBundle]) -> dict[str, SensitivityScores]:
    scores: dict[str, SensitivityScores] = {}
    if GRADIENT in methods:
        scores[GRADIENT] = aggregate_gradients(grads)
    if HESSIAN_FISHER in methods:
        scores[HESSIAN_FISHER] = hessian_diag_scores(weights, grads, HESSIAN_FISHER)
    if HESSIAN_INPUT_SQ in methods:
        moments = refmodel.linear_input_second_moments(weights, [w[None, :] for w in samples])
        scores[HESSIAN_INPUT_SQ] = hessian_diag_scores(weights, moments, HESSIAN_INPUT_SQ)
    return scores


# ---------------------------------------------------------------------------
# experiment driver
# ---------------------------------------------------------------------------

def _eval_model(model, corpora: dict[str, np.ndarray]) -> dict[str, float]:
    out = {}
    for name, tokens in corpora.items():
        out[f"ppl_{name}"] = refmodel.perplexity(model, tokens)
        out[f"acc_{name}"] = refmodel.next_token_accuracy(model, tokens)
    return out


def corpus_label(path: str) -> str:
    stem = os.path.splitext(os.path.basename(os.fspath(path)))[0]
    return "".join(ch if ch.isalnum() else "_" for ch in stem)


def run_experiment(spec: ExperimentSpec) -> EvalReport:
    weights = read_container(spec.model_path)
    with open(spec.calibration_path, "r", encoding="utf-8") as fh:
        calibration_text = fh.read()
    corpora: dict[str, np.ndarray] = {}
    for path in spec.eval_paths:
        with open(path, "r", encoding="utf-8") as fh:
            corpora[corpus_label(path)] = refmodel.tokenize_for(weights, fh.read())

    report = EvalReport(corpus_names=list(corpora))
    report.notes.append(f"seed={spec.seed} sample_count={spec.sample_count} scope={spec.scope}")
    report.notes.append(
        f"tolerances: nested-fraction trend {TREND_TOLERANCE:.1%} relative per step, "
        f"all-outlier vs baseline {FP16_ROUNDTRIP_TOLERANCE:.1%} relative"
    )

    t0 = time.perf_counter()
    baseline = {
        "cell_id": "baseline", "method": "fp16", "fraction": None, "bits": 16,
        "group": None, "avg_bits": 16.0, "clamp_rate": None,
        "file_bytes": len(encode_raw(
            {n: t.data.astype(np.float16) for n, t in weights.items()}, weights.metadata)),
    }
    baseline.update(_eval_model(weights, corpora))
    baseline["seconds"] = time.perf_counter() - t0
    report.rows.append(baseline)

    samples = calibration_windows(weights, calibration_text, spec.sample_count)
    methods = {cell.method for cell in spec.cells}
    grads = capture_gradients(weights, samples) if methods - {RANDOM} else []
    scores = _scores_for_methods(methods, weights, samples, grads)

    def run_cell(cell: CellSpec) -> dict:
        row = {
            "cell_id": cell.cell_id, "method": cell.method, "fraction": cell.fraction,
            "bits": cell.bits, "group": cell.group_size,
        }
        start = time.perf_counter()
        try:
            cfg = QuantConfig(bits=cell.bits, group_size=cell.group_size,
                              outlier_fraction=cell.fraction, scope=spec.scope)
            shapes = quantizable_shapes(weights, cfg)
            mask = _mask_for(cell.method, cell.fraction, spec.scope, spec.seed,
                             weights, scores, shapes)
            qm = quantize_model(weights, mask, cfg)
            row["avg_bits"] = average_bits(qm)
            row["file_bytes"] = len(encode_gwq(qm))
            eligible = sum(qt.numel - qt.n_outliers for qt in qm.quantized.values())
            clamped = sum(qt.clamp_count for qt in qm.quantized.values())
            row["clamp_rate"] = clamped / eligible if eligible else 0.0
            dense = qm.to_bundle()
            row.update(_eval_model(dense, corpora))
            if grads and cell.method != RANDOM:
                window = samples[0]
                row["loss_before"] = refmodel.loss(refmodel.forward(weights, window), window)
                row["loss_after"] = refmodel.loss(refmodel.forward(dense, window), window)
                row["predicted_loss_after"] = row["loss_before"] + sensitivity.predicted_loss_delta(
                    grads[0], weights, dense)
        except GwqError as exc:
            row["error"] = f"{exc.category}: {exc}"
        row["seconds"] = time.perf_counter() - start
        return row

    if spec.threads > 1:
        with ThreadPoolExecutor(max_workers=spec.threads) as pool:
            rows = list(pool.map(run_cell, spec.cells))
    else:
        rows = [run_cell(cell) for cell in spec.cells]
    report.rows.extend(rows)
    return report


# ---------------------------------------------------------------------------
# gradient-vs-random selection study
# ---------------------------------------------------------------------------

@dataclass
class SelectionStudy:
    bits: int
    fraction: float
    seeds: list[int]
    ppl_gradient: float
    ppl_random: list[float]

    @property
    def mean_random(self) -> float:
        return float(np.mean(self.ppl_random))

    @property
    def margin(self) -> float:
        """mean random-selection perplexity minus gradient-selection perplexity."""
        return self.mean_random - self.ppl_gradient

    def lines(self) -> list[str]:
        return [
            f"selection study: bits={self.bits} fraction={self.fraction:g}",
            f"ppl_gradient={self.ppl_gradient:.6f}",
            f"ppl_random_mean={self.mean_random:.6f} over seeds {self.seeds}",
            f"margin={self.margin:.6f} (positive favours gradient selection)",
        ]


def gradient_vs_random_study(weights: ModelBundle, calibration_text: str,
                             eval_tokens: np.ndarray, bits: int = 3, fraction: float = 0.01,
                             n_random: int = 20, base_seed: int = 0,
                             group_size: int = 16) -> SelectionStudy:
    """Compare gradient-selected outliers against random masks of equal size."""
    samples = calibration_windows(weights, calibration_text, 1)
    grads = capture_gradients(weights, samples)
    cfg = QuantConfig(bits=bits, group_size=group_size, outlier_fraction=fraction)
    shapes = quantizable_shapes(weights, cfg)

    mask = select_outliers(aggregate_gradients(grads).restrict(shapes), fraction)
    ppl_gradient = refmodel.perplexity(quantize_model(weights, mask, cfg), eval_tokens)

    seeds = [base_seed + i for i in range(n_random)]
    ppl_random = []
    for seed in seeds:
        rmask = random_baseline(shapes, fraction, seed)
        ppl_random.append(refmodel.perplexity(quantize_model(weights, rmask, cfg), eval_tokens))
    return SelectionStudy(bits=bits, fraction=fraction, seeds=seeds,
                          ppl_gradient=ppl_gradient, ppl_random=ppl_random)
