"""MAE / PMAE metrics, test-set evaluation, the five-row ablation matrix and
report serialization."""

from __future__ import annotations

import csv
import io
import json
import math
import traceback
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import NUTRIENTS, RGBDSample
from .errors import UndefinedMetricError
from .model import ABLATION_INDEX, FusionNet, ModelConfig, build_model, prepare_batch

NUTRIENT_LABELS = {
    "calories": "Calorie",
    "mass": "Mass",
    "fat": "Fat",
    "carb": "Carb",
    "protein": "Protein",
}
ABLATION_LABELS = {
    "(a)": "RGB Stream",
    "(b)": "Depth Stream",
    "(c)": "(a)+(b)+direct fusion",
    "(d)": "(a)+(b)+multi-scale fusion",
    "(e)": "(d) + CAB",
}


def mae(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise ValueError("mae of an empty vector is undefined")
    return float(np.mean(np.abs(pred - truth)))


def pmae(pred, truth) -> float:
    """MAE divided by the mean ground-truth value (a ratio of means)."""
    truth_mean = float(np.mean(np.asarray(truth, dtype=np.float64))) if len(truth) else 0.0
    err = mae(pred, truth)
    if truth_mean == 0:
        raise UndefinedMetricError("PMAE is undefined when the mean ground truth is zero")
    return err / truth_mean


@dataclass
class MetricsReport:
    mae: dict[str, float]
    pmae: dict[str, float]
    mean_pmae: float
    n_samples: int
    split: str = "test"
    failures: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "n_samples": self.n_samples,
            "mae": dict(self.mae),
            "pmae": dict(self.pmae),
            "mean_pmae": self.mean_pmae,
            "failures": [list(f) for f in self.failures],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(
            mae={k: float(v) for k, v in d["mae"].items()},
            pmae={k: float(v) for k, v in d["pmae"].items()},
            mean_pmae=float(d["mean_pmae"]),
            n_samples=int(d["n_samples"]),
            split=d.get("split", "test"),
            failures=[tuple(f) for f in d.get("failures", [])],
        )


def metrics_from_arrays(pred: np.ndarray, truth: np.ndarray, split: str = "test",
                        failures=()) -> MetricsReport:
    """``pred`` and ``truth`` are N x 5 in nutrient order."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] < 1:
        raise ValueError("need at least one sample")
    maes = {n: mae(pred[:, k], truth[:, k]) for k, n in enumerate(NUTRIENTS)}
    pmaes = {n: pmae(pred[:, k], truth[:, k]) for k, n in enumerate(NUTRIENTS)}
    return MetricsReport(maes, pmaes, float(np.mean(list(pmaes.values()))), pred.shape[0], split, list(failures))


def _model_predictor(model: FusionNet, batch_size: int):
    dtype = next(model.parameters()).dtype

    def predict(samples):
        outs = []
        for i in range(0, len(samples), batch_size):
            rgb, depth, _ = prepare_batch(samples[i:i + batch_size], model.config, dtype)
            with torch.no_grad():
                outs.append(model(rgb, depth).double())
        return torch.cat(outs).numpy()

    return predict


def _sample_problem(sample: RGBDSample, config: ModelConfig) -> str | None:
    if config.image_size is not None and sample.size != config.image_size:
        return f"image size {sample.size} != model input {config.image_size}"
    if config.ablation_mode != "rgb_only" and sample.depth is None:
        return "missing depth"
    return None


def evaluate(model: FusionNet | Callable, test_set: Sequence[RGBDSample], batch_size: int = 8,
             split: str = "test") -> MetricsReport:
    """Metrics of clamped-at-zero predictions over ``test_set``.

    ``model`` is a :class:`FusionNet` or any callable mapping a list of samples
    to an N x 5 array.  Samples that cannot be fed to the model are listed in
    ``report.failures`` and skipped.
    """
    if not test_set:
        raise ValueError("test set is empty")
    failures = []
    if isinstance(model, FusionNet):
        usable = []
        for s in test_set:
            problem = _sample_problem(s, model.config)
            if problem:
                failures.append((s.dish_id, problem))
            else:
                usable.append(s)
        was_training = model.training
        model.eval()
        try:
            pred = _model_predictor(model, batch_size)(usable) if usable else None
        finally:
            model.train(was_training)
    else:
        usable = list(test_set)
        pred = np.asarray(model(usable), dtype=np.float64)
    if not usable:
        raise ValueError(f"no usable samples; failures: {failures[:3]}")
    truth = np.stack([s.target.as_array() for s in usable])
    return metrics_from_arrays(np.maximum(pred, 0), truth, split, failures)


# --------------------------------------------------------------------------
# ablation


@dataclass
class AblationResult:
    rows: dict[str, MetricsReport]
    failures: dict[str, str] = field(default_factory=dict)
    metadata: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rows": {k: r.to_dict() for k, r in self.rows.items()},
            "failures": dict(self.failures),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AblationResult":
        return cls(
            rows={k: MetricsReport.from_dict(v) for k, v in d["rows"].items()},
            failures=dict(d.get("failures", {})),
            metadata=d.get("metadata", {}),
        )


def run_ablation(train_set, test_set, base_config: ModelConfig, train_config, seed: int = 0,
                 rows: Sequence[str] = tuple(ABLATION_INDEX), log=None) -> AblationResult:
    """Train and evaluate each ablation variant with the same seed and budget.

    A variant that raises is recorded in ``failures``; the others still run.
    """
    from dataclasses import replace

    from .training import fit

    result = AblationResult(rows={})
    tcfg = replace(train_config, seed=seed)
    for key in rows:
        mode = ABLATION_INDEX[key]
        mcfg = replace(base_config, ablation_mode=mode)
        result.metadata[key] = {
            "mode": mode,
            "seed": seed,
            "epochs": tcfg.epochs,
            "max_steps": tcfg.max_steps,
            "batch": tcfg.batch,
            "lr0": tcfg.lr0,
            "n_train": len(train_set),
            "n_test": len(test_set),
        }
        try:
            model = build_model(mcfg, seed=seed)
            fit(model, train_set, tcfg)
            result.rows[key] = evaluate(model, test_set)
        except Exception as exc:  # isolate per-row failures
            result.failures[key] = f"{type(exc).__name__}: {exc}"
            if log:
                log(traceback.format_exc())
            continue
        if log:
            log(f"seed {seed} {key} {mode}: mean PMAE {result.rows[key].mean_pmae:.4f}")
    return result


# --------------------------------------------------------------------------
# report writing


def _fmt_mae(v: float) -> str:
    a = abs(v)
    if a >= 100:
        return f"{v:.0f}"
    if a >= 10:
        return f"{v:.1f}"
    return f"{v:.2f}"


def _fmt_pct(v: float) -> str:
    return f"{100 * v:.1f}%"


def _pair(report: MetricsReport, n: str) -> str:
    return f"{_fmt_mae(report.mae[n])} / {_fmt_pct(report.pmae[n])}"


def _csv_header(prefix=()) -> list[str]:
    cols = list(prefix)
    for n in NUTRIENTS:
        cols += [f"{n}_mae", f"{n}_pmae"]
    return cols + ["mean_pmae"]


def _csv_values(report: MetricsReport) -> list[str]:
    vals = []
    for n in NUTRIENTS:
        vals += [repr(report.mae[n]), repr(report.pmae[n])]
    return vals + [repr(report.mean_pmae)]


def _text_table(rows: list[tuple[str, MetricsReport]], first_col: str) -> str:
    header = [first_col] + [f"{NUTRIENT_LABELS[n]} MAE / PMAE" for n in NUTRIENTS] + ["Mean PMAE"]
    body = [[name] + [_pair(r, n) for n in NUTRIENTS] + [_fmt_pct(r.mean_pmae)] for name, r in rows]
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in [header] + body]
    return "\n".join(lines) + "\n"


def write_report(report: MetricsReport | AblationResult, format: str = "text") -> bytes:
    if format not in ("json", "csv", "text"):
        raise ValueError(f"unknown report format {format!r}")
    if format == "json":
        return json.dumps(report.to_dict(), indent=2).encode("utf-8")
    if isinstance(report, MetricsReport):
        if format == "text":
            text = _text_table([(report.split, report)], "Split")
            text += f"n = {report.n_samples}\n"
            for dish, why in report.failures:
                text += f"failed: {dish}: {why}\n"
            return text.encode("utf-8")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_csv_header(["split", "n_samples"]))
        w.writerow([report.split, report.n_samples] + _csv_values(report))
        return buf.getvalue().encode("utf-8")
    keys = [k for k in ABLATION_INDEX if k in report.rows or k in report.failures]
    if format == "text":
        ok = [(f"{k} {ABLATION_LABELS[k]}", report.rows[k]) for k in keys if k in report.rows]
        text = _text_table(ok, "Model")
        for k in keys:
            if k in report.failures:
                text += f"{k} failed: {report.failures[k]}\n"
        return text.encode("utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(_csv_header(["index", "model", "seed", "status"]))
    for k in keys:
        seed = report.metadata.get(k, {}).get("seed", "")
        if k in report.rows:
            w.writerow([k, ABLATION_LABELS[k], seed, "ok"] + _csv_values(report.rows[k]))
        else:
            w.writerow([k, ABLATION_LABELS[k], seed, "failed"] + [""] * (2 * len(NUTRIENTS) + 1))
    return buf.getvalue().encode("utf-8")


def parse_report(data: bytes) -> MetricsReport | AblationResult:
    """Inverse of ``write_report(..., 'json')``."""
    d = json.loads(data.decode("utf-8"))
    if "rows" in d:
        return AblationResult.from_dict(d)
    return MetricsReport.from_dict(d)


def ablation_table_csv(results: Sequence[AblationResult]) -> bytes:
    """One CSV with rows (a)-(e) for every seed."""
    parts = [write_report(r, "csv").decode("utf-8").splitlines() for r in results]
    lines = parts[0][:1] + [ln for p in parts for ln in p[1:]]
    return ("\n".join(lines) + "\n").encode("utf-8")


def is_finite_report(report: MetricsReport) -> bool:
    return all(math.isfinite(v) for v in list(report.mae.values()) + list(report.pmae.values()))
