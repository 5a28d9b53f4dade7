"""LogMAE evaluation and unified-vs-baseline comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import EncodedData
from .errors import DataError
from .schema import ALL_DOMAINS, TASKS, AdProduct, DomainKey, TaskId, task_applies
from .towers import predict_probs

EVAL_CHUNK = 1024


def log_mae(preds, teachers) -> float:
    preds = np.asarray(preds, dtype=np.float64).reshape(-1)
    teachers = np.asarray(teachers, dtype=np.float64).reshape(-1)
    if preds.size == 0 or preds.size != teachers.size:
        raise DataError("log_mae needs two equal-length, non-empty inputs")
    return float(np.mean(np.abs(np.log(preds) - np.log(teachers))))


def improvement_pct(base: float, new: float) -> float:
    if base == 0:
        raise DataError("improvement_pct: base LogMAE is zero")
    return 100.0 * (base - new) / base


def predict(model, data: EncodedData, constrained: bool, chunk: int = EVAL_CHUNK) -> np.ndarray:
    """Inference-mode probabilities (n, 3), NaN where masked. Fixed-size
    chunks keep the result independent of how the work is split."""
    out = np.full((len(data), len(TASKS)), np.nan)
    for start in range(0, len(data), chunk):
        rows = np.arange(start, min(start + chunk, len(data)))
        part = data.subset(rows)
        logits = {t: v.data[:, 0] for t, v in model.logits(part, "infer").items()}
        probs = predict_probs(logits, constrained, part.product)
        for t in TASKS:
            out[rows, t] = probs[t]
    return out


@dataclass
class EvalReport:
    cells: dict = field(default_factory=dict)  # (DomainKey, TaskId) -> (logmae, count)
    per_task: dict = field(default_factory=dict)  # TaskId -> (logmae, count)
    overall: float = float("nan")

    def logmae(self, domain: DomainKey, task: TaskId) -> float:
        return self.cells.get((domain, TaskId(task)), (float("nan"), 0))[0]

    def records(self) -> list[str]:
        lines = []
        for (d, t), (v, c) in sorted(self.cells.items(), key=lambda kv: (kv[0][0].index, kv[0][1])):
            lines.append(f"kind=cell surface={d.surface.name} product={d.product.name} task={t.name} logmae={v!r} count={c}")
        for t, (v, c) in sorted(self.per_task.items()):
            lines.append(f"kind=task task={t.name} logmae={v!r} count={c}")
        lines.append(f"kind=overall logmae={self.overall!r}")
        return lines


def evaluate_probs(probs: np.ndarray, data: EncodedData) -> EvalReport:
    report = EvalReport()
    all_err = []
    for t in TASKS:
        task_err = []
        for d in ALL_DOMAINS:
            if not task_applies(t, d.product):
                continue
            rows = np.nonzero((data.domain == d.index) & ~np.isnan(data.teacher[:, t]))[0]
            if rows.size == 0:
                continue
            err = np.abs(np.log(probs[rows, t]) - np.log(data.teacher[rows, t]))
            report.cells[(d, t)] = (float(err.mean()), int(rows.size))
            task_err.append(err)
        if task_err:
            e = np.concatenate(task_err)
            report.per_task[t] = (float(e.mean()), int(e.size))
            all_err.append(e)
    if all_err:
        report.overall = float(np.concatenate(all_err).mean())
    return report


def evaluate(model, data: EncodedData, constrained: bool) -> EvalReport:
    return evaluate_probs(predict(model, data, constrained), data)


def evaluate_baselines(baselines: dict, data: EncodedData) -> EvalReport:
    """Each domain slice is scored by its own baseline."""
    probs = np.full((len(data), len(TASKS)), np.nan)
    for d, model in baselines.items():
        rows = np.nonzero(data.domain == d.index)[0]
        if rows.size:
            probs[rows] = predict(model, data.subset(rows), constrained=False)
    return evaluate_probs(probs, data)


@dataclass
class ComparisonTable:
    cells: dict  # (DomainKey, TaskId) -> improvement % or None for N/A

    def filled(self) -> int:
        return sum(v is not None for v in self.cells.values())

    def positive(self) -> int:
        return sum(1 for v in self.cells.values() if v is not None and v > 0)

    def render(self) -> str:
        rows = [f"{'surface':<11} {'product':<9} " + " ".join(f"{t.name:>9}" for t in TASKS)]
        for d in ALL_DOMAINS:
            vals = []
            for t in TASKS:
                v = self.cells[(d, t)]
                vals.append(f"{'N/A':>9}" if v is None else f"{v:>8.2f}%")
            rows.append(f"{d.surface.name:<11} {d.product.name:<9} " + " ".join(vals))
        return "\n".join(rows)

    def records(self) -> list[str]:
        out = []
        for d in ALL_DOMAINS:
            for t in TASKS:
                v = self.cells[(d, t)]
                val = "NA" if v is None else repr(v)
                out.append(f"kind=compare surface={d.surface.name} product={d.product.name} task={t.name} improvement_pct={val}")
        return out


def compare_reports(base: EvalReport, new: EvalReport) -> ComparisonTable:
    cells = {}
    for d in ALL_DOMAINS:
        for t in TASKS:
            if not task_applies(t, d.product):
                cells[(d, t)] = None
                continue
            b, n = base.logmae(d, t), new.logmae(d, t)
            cells[(d, t)] = None if (math.isnan(b) or math.isnan(n)) else improvement_pct(b, n)
    return ComparisonTable(cells)


def compare_unified_vs_baselines(mtmd, baselines: dict, data: EncodedData, constrained: bool) -> ComparisonTable:
    return compare_reports(evaluate_baselines(baselines, data), evaluate(mtmd, data, constrained))
