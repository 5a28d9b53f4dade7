"""One-factor-at-a-time ablations of the unified model.

Every variant is trained from the same seed on the same data with the same
step budget as ``full``; the reported delta is the improvement of ``full``
over the variant, so a positive delta means the removed factor helps.
"""
from __future__ import annotations

import statistics
from dataclasses import dataclass, field

from .config import TrainConfig, render_config
from .dataset import EncodedData
from .errors import ConfigurationError
from .metrics import EvalReport, evaluate, improvement_pct
from .schema import TASKS, FeatureSchema, TaskId
from .trainer import train

VARIANTS = {
    "full": {},
    "no_domain_adapt": {"domain_adapt": False},
    "no_dcn": {"use_dcn": False},
    "post_norm": {"norm": "post"},
    "downsample_50": {"downsample": 0.5},
    "emb_dim_64": {"task_dims": {"CTR": 64, "GCTR": 64, "OCTR": 64}},
    "emb_dim_48": {"task_dims": {"CTR": 48, "GCTR": 48, "OCTR": 48}},
    "emb_dim_32": {"task_dims": {"CTR": 32, "GCTR": 32, "OCTR": 32}},
    "unconstrained": {"constrained": False},
}


def variant_config(cfg: TrainConfig, variant: str) -> TrainConfig:
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown ablation variant {variant!r}; known: {', '.join(VARIANTS)}")
    return cfg.replace(**VARIANTS[variant])


@dataclass
class AblationReport:
    seeds: tuple
    reports: dict = field(default_factory=dict)  # (variant, seed) -> EvalReport

    @property
    def variants(self) -> list[str]:
        seen = []
        for v, _ in self.reports:
            if v not in seen:
                seen.append(v)
        return seen

    def logmae(self, variant: str, seed: int, task: TaskId | None = None) -> float:
        rep: EvalReport = self.reports[(variant, seed)]
        return rep.overall if task is None else rep.per_task[TaskId(task)][0]

    def delta(self, variant: str, seed: int, task: TaskId | None = None) -> float:
        """Improvement % of ``full`` over ``variant`` for one seed."""
        if variant == "full":
            return 0.0
        return improvement_pct(self.logmae(variant, seed, task), self.logmae("full", seed, task))

    def median_delta(self, variant: str, task: TaskId | None = None) -> float:
        return statistics.median(self.delta(variant, s, task) for s in self.seeds)

    def median_logmae(self, variant: str, task: TaskId | None = None) -> float:
        return statistics.median(self.logmae(variant, s, task) for s in self.seeds)

    def render(self) -> str:
        head = f"{'variant':<16} {'median logmae':>13} {'median delta':>13}  " + " ".join(f"{'seed ' + str(s):>10}" for s in self.seeds)
        rows = [head]
        for v in self.variants:
            per_seed = " ".join(f"{self.delta(v, s):>9.2f}%" for s in self.seeds)
            rows.append(f"{v:<16} {self.median_logmae(v):>13.4f} {self.median_delta(v):>12.2f}%  {per_seed}")
        return "\n".join(rows)

    def records(self) -> list[str]:
        out = []
        for v in self.variants:
            for s in self.seeds:
                task_part = " ".join(f"logmae_{t.name}={self.logmae(v, s, t)!r}" for t in TASKS)
                out.append(f"kind=ablation variant={v} seed={s} logmae={self.logmae(v, s)!r} {task_part} delta_pct={self.delta(v, s)!r}")
            out.append(f"kind=ablation_median variant={v} logmae={self.median_logmae(v)!r} delta_pct={self.median_delta(v)!r}")
        return out


def run_ablation(
    variants,
    cfg: TrainConfig,
    train_data: EncodedData,
    eval_data: EncodedData,
    schema: FeatureSchema,
    seeds,
    data_for_seed=None,
    known=None,
) -> AblationReport:
    """Train and evaluate every variant for every seed.

    ``data_for_seed``, when given, maps a seed to ``(train, eval)`` data so
    each seed can also draw its own dataset; otherwise the passed data are
    reused for all seeds. ``known`` maps ``(variant, seed)`` to an already
    computed EvalReport, which is used instead of training that run again.
    """
    seeds = tuple(int(s) for s in seeds)
    if not seeds:
        raise ConfigurationError("run_ablation needs at least one seed")
    variants = list(variants)
    if "full" not in variants:
        variants.insert(0, "full")
    for v in variants:
        variant_config(cfg, v)
    report = AblationReport(seeds)
    known = known or {}
    for seed in seeds:
        data = None
        done = {}  # variants with identical configs (emb_dim_64 vs full) share one run
        for v in variants:
            vcfg = variant_config(cfg.replace(seed=seed), v)
            key = render_config(vcfg)
            if key not in done and (v, seed) in known:
                done[key] = known[(v, seed)]
            if key not in done:
                if data is None:
                    data = data_for_seed(seed) if data_for_seed is not None else (train_data, eval_data)
                tr, ev = data
                result = train(vcfg, tr, schema)
                done[key] = evaluate(result.model, ev, vcfg.constrained)
            report.reports[(v, seed)] = done[key]
    return report
