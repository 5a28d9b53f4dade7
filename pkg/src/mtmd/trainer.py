"""Distillation objective, the training loop, and per-slice baselines."""
from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import numkernel as nk
from .adapt import Adapter
from .config import ModelConfig, TrainConfig
from .dataset import EncodedData
from .errors import ConfigurationError
from .experts import FFN, TaskEmbedding, embedding_init
from .numkernel import Adam, ParamStore, Rng, Var
from .schema import ALL_DOMAINS, TASKS, DomainKey, FeatureSchema, TaskId
from .towers import MtmdModel, log_probs, score

logger = logging.getLogger(__name__)

TEACHER_LO, TEACHER_HI = 1e-7, 1.0 - 1e-7


def bernoulli_kl(p: float, q: float) -> float:
    """KL(Bernoulli(p) || Bernoulli(q))."""
    return p * math.log(p / q) + (1.0 - p) * math.log((1.0 - p) / (1.0 - q))


def _xlogx(p: np.ndarray) -> np.ndarray:
    return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


@dataclass
class LossOut:
    total: Var
    components: dict  # task -> float


def distill_loss(logits: dict, teacher: np.ndarray, cfg: TrainConfig, constrained: bool) -> LossOut:
    """mean over rows of sum_t w_t KL(teacher_t || student_t); masked tasks
    (NaN teacher) contribute nothing."""
    n = teacher.shape[0]
    lp = log_probs(logits, constrained)
    terms, comps = [], {}
    for t in TASKS:
        col = teacher[:, t]
        mask = ~np.isnan(col)
        if not mask.any():
            comps[t] = 0.0
            continue
        p = np.clip(np.where(mask, col, 0.5), TEACHER_LO, TEACHER_HI)[:, None]
        entropy = (_xlogx(p) + _xlogx(1.0 - p)) * mask[:, None]
        lq, l1q = lp[t]
        w = (cfg.weight(t) / n) * mask[:, None].astype(float)
        # sum_rows w * (p ln p + (1-p) ln(1-p) - p lq - (1-p) l1q)
        cross = nk.add(nk.weighted_total(lq, w * p), nk.weighted_total(l1q, w * (1.0 - p)))
        term = nk.sub(nk.const(float((w * entropy).sum())), cross)
        comps[t] = float(term.data[0, 0])
        terms.append(term)
    total = nk.add_n(terms) if terms else nk.const(0.0)
    return LossOut(total, comps)


def batch_loss(model, batch: EncodedData, cfg: TrainConfig, mode: str = "train") -> LossOut:
    if len(batch) == 0:
        raise ConfigurationError("batch_loss needs a non-empty batch")
    constrained = cfg.constrained and getattr(model, "supports_constrained", True)
    return distill_loss(model.logits(batch, mode), batch.teacher, cfg, constrained)


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)  # dicts: step, total, CTR, GCTR, OCTR

    def totals(self) -> np.ndarray:
        return np.array([h["total"] for h in self.history])


def batch_stream(n: int, batch_size: int, rng: Rng):
    """Endless seeded shuffled mini-batches; reshuffles at each epoch end."""
    pos, perm = n, None
    bs = min(batch_size, n)
    while True:
        if pos + bs > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + bs]
        pos += bs


def downsample_rows(n: int, fraction: float, seed: int) -> np.ndarray:
    if fraction >= 1.0:
        return np.arange(n)
    keep = max(2, int(round(n * fraction)))
    return np.sort(Rng(seed ^ 0xD0D0).permutation(n)[:keep])


def run_training(model, cfg: TrainConfig, data: EncodedData, steps: int | None = None, checkpoint_fn=None) -> TrainResult:
    steps = cfg.steps if steps is None else steps
    rows = downsample_rows(len(data), cfg.downsample, cfg.seed)
    data = data.subset(rows) if len(rows) != len(data) else data
    opt = Adam(lr=cfg.lr)
    stream = batch_stream(len(data), cfg.batch_size, Rng(cfg.seed ^ 0xBA7C4))
    history = []
    model.store.zero_grad()
    for step in range(1, steps + 1):
        batch = data.subset(next(stream))
        out = batch_loss(model, batch, cfg, "train")
        out.total.backward()
        opt.step(model.store)
        rec = {"step": step, "total": float(out.total.data[0, 0])}
        rec.update({t.name: out.components[t] for t in TASKS})
        history.append(rec)
        if checkpoint_fn is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            checkpoint_fn(model, step)
    return TrainResult(model, history)


def train(cfg: TrainConfig, data: EncodedData, schema: FeatureSchema, schema_hash: str | None = None) -> TrainResult:
    if schema_hash is not None and schema_hash != schema.hash:
        raise ConfigurationError(f"dataset schema hash {schema_hash} does not match model schema {schema.hash}")
    model = MtmdModel(schema, cfg.model, seed=cfg.seed)
    checkpoint_fn = None
    if cfg.checkpoint_every and cfg.checkpoint_dir:
        from .embio import write_checkpoint

        os.makedirs(cfg.checkpoint_dir, exist_ok=True)

        def checkpoint_fn(m, step):
            write_checkpoint(os.path.join(cfg.checkpoint_dir, f"step{step:06d}.ckpt"), m, cfg)

    return run_training(model, cfg, data, checkpoint_fn=checkpoint_fn)


@dataclass
class ProbeResult:
    initial: float
    final: float
    steps: int

    @property
    def ratio(self) -> float:
        return self.final / self.initial


def overfit_probe(cfg: TrainConfig, data: EncodedData, schema: FeatureSchema, max_steps: int = 2000, target: float = 0.05) -> ProbeResult:
    """Full-batch training on a small set until the loss falls below
    ``target`` times its initial value or ``max_steps`` run out."""
    model = MtmdModel(schema, cfg.model, seed=cfg.seed)
    opt = Adam(lr=cfg.lr)
    model.store.zero_grad()
    initial = loss = float("nan")
    step = 0
    while step < max_steps:
        out = batch_loss(model, data, cfg, "train")
        loss = float(out.total.data[0, 0])
        if step == 0:
            initial = loss
        elif loss < target * initial:
            break
        out.total.backward()
        opt.step(model.store)
        step += 1
    return ProbeResult(initial, loss, step)


# ---------------------------------------------------------------------------
# per-slice baselines


class BaselineModel:
    """Plain two-tower model for one domain: per side an adapter with a
    single batch norm and no SE, one FFN, and a linear 64-d head per task.
    Tasks are scored independently (no constrained factorization)."""

    supports_constrained = False

    def __init__(self, schema: FeatureSchema, domain: DomainKey, cfg: ModelConfig, seed: int = 0, emb_dim: int = 64):
        self.schema, self.domain = schema, domain
        bcfg = ModelConfig(
            deep_dims=cfg.deep_dims,
            shallow_dims=cfg.shallow_dims,
            gate_dims=cfg.gate_dims,
            task_dims={t.name: emb_dim for t in TASKS},
            slope=cfg.slope,
            bn_momentum=cfg.bn_momentum,
            bn_eps=cfg.bn_eps,
            emb_init_std=cfg.emb_init_std,
            domain_adapt=False,
            use_dcn=False,
        )
        self.cfg = bcfg
        self.store = ParamStore()
        self.adapters, self.ffn, self.heads = {}, {}, {}
        for side in ("query", "item"):
            a = Adapter(self.store, f"{side}.adapt", schema, side, bcfg)
            self.adapters[side] = a
            self.ffn[side] = FFN(self.store, f"{side}.tower", a.width, bcfg.deep_dims, bcfg.slope, ln_eps=bcfg.ln_eps)
            self.heads[side] = {
                t: (
                    self.store.declare(f"{side}.head.{t.name}.W", (emb_dim, bcfg.expert_dim), embedding_init(emb_dim)),
                    self.store.declare(f"{side}.head.{t.name}.b", (1, emb_dim)),
                )
                for t in TASKS
            }
        self.store.initialize(Rng(seed))

    def tower_forward(self, data: EncodedData, side: str, mode: str) -> dict:
        h = self.ffn[side](self.adapters[side](data, mode).x)
        out = {}
        for t in TASKS:
            W, b = self.heads[side][t]
            deep = nk.linear(h, nk.param(W), nk.param(b))
            out[t] = TaskEmbedding(t, deep, nk.const(np.zeros((len(data), 0))))
        return out

    def tower(self, side: str):
        return lambda data, mode: self.tower_forward(data, side, mode)

    def logits(self, data: EncodedData, mode: str) -> dict:
        q = self.tower_forward(data, "query", mode)
        i = self.tower_forward(data, "item", mode)
        return {t: nk.rowdot(q[t].deep, i[t].deep) for t in TASKS}

    def non_embedding_params(self) -> int:
        return self.store.count(exclude=(".emb.",))


@dataclass
class BaselineSet:
    models: dict  # DomainKey -> BaselineModel
    histories: dict
    non_embedding_params: int
    mtmd_non_embedding_params: int


def train_baselines(cfg: TrainConfig, data: EncodedData, schema: FeatureSchema, steps: int | None = None) -> BaselineSet:
    """One baseline per domain, each trained only on its own slice.

    ``steps`` (default ``cfg.steps``) is the total budget, matching the
    unified model's; it is split evenly across the trained baselines.
    """
    total_steps = cfg.steps if steps is None else steps
    slices = []
    for d in ALL_DOMAINS:
        rows = np.nonzero(data.domain == d.index)[0]
        if rows.size < 2:
            logger.warning("no training data for %s; baseline skipped", d)
            continue
        slices.append((d, rows))
    per_model = max(1, total_steps // max(1, len(slices)))
    models, histories = {}, {}
    for d, rows in slices:
        seed = (cfg.seed * 1_000_003 + d.index + 1) & 0xFFFFFFFFFFFFFFFF
        model = BaselineModel(schema, d, cfg.model, seed=seed)
        bcfg = cfg.replace(seed=seed, constrained=False)
        res = run_training(model, bcfg, data.subset(rows), steps=per_model)
        models[d] = model
        histories[d] = res.history
    total = sum(m.non_embedding_params() for m in models.values())
    mtmd = MtmdModel(schema, cfg.model, seed=0).non_embedding_params()
    return BaselineSet(models, histories, total, mtmd)
