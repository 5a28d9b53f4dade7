"""Query/item towers, scoring, probability composition, and top-k ranking."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .adapt import Adapter
from .config import ModelConfig
from .dataset import EncodedData
from .errors import ConfigurationError
from .experts import FFN, DomainExpert, TaskEmbedding
from .numkernel import ParamStore, Rng, Var, sigmoid_scalar
from .schema import TASKS, AdProduct, FeatureSchema, Surface, TaskId, task_applies

P_LO, P_HI = 1e-7, 1.0 - 1e-7


class Tower:
    """One side of the two-tower model: a shared adapter, one domain-shared
    expert, and a Domain Expert per key (surface or ad product). Each example
    runs through exactly one Domain Expert."""

    def __init__(self, store: ParamStore, side: str, keys, schema: FeatureSchema, cfg: ModelConfig):
        self.side = side
        self.keys = tuple(keys)
        self.adapter = Adapter(store, f"{side}.adapt", schema, side, cfg)
        layout = self.adapter.layout
        self.domain_shared = FFN(store, f"{side}.domain_shared", len(layout.shared_cols), cfg.deep_dims, cfg.slope, ln_eps=cfg.ln_eps)
        self.experts = {
            k: DomainExpert(store, f"{side}.{k.name}", layout.width, len(layout.high_level_cols), cfg) for k in self.keys
        }

    def expert_keys(self, data: EncodedData) -> np.ndarray:
        return data.surface if self.side == "query" else data.product

    def __call__(self, data: EncodedData, mode: str) -> dict:
        n = len(data)
        a = self.adapter(data, mode)
        ds_out = self.domain_shared(a.shared)
        keys = self.expert_keys(data)
        bad = ~np.isin(keys, [int(k) for k in self.keys])
        if bad.any():
            raise ConfigurationError(f"{self.side} tower has no expert for key {int(keys[bad][0])}")
        per_key = []
        for k in self.keys:
            rows = np.nonzero(keys == int(k))[0]
            if rows.size == 0:
                continue
            if rows.size == n:
                out = self.experts[k](a.x, a.high_level, ds_out)
            else:
                out = self.experts[k](nk.take_rows(a.x, rows), nk.take_rows(a.high_level, rows), nk.take_rows(ds_out, rows))
            per_key.append((rows, out))
        result = {}
        for t in TASKS:
            if len(per_key) == 1:
                emb = per_key[0][1][t]
                result[t] = TaskEmbedding(t, emb.deep, emb.shallow, emb.gate)
                continue
            idxs = [rows for rows, _ in per_key]
            deep = nk.assemble_rows([o[t].deep for _, o in per_key], idxs, n)
            shallow = nk.assemble_rows([o[t].shallow for _, o in per_key], idxs, n)
            gate = np.zeros((n, 3))
            for rows, o in per_key:
                gate[rows] = o[t].gate
            result[t] = TaskEmbedding(t, deep, shallow, gate)
        return result


@dataclass
class ScoreBreakdown:
    dot_deep: Var
    dot_shallow: Var
    logit: Var


def score(q: TaskEmbedding, i: TaskEmbedding) -> ScoreBreakdown:
    if q.deep.data.shape[1] != i.deep.data.shape[1] or q.shallow.data.shape[1] != i.shallow.data.shape[1]:
        raise ConfigurationError(
            f"embedding dims differ: deep {q.deep.data.shape[1]} vs {i.deep.data.shape[1]}, "
            f"shallow {q.shallow.data.shape[1]} vs {i.shallow.data.shape[1]}"
        )
    dd = nk.rowdot(q.deep, i.deep)
    ds = nk.rowdot(q.shallow, i.shallow)
    return ScoreBreakdown(dd, ds, nk.add(dd, ds))


class MtmdModel:
    def __init__(self, schema: FeatureSchema, cfg: ModelConfig | None = None, seed: int = 0):
        self.schema = schema
        self.cfg = cfg or ModelConfig()
        self.store = ParamStore()
        self.query = Tower(self.store, "query", Surface, schema, self.cfg)
        self.item = Tower(self.store, "item", AdProduct, schema, self.cfg)
        self.store.initialize(Rng(seed))

    def tower(self, side: str) -> Tower:
        return self.query if side == "query" else self.item

    def query_forward(self, data: EncodedData, mode: str = "infer") -> dict:
        return self.query(data, mode)

    def item_forward(self, data: EncodedData, mode: str = "infer") -> dict:
        return self.item(data, mode)

    def scores(self, data: EncodedData, mode: str) -> dict:
        q = self.query(data, mode)
        i = self.item(data, mode)
        return {t: score(q[t], i[t]) for t in TASKS}

    def logits(self, data: EncodedData, mode: str) -> dict:
        return {t: s.logit for t, s in self.scores(data, mode).items()}

    def non_embedding_params(self) -> int:
        return self.store.count(exclude=(".emb.",))


# ---------------------------------------------------------------------------
# probabilities


def _sigmoid(x):
    return nk._sigmoid_np(np.asarray(x, dtype=float))


def predict_probs(logits: dict, constrained: bool, product: AdProduct | np.ndarray) -> dict:
    """Map per-task logits (scalars or arrays) to probabilities.

    Constrained mode factorizes GCTR/OCTR through CTR. Masked tasks come back
    as NaN in array form and are omitted in scalar form.
    """
    scalar = np.ndim(logits[TaskId.CTR]) == 0
    s = {t: np.asarray(v, dtype=float) for t, v in logits.items()}
    p_ctr = _sigmoid(s[TaskId.CTR])
    out = {TaskId.CTR: p_ctr}
    for t in TASKS:
        if t == TaskId.CTR or t not in s:
            continue
        p = _sigmoid(s[t])
        out[t] = p * p_ctr if constrained else p
    products = np.asarray(product)
    for t in list(out):
        out[t] = np.clip(out[t], P_LO, P_HI)
        applies = np.array([task_applies(t, pr) for pr in AdProduct])
        mask = applies[products.astype(np.int64)]
        if scalar:
            if not mask:
                del out[t]
            else:
                out[t] = float(out[t])
        else:
            out[t] = np.where(mask, out[t], np.nan)
    return out


def log_probs(logits: dict, constrained: bool) -> dict:
    """Differentiable (ln q, ln(1-q)) per task, consistent with
    :func:`predict_probs` but without the clamp, so gradients never vanish."""
    out = {}
    ctr = logits[TaskId.CTR]
    log_ctr = nk.log_sigmoid(ctr)
    out[TaskId.CTR] = (log_ctr, nk.log_sigmoid(nk.scale(ctr, -1.0)))
    for t in TASKS:
        if t == TaskId.CTR:
            continue
        s = logits[t]
        if constrained:
            lq = nk.add(nk.log_sigmoid(s), log_ctr)
            out[t] = (lq, nk.log1mexp(lq))
        else:
            out[t] = (nk.log_sigmoid(s), nk.log_sigmoid(nk.scale(s, -1.0)))
    return out


# ---------------------------------------------------------------------------
# serving


@dataclass
class ItemStore:
    """Item embeddings per task, as exported by the item tower."""

    tower_tag: int
    tasks: tuple  # task names
    deep_dims: tuple
    shallow_dims: tuple
    ids: np.ndarray  # uint64
    deep: dict  # task name -> (rows, d) float32
    shallow: dict
    products: np.ndarray | None = None  # AdProduct per row, if known

    def __len__(self) -> int:
        return len(self.ids)


def rank_top_k(query_emb: dict, store: ItemStore, k: int, task: TaskId, constrained: bool) -> list[tuple[int, float]]:
    """Rank stored items for one query by the probability of ``task``.

    ``query_emb`` maps task name -> (deep, shallow) 1-D arrays. Items whose
    product masks the task are skipped. Ties go to the smaller item id.
    """
    task = TaskId(task)
    name = task.name

    def logit(t: str) -> np.ndarray:
        qd, qs = query_emb[t]
        d = store.deep[t].astype(np.float64) @ np.asarray(qd, dtype=np.float64)
        s = store.shallow[t].astype(np.float64) @ np.asarray(qs, dtype=np.float64)
        return d + s

    logits = {task: logit(name)}
    if constrained and task != TaskId.CTR:
        logits[TaskId.CTR] = logit(TaskId.CTR.name)
    elif TaskId.CTR not in logits:
        logits[TaskId.CTR] = logit(TaskId.CTR.name)
    products = store.products if store.products is not None else np.zeros(len(store), dtype=np.int64)
    probs = predict_probs(logits, constrained, products)[task]
    keep = ~np.isnan(probs)
    ids = store.ids[keep]
    p = probs[keep]
    order = np.lexsort((ids, -p))
    order = order[: max(0, int(k))]
    return [(int(ids[j]), float(p[j])) for j in order]


def embeddings_for_rows(model, data: EncodedData, side: str, chunk: int = 1024) -> dict:
    """Inference-mode embeddings for every row: task name -> (deep, shallow)."""
    out = {t.name: ([], []) for t in TASKS}
    for start in range(0, len(data), chunk):
        part = data.subset(np.arange(start, min(start + chunk, len(data))))
        emb = model.tower(side)(part, "infer")
        for t in TASKS:
            out[t.name][0].append(emb[t].deep.data)
            out[t.name][1].append(emb[t].shallow.data)
    return {
        t: (np.concatenate(d) if d else np.zeros((0, 0)), np.concatenate(s) if s else np.zeros((0, 0)))
        for t, (d, s) in out.items()
    }


def sigmoid_prob(s: float) -> float:
    return min(max(sigmoid_scalar(s), P_LO), P_HI)
