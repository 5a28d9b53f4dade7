"""Synthetic stand-in for the heavyweight ranker.

The CTR logit of a (request, ad) pair in domain d is

    bias_d + base_d(x) + alpha * shared(x)

where ``base_d`` is a per-domain two-layer net and ``shared`` is one net over
the cross-domain shared fields only. Both nets have a tanh hidden layer per
side and a bilinear read-out, so the logit has genuine query x item structure.
GCTR and OCTR are generated conditionally: p_t = p_CTR * sigmoid(g_t(x)).

Continuous features are drawn as ``mu[d, f] + sigma[d, f] * z`` and the
teacher reads the standardized ``z``, which is what makes per-domain
normalization the right preprocessing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import Rng
from .schema import (
    ALL_DOMAINS,
    TASKS,
    AdProduct,
    CategoricalField,
    DomainKey,
    Example,
    FeatureSchema,
    TaskId,
    task_applies,
)

P_MIN, P_MAX = 1e-4, 1.0 - 1e-4
CAT_DIM = 4
SHARED_HIDDEN = 32
BASE_HIDDEN = 24


def _squash(logit: np.ndarray) -> np.ndarray:
    p = np.where(logit >= 0, 1.0 / (1.0 + np.exp(-np.abs(logit))), np.exp(-np.abs(logit)) / (1.0 + np.exp(-np.abs(logit))))
    return np.clip(p, P_MIN, P_MAX)


@dataclass
class _TwoSideNet:
    A_q: np.ndarray
    A_i: np.ndarray
    B: np.ndarray
    w_q: np.ndarray
    w_i: np.ndarray
    scale: float = 1.0

    def __call__(self, u_q: np.ndarray, u_i: np.ndarray) -> np.ndarray:
        h_q = np.tanh(u_q @ self.A_q.T)
        h_i = np.tanh(u_i @ self.A_i.T)
        raw = ((h_q @ self.B) * h_i).sum(axis=1) + h_q @ self.w_q + h_i @ self.w_i
        return raw * self.scale


def _make_net(rng: Rng, d_q: int, d_i: int, hidden: int) -> _TwoSideNet:
    A_q = rng.normal(hidden * d_q).reshape(hidden, d_q) * (1.5 / np.sqrt(max(d_q, 1)))
    A_i = rng.normal(hidden * d_i).reshape(hidden, d_i) * (1.5 / np.sqrt(max(d_i, 1)))
    B = rng.normal(hidden * hidden).reshape(hidden, hidden) / np.sqrt(hidden)
    w_q = rng.normal(hidden) / np.sqrt(hidden)
    w_i = rng.normal(hidden) / np.sqrt(hidden)
    return _TwoSideNet(A_q, A_i, B, w_q, w_i)


class TeacherOracle:
    def __init__(
        self,
        schema: FeatureSchema,
        seed: int = 0,
        alpha: float = 0.6,
        base_std: float = 0.8,
        shared_std: float = 2.0,
        cond_std: float = 0.6,
    ):
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        self.schema = schema
        self.seed = seed
        self.alpha = alpha
        rng = Rng(seed)
        self.layouts = {side: schema.layout(side) for side in ("query", "item")}
        nd = len(ALL_DOMAINS)

        # per-(domain, field) location/scale of continuous features
        self.mu, self.sigma = {}, {}
        for side in ("query", "item"):
            c = len(self.layouts[side].continuous)
            self.mu[side] = rng.normal(nd * c).reshape(nd, c) * 1.5
            self.sigma[side] = np.exp(rng.normal(nd * c).reshape(nd, c) * 0.5)

        self.cat_emb = {}
        for side in ("query", "item"):
            for f in self.layouts[side].categorical:
                self.cat_emb[f.name] = rng.normal(f.cardinality * CAT_DIM).reshape(f.cardinality, CAT_DIM)

        self._in_cols = {side: self._teacher_cols(side, shared_only=False) for side in ("query", "item")}
        self._shared_cols = {side: self._teacher_cols(side, shared_only=True) for side in ("query", "item")}
        dq, di = len(self._in_cols["query"]), len(self._in_cols["item"])
        sq, si = len(self._shared_cols["query"]), len(self._shared_cols["item"])

        self.shared = _make_net(rng, sq, si, SHARED_HIDDEN)
        self.base = {d: _make_net(rng, dq, di, BASE_HIDDEN) for d in ALL_DOMAINS}
        self.bias = {d: -3.0 + 0.4 * float(rng.normal(1)[0]) for d in ALL_DOMAINS}
        self.cond = {}
        for task, offset in ((TaskId.GCTR, -0.8), (TaskId.OCTR, -1.2)):
            a_q = rng.normal(dq) / np.sqrt(dq)
            a_i = rng.normal(di) / np.sqrt(di)
            self.cond[task] = (offset, a_q, a_i)

        # calibrate component scales on a private sample so the logit mix is
        # controlled by base_std / shared_std regardless of schema width
        calib = Rng(seed ^ 0x5EED5EED)
        n = 4096
        u = {}
        for side in ("query", "item"):
            u[side] = calib.normal(n * dq if side == "query" else n * di).reshape(n, -1)
        uq_s = u["query"][:, self._shared_pos("query")]
        ui_s = u["item"][:, self._shared_pos("item")]
        self.shared.scale = shared_std / max(np.std(self.shared(uq_s, ui_s)), 1e-12)
        for d in ALL_DOMAINS:
            net = self.base[d]
            net.scale = base_std / max(np.std(net(u["query"], u["item"])), 1e-12)
        for task in (TaskId.GCTR, TaskId.OCTR):
            offset, a_q, a_i = self.cond[task]
            s = np.std(u["query"] @ a_q + u["item"] @ a_i)
            self.cond[task] = (offset, a_q * cond_std / s, a_i * cond_std / s)

    # teacher input per side: one column per continuous field, CAT_DIM per categorical
    def _teacher_cols(self, side: str, shared_only: bool) -> list[tuple[str, int]]:
        cols = []
        for f in self.layouts[side].fields:
            if shared_only and not f.shared:
                continue
            width = CAT_DIM if isinstance(f, CategoricalField) else 1
            cols.extend((f.name, k) for k in range(width))
        return cols

    def _shared_pos(self, side: str) -> list[int]:
        names = {f.name for f in self.layouts[side].fields if f.shared}
        return [j for j, (name, _) in enumerate(self._in_cols[side]) if name in names]

    def standardize(self, side: str, domain_idx: np.ndarray, cont: np.ndarray) -> np.ndarray:
        return (cont - self.mu[side][domain_idx]) / self.sigma[side][domain_idx]

    def _inputs(self, side: str, domain_idx: np.ndarray, cont: np.ndarray, cat: np.ndarray) -> np.ndarray:
        layout = self.layouts[side]
        z = self.standardize(side, domain_idx, cont)
        parts = []
        ci = ki = 0
        for f in layout.fields:
            avail = np.array([d in f.available for d in ALL_DOMAINS])[domain_idx]
            if isinstance(f, CategoricalField):
                v = self.cat_emb[f.name][cat[:, ki]] * avail[:, None]
                ki += 1
            else:
                v = (z[:, ci] * avail)[:, None]
                ci += 1
            parts.append(v)
        return np.concatenate(parts, axis=1)

    def score_arrays(self, domain_idx, q_cont, q_cat, i_cont, i_cat) -> np.ndarray:
        """Teacher probabilities, shape (n, 3); NaN where a task is masked."""
        domain_idx = np.asarray(domain_idx, dtype=np.int64)
        u_q = self._inputs("query", domain_idx, q_cont, q_cat)
        u_i = self._inputs("item", domain_idx, i_cont, i_cat)
        logit = self.alpha * self.shared(u_q[:, self._shared_pos("query")], u_i[:, self._shared_pos("item")])
        for d_idx, d in enumerate(ALL_DOMAINS):
            rows = np.nonzero(domain_idx == d_idx)[0]
            if rows.size:
                logit[rows] += self.bias[d] + self.base[d](u_q[rows], u_i[rows])
        out = np.full((len(domain_idx), len(TASKS)), np.nan)
        p_ctr = _squash(logit)
        out[:, TaskId.CTR] = p_ctr
        applies = {t: np.array([task_applies(t, d.product) for d in ALL_DOMAINS])[domain_idx] for t in TASKS}
        for task in (TaskId.GCTR, TaskId.OCTR):
            offset, a_q, a_i = self.cond[task]
            g = offset + u_q @ a_q + u_i @ a_i
            p = np.clip(p_ctr * _squash(g), P_MIN, p_ctr)
            mask = applies[task]
            out[mask, task] = p[mask]
        return out

    def teacher_score(self, ex: Example) -> dict:
        from .dataset import encode_examples

        enc = encode_examples([ex], self.schema)
        row = self.score_arrays(enc.domain, enc.q_cont, enc.q_cat, enc.i_cont, enc.i_cat)[0]
        return {t: float(row[t]) for t in TASKS if not np.isnan(row[t])}


def teacher_score(oracle: TeacherOracle, ex: Example) -> dict:
    return oracle.teacher_score(ex)
