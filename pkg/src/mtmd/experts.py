"""The Domain Expert block and its parts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .config import ModelConfig
from .numkernel import ParamStore, Var
from .schema import TASKS, TaskId


def embedding_init(dim: int) -> str:
    """Initializer for layers that emit a scoring embedding. Per-coordinate
    variance 1/sqrt(dim) keeps the initial query-item dot product near unit
    scale, so the first steps are not spent undoing saturated sigmoids."""
    return f"scaled:{dim ** -0.25!r}"


class FFN:
    """Stack of linear -> layer_norm -> leaky_relu layers. With
    ``linear_out`` the final layer is a bare linear projection."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, dims, slope: float = 0.2, linear_out: bool = False, ln_eps: float = 1e-5, out_init: str = "xavier"):
        self.slope, self.linear_out, self.ln_eps = slope, linear_out, ln_eps
        self.layers = []
        prev = d_in
        for k, width in enumerate(dims):
            last = k == len(dims) - 1
            bare = linear_out and last
            W = store.declare(f"{prefix}.layer{k}.W", (width, prev), out_init if bare else "he")
            b = store.declare(f"{prefix}.layer{k}.b", (1, width))
            ln = None
            if not bare:
                ln = (
                    store.declare(f"{prefix}.layer{k}.ln_gamma", (1, width), "ones"),
                    store.declare(f"{prefix}.layer{k}.ln_beta", (1, width)),
                )
            self.layers.append((W, b, ln))
            prev = width
        self.d_out = prev

    def __call__(self, x: Var) -> Var:
        for W, b, ln in self.layers:
            x = nk.linear(x, nk.param(W), nk.param(b))
            if ln is not None:
                x = nk.layer_norm(x, nk.param(ln[0]), nk.param(ln[1]), self.ln_eps)
                x = nk.leaky_relu(x, self.slope)
        return x


class Gate:
    """Per-task router: FFN {hidden..., n_experts} followed by softmax."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, hidden, n_experts: int, cfg: ModelConfig):
        self.ffn = FFN(store, prefix, d_in, tuple(hidden) + (n_experts,), cfg.slope, linear_out=True, ln_eps=cfg.ln_eps)

    def __call__(self, x: Var) -> Var:
        return nk.softmax(self.ffn(x))


def route_and_mix(weights: Var, outs: list[Var]) -> Var:
    """sum_e weights[:, e] * outs[e]."""
    terms = [nk.mul(nk.take_cols(weights, np.array([e])), o) for e, o in enumerate(outs)]
    return nk.add_n(terms)


# small-normal cross kernels, as in the DCN-v2 reference layer: each cross
# layer starts close to the residual identity
CROSS_INIT = "normal:0.05"


class CrossNet:
    """Low-rank cross layers x_{l+1} = x0 * (U (V^T x_l) + b) + x_l."""

    def __init__(self, store: ParamStore, prefix: str, dim: int, layers: int, rank: int):
        self.layers = [
            (
                store.declare(f"{prefix}.layer{l}.V", (rank, dim), CROSS_INIT),
                store.declare(f"{prefix}.layer{l}.U", (dim, rank), CROSS_INIT),
                store.declare(f"{prefix}.layer{l}.b", (1, dim)),
            )
            for l in range(layers)
        ]

    def __call__(self, x0: Var) -> Var:
        x = x0
        for V, U, b in self.layers:
            proj = nk.linear(nk.linear(x, nk.param(V)), nk.param(U), nk.param(b))
            x = nk.add(nk.mul(x0, proj), x)
        return x


def dcn_cross(x0: Var, net: CrossNet) -> Var:
    return net(x0)


@dataclass
class TaskEmbedding:
    task: TaskId
    deep: Var
    shallow: Var
    gate: np.ndarray | None = None


class DomainExpert:
    """One Domain Expert: per task a deep and a shallow expert, one
    task-shared expert, routing gates, pre/post norm, DCN, and heads. The
    domain-shared expert is owned by the tower and passed in per call."""

    def __init__(self, store: ParamStore, prefix: str, d_in: int, d_hl: int, cfg: ModelConfig, tasks=TASKS):
        self.prefix, self.cfg, self.tasks = prefix, cfg, tuple(tasks)
        e = cfg.expert_dim
        self.deep = {t: FFN(store, f"{prefix}.deep.{t.name}", d_in, cfg.deep_dims, cfg.slope, ln_eps=cfg.ln_eps) for t in self.tasks}
        self.task_shared = FFN(store, f"{prefix}.task_shared", d_in, cfg.deep_dims, cfg.slope, ln_eps=cfg.ln_eps)
        self.shallow = {
            t: FFN(store, f"{prefix}.shallow.{t.name}", d_hl, cfg.shallow_dims, cfg.slope, linear_out=True, ln_eps=cfg.ln_eps,
                out_init=embedding_init(cfg.shallow_dim))
            for t in self.tasks
        }
        self.gate = {t: Gate(store, f"{prefix}.gate.{t.name}", d_in, cfg.gate_dims, 3, cfg) for t in self.tasks}
        self.norm = {
            t: (store.declare(f"{prefix}.norm.{t.name}.gamma", (1, e), "ones"), store.declare(f"{prefix}.norm.{t.name}.beta", (1, e)))
            for t in self.tasks
        }
        self.dcn = (
            {t: CrossNet(store, f"{prefix}.dcn.{t.name}", e, cfg.dcn_layers, cfg.dcn_rank) for t in self.tasks}
            if cfg.use_dcn
            else None
        )
        self.head = {
            t: (store.declare(f"{prefix}.head.{t.name}.W", (cfg.task_dim(t), e), embedding_init(cfg.task_dim(t))), store.declare(f"{prefix}.head.{t.name}.b", (1, cfg.task_dim(t))))
            for t in self.tasks
        }

    def _norm(self, t: TaskId, x: Var) -> Var:
        g, b = self.norm[t]
        return nk.layer_norm(x, nk.param(g), nk.param(b), self.cfg.ln_eps)

    def compose(self, t: TaskId, mix: Var) -> Var:
        """Norm + crossing on the mixed expert output."""
        if self.dcn is None:
            return self._norm(t, mix)
        if self.cfg.norm == "pre":
            return self.dcn[t](self._norm(t, mix))
        return self._norm(t, self.dcn[t](mix))

    def __call__(self, x: Var, x_hl: Var, domain_shared_out: Var) -> dict:
        shared_out = self.task_shared(x)
        out = {}
        for t in self.tasks:
            w = self.gate[t](x)
            mix = route_and_mix(w, [self.deep[t](x), shared_out, domain_shared_out])
            z = self.compose(t, mix)
            W, b = self.head[t]
            deep = nk.linear(z, nk.param(W), nk.param(b))
            out[t] = TaskEmbedding(t, deep, self.shallow[t](x_hl), w.data)
        return out
