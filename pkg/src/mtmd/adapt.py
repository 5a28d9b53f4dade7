"""Domain adaptation front-end: embedding lookup, per-domain batch norm of
continuous fields, and squeeze-and-excitation field reweighting."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkernel as nk
from .config import ModelConfig
from .dataset import EncodedData
from .errors import DataError
from .numkernel import BatchNormState, ParamStore, Var
from .schema import ALL_DOMAINS, FeatureSchema, SideLayout


@dataclass
class AdaptOutput:
    x: Var  # full adapted vector, schema declaration order
    shared: Var  # shared-field columns
    high_level: Var  # high-level categorical columns, before SE
    gates: np.ndarray | None  # (n, F) SE gates in (0, 2)


def field_matrices(layout: SideLayout) -> tuple[np.ndarray, np.ndarray]:
    """(D, F) column-averaging matrix for the squeeze and (F, D) indicator
    that spreads one gate per field over that field's columns."""
    F, D = len(layout.fields), layout.width
    avg = np.zeros((D, F))
    spread = np.zeros((F, D))
    for j, (f, off) in enumerate(zip(layout.fields, layout.offsets)):
        avg[off : off + f.dim, j] = 1.0 / f.dim
        spread[j, off : off + f.dim] = 1.0
    return avg, spread


def se_excitation(s: Var, W1: Var, W2: Var) -> Var:
    """Gate per field: 2 * sigmoid(W2 relu(W1 s)), identity at zero weights."""
    return nk.scale(nk.sigmoid(nk.linear(nk.relu(nk.linear(s, W1)), W2)), 2.0)


def apply_gates(x: Var, gates: Var, spread: np.ndarray) -> Var:
    return nk.mul(x, nk.matmul_const(gates, spread))


def se_block(x: Var, layout: SideLayout, W1: Var, W2: Var) -> tuple[Var, Var]:
    avg, spread = field_matrices(layout)
    gates = se_excitation(nk.matmul_const(x, avg), W1, W2)
    return apply_gates(x, gates, spread), gates


def se_block_fields(fields: list[Var], W1: Var, W2: Var) -> list[Var]:
    """Field-list form of :func:`se_block`; each field is an (n, d_f) Var."""
    if len(fields) < 2:
        raise DataError("SE block needs at least two fields")
    dims = [f.data.shape[1] for f in fields]
    bounds = np.cumsum([0] + dims)
    x = nk.concat(fields)
    F, D = len(fields), int(bounds[-1])
    avg, spread = np.zeros((D, F)), np.zeros((F, D))
    for j in range(F):
        avg[bounds[j] : bounds[j + 1], j] = 1.0 / dims[j]
        spread[j, bounds[j] : bounds[j + 1]] = 1.0
    gates = se_excitation(nk.matmul_const(x, avg), W1, W2)
    y = apply_gates(x, gates, spread)
    return [nk.take_cols(y, np.arange(bounds[j], bounds[j + 1])) for j in range(F)]


class Adapter:
    """Adaptation parameters for one tower side.

    With ``cfg.domain_adapt`` off there is a single global batch-norm state
    and no SE block; the output layout is unchanged.
    """

    def __init__(self, store: ParamStore, prefix: str, schema: FeatureSchema, side: str, cfg: ModelConfig):
        self.side = side
        self.cfg = cfg
        self.layout = schema.layout(side)
        self.prefix = prefix
        self.tables = {
            f.name: store.declare(f"{prefix}.emb.{f.name}", (f.cardinality, f.emb_dim), f"normal:{cfg.emb_init_std}")
            for f in self.layout.categorical
        }
        c = len(self.layout.continuous)
        keys = [str(d).replace("/", "_") for d in ALL_DOMAINS] if cfg.domain_adapt else ["global"]
        self.bn = {
            k: BatchNormState(
                store.declare(f"{prefix}.bn.{k}.mean", (1, c), "zeros", trainable=False),
                store.declare(f"{prefix}.bn.{k}.var", (1, c), "ones", trainable=False),
            )
            for k in keys
        }
        F = len(self.layout.fields)
        reduced = max(1, F // cfg.se_ratio)
        if cfg.domain_adapt:
            self.W1 = store.declare(f"{prefix}.se.W1", (reduced, F), "xavier")
            self.W2 = store.declare(f"{prefix}.se.W2", (F, reduced), "xavier")
        # adapted-vector columns of [continuous block, categorical embeddings...]
        natural = []
        cont_pos = {f.name: j for j, f in enumerate(self.layout.continuous)}
        cat_start = {}
        col = len(self.layout.continuous)
        for f in self.layout.categorical:
            cat_start[f.name] = col
            col += f.dim
        for f in self.layout.fields:
            if f.name in cont_pos:
                natural.append(cont_pos[f.name])
            else:
                natural.extend(range(cat_start[f.name], cat_start[f.name] + f.dim))
        self.order = np.array(natural)
        self.identity_order = bool(np.array_equal(self.order, np.arange(len(natural))))
        self.avg, self.spread = field_matrices(self.layout)

    @property
    def width(self) -> int:
        return self.layout.width

    def _bn_key(self, domain_index: int) -> str:
        return str(ALL_DOMAINS[domain_index]).replace("/", "_") if self.cfg.domain_adapt else "global"

    def normalize_continuous(self, data: EncodedData, mode: str) -> Var:
        cont = data.cont(self.side)
        n = cont.shape[0]
        groups = {}
        for d_idx in np.unique(data.domain):
            key = self._bn_key(int(d_idx))
            groups.setdefault(key, []).append(np.nonzero(data.domain == d_idx)[0])
        parts, idxs = [], []
        for key in sorted(groups):
            rows = np.sort(np.concatenate(groups[key]))
            # a lone example cannot provide batch statistics
            group_mode = mode if (mode == "infer" or len(rows) >= 2) else "infer"
            parts.append(
                nk.batch_norm(nk.const(cont[rows]), self.bn[key], group_mode, self.cfg.bn_momentum, self.cfg.bn_eps)
            )
            idxs.append(rows)
        return nk.assemble_rows(parts, idxs, n)

    def embed_fields(self, data: EncodedData, mode: str) -> Var:
        """Field vectors concatenated in schema declaration order (pre-SE)."""
        pieces = [self.normalize_continuous(data, mode)]
        cat = data.cat(self.side)
        for j, f in enumerate(self.layout.categorical):
            pieces.append(nk.embedding(nk.param(self.tables[f.name]), cat[:, j]))
        x = nk.concat(pieces)
        return x if self.identity_order else nk.take_cols(x, self.order)

    def __call__(self, data: EncodedData, mode: str) -> AdaptOutput:
        x = self.embed_fields(data, mode)
        # the shallow expert sees the high-level fields before SE reweighting,
        # so its output depends on those fields alone
        high_level = nk.take_cols(x, np.array(self.layout.high_level_cols))
        gates = None
        if self.cfg.domain_adapt:
            g = se_excitation(nk.matmul_const(x, self.avg), nk.param(self.W1), nk.param(self.W2))
            x = apply_gates(x, g, self.spread)
            gates = g.data
        return AdaptOutput(
            x=x,
            shared=nk.take_cols(x, np.array(self.layout.shared_cols)),
            high_level=high_level,
            gates=gates,
        )


def adapt(adapter: Adapter, data: EncodedData, mode: str) -> AdaptOutput:
    return adapter(data, mode)
