"""Dataset generation, the line-oriented dataset file format, and the
columnar encoding used for training."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError, FormatError
from .numkernel import Rng
from .schema import (
    ALL_DOMAINS,
    TASKS,
    AdProduct,
    CategoricalField,
    DomainKey,
    Example,
    FeatureSchema,
    Surface,
    TaskId,
    make_default_schema,
)
from .teacher import TeacherOracle

MAGIC = "MTMDDS"
VERSION = 1
ZIPF_EXPONENT = 1.1


@dataclass
class EncodedData:
    """Column-major view of a list of examples."""

    ids: np.ndarray  # uint64
    domain: np.ndarray  # DomainKey.index
    q_cont: np.ndarray
    q_cat: np.ndarray
    i_cont: np.ndarray
    i_cat: np.ndarray
    teacher: np.ndarray  # (n, 3), NaN where absent

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, rows: np.ndarray) -> "EncodedData":
        rows = np.asarray(rows, dtype=np.int64)
        return EncodedData(*(getattr(self, k)[rows] for k in ("ids", "domain", "q_cont", "q_cat", "i_cont", "i_cat", "teacher")))

    def cont(self, side: str) -> np.ndarray:
        return self.q_cont if side == "query" else self.i_cont

    def cat(self, side: str) -> np.ndarray:
        return self.q_cat if side == "query" else self.i_cat

    @property
    def surface(self) -> np.ndarray:
        return self.domain // len(AdProduct)

    @property
    def product(self) -> np.ndarray:
        return self.domain % len(AdProduct)


def _split_side(schema: FeatureSchema, side: str, values: tuple):
    cont, cat = [], []
    for f, v in zip(schema.side_fields(side), values):
        if isinstance(f, CategoricalField):
            cat.append(int(v))
        else:
            cont.append(float(v))
    return cont, cat


def encode_examples(examples: list[Example], schema: FeatureSchema) -> EncodedData:
    n = len(examples)
    lq, li = schema.layout("query"), schema.layout("item")
    q_cont = np.zeros((n, len(lq.continuous)))
    q_cat = np.zeros((n, len(lq.categorical)), dtype=np.int64)
    i_cont = np.zeros((n, len(li.continuous)))
    i_cat = np.zeros((n, len(li.categorical)), dtype=np.int64)
    teacher = np.full((n, len(TASKS)), np.nan)
    ids = np.zeros(n, dtype=np.uint64)
    domain = np.zeros(n, dtype=np.int64)
    for r, ex in enumerate(examples):
        ids[r] = ex.id
        domain[r] = ex.domain.index
        c, k = _split_side(schema, "query", ex.query)
        q_cont[r], q_cat[r] = c, k
        c, k = _split_side(schema, "item", ex.item)
        i_cont[r], i_cat[r] = c, k
        for t, p in ex.teacher.items():
            teacher[r, TaskId(t)] = p
    return EncodedData(ids, domain, q_cont, q_cat, i_cont, i_cat, teacher)


def _join_side(schema: FeatureSchema, side: str, cont: np.ndarray, cat: np.ndarray) -> tuple:
    out, ci, ki = [], 0, 0
    for f in schema.side_fields(side):
        if isinstance(f, CategoricalField):
            out.append(int(cat[ki]))
            ki += 1
        else:
            out.append(float(cont[ci]))
            ci += 1
    return tuple(out)


def decode_examples(data: EncodedData, schema: FeatureSchema) -> list[Example]:
    out = []
    for r in range(len(data)):
        teacher = {TaskId(t): float(data.teacher[r, t]) for t in TASKS if not math.isnan(data.teacher[r, t])}
        out.append(
            Example(
                int(data.ids[r]),
                DomainKey.from_index(int(data.domain[r])),
                _join_side(schema, "query", data.q_cont[r], data.q_cat[r]),
                _join_side(schema, "item", data.i_cont[r], data.i_cat[r]),
                teacher,
            )
        )
    return out


# ---------------------------------------------------------------------------
# generation


def availability(f) -> np.ndarray:
    """Boolean availability of a field indexed by DomainKey.index."""
    return np.array([d in f.available for d in ALL_DOMAINS], dtype=bool)


def _zipf_cdf(cardinality: int, exponent: float = ZIPF_EXPONENT) -> np.ndarray:
    w = 1.0 / np.arange(1, cardinality + 1, dtype=np.float64) ** exponent
    return np.cumsum(w) / w.sum()


def sample_features(schema: FeatureSchema, oracle: TeacherOracle, domain: np.ndarray, rng: Rng):
    """Raw feature arrays for the given domain indices. Unavailable fields
    hold the schema default."""
    n = len(domain)
    out = {}
    for side in ("query", "item"):
        layout = schema.layout(side)
        cont = np.zeros((n, len(layout.continuous)))
        cat = np.zeros((n, len(layout.categorical)), dtype=np.int64)
        for j, f in enumerate(layout.continuous):
            z = rng.normal(n)
            raw = oracle.mu[side][domain, j] + oracle.sigma[side][domain, j] * z
            avail = availability(f)[domain]
            cont[:, j] = np.where(avail, raw, f.default)
        for j, f in enumerate(layout.categorical):
            u = rng.uniform(n)
            if f.name == "surface_id":
                vals = domain // len(AdProduct)
            elif f.name == "ad_product_type":
                vals = domain % len(AdProduct)
            else:
                vals = np.minimum(np.searchsorted(_zipf_cdf(f.cardinality), u, side="right"), f.cardinality - 1)
            avail = availability(f)[domain]
            cat[:, j] = np.where(avail, vals, f.default)
        out[side] = (cont, cat)
    return out


def generate_encoded(
    seed: int,
    n: int,
    domain_mix: dict | None = None,
    schema: FeatureSchema | None = None,
    oracle: TeacherOracle | None = None,
    teacher_seed: int = 0,
    alpha: float = 0.6,
    first_id: int = 0,
) -> EncodedData:
    schema = schema or make_default_schema()
    oracle = oracle or TeacherOracle(schema, seed=teacher_seed, alpha=alpha)
    mix = _normalize_mix(domain_mix)
    rng = Rng(seed)
    cdf = np.cumsum([mix[d] for d in ALL_DOMAINS])
    u = rng.uniform(n)
    domain = np.minimum(np.searchsorted(cdf, u, side="right"), len(ALL_DOMAINS) - 1).astype(np.int64)
    # zero-weight domains can still be hit by the clamp above when cdf tops out below 1
    zero = [i for i, d in enumerate(ALL_DOMAINS) if mix[d] == 0.0]
    if zero and np.isin(domain, zero).any():
        last = max(i for i, d in enumerate(ALL_DOMAINS) if mix[d] > 0.0)
        domain[np.isin(domain, zero)] = last
    feats = sample_features(schema, oracle, domain, rng)
    q_cont, q_cat = feats["query"]
    i_cont, i_cat = feats["item"]
    teacher = oracle.score_arrays(domain, q_cont, q_cat, i_cont, i_cat)
    ids = np.arange(first_id, first_id + n, dtype=np.uint64)
    return EncodedData(ids, domain, q_cont, q_cat, i_cont, i_cat, teacher)


def _normalize_mix(domain_mix: dict | None) -> dict:
    if domain_mix is None:
        return {d: 1.0 / len(ALL_DOMAINS) for d in ALL_DOMAINS}
    mix = {d: float(domain_mix.get(d, 0.0)) for d in ALL_DOMAINS}
    if any(v < 0 for v in mix.values()):
        raise ConfigurationError("domain mix fractions must be non-negative")
    if abs(sum(mix.values()) - 1.0) > 1e-9:
        raise ConfigurationError(f"domain mix fractions sum to {sum(mix.values())!r}, not 1")
    return mix


def generate_dataset(seed: int, n: int, domain_mix: dict | None, path, **kwargs) -> EncodedData:
    schema = kwargs.get("schema") or make_default_schema()
    kwargs["schema"] = schema
    data = generate_encoded(seed, n, domain_mix, **kwargs)
    write_encoded(path, data, schema)
    return data


# ---------------------------------------------------------------------------
# text format


def _fmt(x: float) -> str:
    return format(x, ".17g")


def write_encoded(path, data: EncodedData, schema: FeatureSchema) -> None:
    lq, li = schema.layout("query"), schema.layout("item")
    header = f"{MAGIC} {VERSION} {schema.hash}\n"
    lines = [header]
    q_kind = [isinstance(f, CategoricalField) for f in lq.fields]
    i_kind = [isinstance(f, CategoricalField) for f in li.fields]

    def side_tokens(kinds, cont, cat):
        ci = ki = 0
        toks = []
        for is_cat in kinds:
            if is_cat:
                toks.append(str(int(cat[ki])))
                ki += 1
            else:
                toks.append(_fmt(float(cont[ci])))
                ci += 1
        return toks

    for r in range(len(data)):
        d = DomainKey.from_index(int(data.domain[r]))
        toks = [str(int(data.ids[r])), d.surface.name, d.product.name]
        toks += side_tokens(q_kind, data.q_cont[r], data.q_cat[r])
        toks += side_tokens(i_kind, data.i_cont[r], data.i_cat[r])
        toks += [f"{t.name}:{_fmt(float(data.teacher[r, t]))}" for t in TASKS if not math.isnan(data.teacher[r, t])]
        lines.append("\t".join(toks) + "\n")
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.writelines(lines)
    except OSError as e:
        raise DataError(f"cannot write dataset {os.fspath(path)!r}: {e}") from e


def write_dataset(path, examples: list[Example], schema: FeatureSchema | None = None) -> None:
    schema = schema or make_default_schema()
    write_encoded(path, encode_examples(examples, schema), schema)


def read_encoded(path, schema: FeatureSchema | None = None) -> EncodedData:
    schema = schema or make_default_schema()
    lq, li = schema.layout("query"), schema.layout("item")
    nq, ni = len(lq.fields), len(li.fields)
    n_fixed = 3 + nq + ni
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise DataError(f"cannot read dataset {os.fspath(path)!r}: {e}") from e
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise FormatError("line 1: missing header")
    head = lines[0].split(" ")
    if len(head) != 3 or head[0] != MAGIC:
        raise FormatError(f"line 1: bad header {lines[0]!r}")
    if head[1] != str(VERSION):
        raise FormatError(f"line 1: unknown dataset version {head[1]!r}")
    if head[2] != schema.hash:
        raise ConfigurationError(f"line 1: schema hash {head[2]} does not match {schema.hash}")

    n = len(lines) - 1
    ids = np.zeros(n, dtype=np.uint64)
    domain = np.zeros(n, dtype=np.int64)
    q_cont = np.zeros((n, len(lq.continuous)))
    q_cat = np.zeros((n, len(lq.categorical)), dtype=np.int64)
    i_cont = np.zeros((n, len(li.continuous)))
    i_cat = np.zeros((n, len(li.categorical)), dtype=np.int64)
    teacher = np.full((n, len(TASKS)), np.nan)

    def parse_side(fields, toks, cont_row, cat_row, lineno):
        ci = ki = 0
        for f, tok in zip(fields, toks):
            if isinstance(f, CategoricalField):
                v = int(tok)
                if not 0 <= v < f.cardinality:
                    raise DataError(f"line {lineno}: {f.name}={v} outside [0, {f.cardinality})")
                cat_row[ki] = v
                ki += 1
            else:
                cont_row[ci] = float(tok)
                ci += 1

    for r, line in enumerate(lines[1:]):
        lineno = r + 2
        toks = line.split("\t")
        n_teacher = len(toks) - n_fixed
        if n_teacher < 1 or n_teacher > len(TASKS):
            raise FormatError(f"line {lineno}: expected {n_fixed} feature fields plus 1-{len(TASKS)} teacher scores, got {len(toks)} fields")
        try:
            ids[r] = int(toks[0])
            domain[r] = DomainKey(Surface[toks[1]], AdProduct[toks[2]]).index
            parse_side(lq.fields, toks[3 : 3 + nq], q_cont[r], q_cat[r], lineno)
            parse_side(li.fields, toks[3 + nq : n_fixed], i_cont[r], i_cat[r], lineno)
            for tok in toks[n_fixed:]:
                name, val = tok.split(":")
                teacher[r, TaskId[name]] = float(val)
        except (ValueError, KeyError) as e:
            raise FormatError(f"line {lineno}: malformed record ({e})") from None
    return EncodedData(ids, domain, q_cont, q_cat, i_cont, i_cat, teacher)


def read_dataset(path, schema: FeatureSchema | None = None) -> list[Example]:
    schema = schema or make_default_schema()
    return decode_examples(read_encoded(path, schema), schema)
