"""Binary item-embedding export and model checkpoints.

Embedding file (little-endian)::

    "MTMD" u32 version=1 u8 tower_tag u16 n_tasks
    per task: u16 name_len, name (UTF-8), u32 deep_dim, u32 shallow_dim
    u64 n_rows
    per row: u64 item_id, then per task deep f32 values, shallow f32 values

Checkpoints use their own magic ("MTMK") and carry the training config, the
feature schema, a free-form metadata string, and every parameter as f64.
"""
from __future__ import annotations

import configparser
import os
import struct

import numpy as np

from .config import TrainConfig, parse_config_text, render_config
from .errors import ConfigurationError, DataError, FormatError
from .schema import AdProduct, FeatureSchema, TaskId, schema_from_config
from .towers import ItemStore, embeddings_for_rows

EMB_MAGIC = b"MTMD"
EMB_VERSION = 1
CKPT_MAGIC = b"MTMK"
CKPT_VERSION = 1
TOWER_TAGS = {"query": 0, "item": 1}
PRODUCTS_SUFFIX = ".products"


class _Reader:
    """Cursor over a byte buffer that reports truncation with an offset."""

    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file at byte offset {self.pos}: need {n} bytes for {what}, {len(self.buf) - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def text(self, len_fmt: str, what: str) -> str:
        (n,) = self.unpack(len_fmt, what + " length")
        at = self.pos
        raw = self.take(n, what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"invalid UTF-8 in {what} at byte offset {at}") from None


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as e:
        raise DataError(f"cannot read {os.fspath(path)!r}: {e}") from e


def _write_bytes(path, payload: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(payload)
    except OSError as e:
        raise DataError(f"cannot write {os.fspath(path)!r}: {e}") from e


# ---------------------------------------------------------------------------
# embeddings


def encode_store(store: ItemStore) -> bytes:
    tasks = list(store.tasks)
    out = [EMB_MAGIC, struct.pack("<IBH", EMB_VERSION, store.tower_tag, len(tasks))]
    for name, dd, sd in zip(tasks, store.deep_dims, store.shallow_dims):
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", dd, sd))
    n = len(store.ids)
    out.append(struct.pack("<Q", n))
    if n:
        # one structured row: id then each task's deep and shallow block
        cols = [("id", "<u8")]
        for k, (dd, sd) in enumerate(zip(store.deep_dims, store.shallow_dims)):
            cols += [(f"d{k}", "<f4", (dd,)), (f"s{k}", "<f4", (sd,))]
        rows = np.zeros(n, dtype=np.dtype(cols))
        rows["id"] = store.ids
        for k, name in enumerate(tasks):
            rows[f"d{k}"] = np.asarray(store.deep[name], dtype="<f4").reshape(n, -1)
            rows[f"s{k}"] = np.asarray(store.shallow[name], dtype="<f4").reshape(n, -1)
        out.append(rows.tobytes())
    return b"".join(out)


def decode_store(buf: bytes) -> ItemStore:
    r = _Reader(buf)
    if r.take(4, "magic") != EMB_MAGIC:
        raise FormatError("bad magic at byte offset 0: not an embedding file")
    (version,) = r.unpack("I", "version")
    if version != EMB_VERSION:
        raise FormatError(f"unsupported embedding format version {version} at byte offset 4")
    tag, n_tasks = r.unpack("BH", "tower tag and task count")
    tasks, deep_dims, shallow_dims = [], [], []
    for _ in range(n_tasks):
        tasks.append(r.text("H", "task name"))
        dd, sd = r.unpack("II", "task dims")
        deep_dims.append(dd)
        shallow_dims.append(sd)
    (n,) = r.unpack("Q", "row count")
    row_bytes = 8 + 4 * sum(deep_dims) + 4 * sum(shallow_dims)
    need = n * row_bytes
    if r.pos + need > len(buf):
        raise FormatError(
            f"truncated file at byte offset {len(buf)}: {n} rows need {need} bytes after offset {r.pos}"
        )
    cols = [("id", "<u8")]
    for k, (dd, sd) in enumerate(zip(deep_dims, shallow_dims)):
        cols += [(f"d{k}", "<f4", (dd,)), (f"s{k}", "<f4", (sd,))]
    rows = np.frombuffer(buf, dtype=np.dtype(cols), count=n, offset=r.pos) if n else np.zeros(0, dtype=np.dtype(cols))
    r.pos += need
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes after row data at byte offset {r.pos}")
    deep = {name: np.array(rows[f"d{k}"], dtype=np.float32).reshape(n, deep_dims[k]) for k, name in enumerate(tasks)}
    shallow = {name: np.array(rows[f"s{k}"], dtype=np.float32).reshape(n, shallow_dims[k]) for k, name in enumerate(tasks)}
    return ItemStore(tag, tuple(tasks), tuple(deep_dims), tuple(shallow_dims), np.array(rows["id"], dtype=np.uint64), deep, shallow)


def build_item_store(model, data, side: str = "item") -> ItemStore:
    """Inference-mode embeddings for every row of ``data``, keyed by example id."""
    emb = embeddings_for_rows(model, data, side)
    names = [t.name for t in TaskId]
    n = len(data)
    cfg = model.cfg
    deep_dims = tuple(cfg.task_dim(TaskId[t]) for t in names)
    shallow_dims = tuple(cfg.shallow_dim for _ in names)
    deep = {t: emb[t][0].astype(np.float32).reshape(n, d) for t, d in zip(names, deep_dims)}
    shallow = {t: emb[t][1].astype(np.float32).reshape(n, d) for t, d in zip(names, shallow_dims)}
    products = data.product.astype(np.int64) if side == "item" else None
    return ItemStore(TOWER_TAGS[side], tuple(names), deep_dims, shallow_dims, data.ids.astype(np.uint64), deep, shallow, products)


def write_store(path, store: ItemStore) -> None:
    _write_bytes(path, encode_store(store))
    if store.products is not None:
        text = "".join(AdProduct(int(p)).name + "\n" for p in store.products)
        try:
            with open(os.fspath(path) + PRODUCTS_SUFFIX, "w", encoding="utf-8") as fh:
                fh.write(text)
        except OSError as e:
            raise DataError(f"cannot write product sidecar: {e}") from e


def read_store(path) -> ItemStore:
    store = decode_store(_read_bytes(path))
    side = os.fspath(path) + PRODUCTS_SUFFIX
    if os.path.exists(side):
        with open(side, "r", encoding="utf-8") as fh:
            names = fh.read().split()
        if len(names) != len(store):
            raise FormatError(f"product sidecar has {len(names)} rows, embedding file has {len(store)}")
        try:
            store.products = np.array([int(AdProduct[n]) for n in names], dtype=np.int64)
        except KeyError as e:
            raise FormatError(f"unknown product {e.args[0]!r} in sidecar") from None
    return store


def export_embeddings(model, items, path) -> ItemStore:
    store = build_item_store(model, items)
    write_store(path, store)
    return store


def import_embeddings(path) -> ItemStore:
    return read_store(path)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(store, cfg: TrainConfig, schema: FeatureSchema, meta: str = "") -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for text in (render_config(cfg), schema.canonical_text(), meta):
        raw = text.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    slots = list(store)
    out.append(struct.pack("<I", len(slots)))
    for slot in slots:
        raw = slot.id.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<II", *slot.shape))
        out.append(np.ascontiguousarray(slot.value, dtype="<f8").tobytes())
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> tuple[TrainConfig, FeatureSchema, str, dict]:
    r = _Reader(buf)
    if r.take(4, "magic") != CKPT_MAGIC:
        raise FormatError("bad magic at byte offset 0: not a checkpoint")
    (version,) = r.unpack("I", "version")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version} at byte offset 4")
    cfg_text = r.text("I", "config")
    schema_text = r.text("I", "schema")
    meta = r.text("I", "metadata")
    (count,) = r.unpack("I", "parameter count")
    values = {}
    for _ in range(count):
        pid = r.text("H", "parameter id")
        rows, cols = r.unpack("II", f"shape of {pid}")
        values[pid] = np.frombuffer(r.take(8 * rows * cols, f"values of {pid}"), dtype="<f8").reshape(rows, cols).copy()
    if r.pos != len(buf):
        raise FormatError(f"trailing bytes after parameters at byte offset {r.pos}")
    cfg, _ = parse_config_text(cfg_text)
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    cp.read_string(schema_text)
    schema = schema_from_config({s: dict(cp.items(s)) for s in cp.sections()})
    return cfg, schema, meta, values


def write_checkpoint(path, model, cfg: TrainConfig, meta: str = "kind=mtmd") -> None:
    _write_bytes(path, encode_checkpoint(model.store, cfg, model.schema, meta))


def read_checkpoint(path) -> tuple[TrainConfig, FeatureSchema, str, dict]:
    return decode_checkpoint(_read_bytes(path))


def load_model(path):
    """Rebuild a unified or baseline model from a checkpoint."""
    from .schema import DomainKey
    from .towers import MtmdModel
    from .trainer import BaselineModel

    cfg, schema, meta, values = read_checkpoint(path)
    info = dict(tok.split("=", 1) for tok in meta.split() if "=" in tok)
    kind = info.get("kind", "mtmd")
    if kind == "mtmd":
        model = MtmdModel(schema, cfg.model, seed=cfg.seed)
    elif kind == "baseline":
        model = BaselineModel(schema, DomainKey.parse(info["domain"]), cfg.model, seed=cfg.seed)
    else:
        raise FormatError(f"unknown checkpoint kind {kind!r}")
    missing = set(s.id for s in model.store) - set(values)
    if missing:
        raise ConfigurationError(f"checkpoint lacks {len(missing)} parameters, e.g. {sorted(missing)[0]!r}")
    model.store.load(values)
    return model, cfg
