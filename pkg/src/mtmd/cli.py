"""Command-line entry point: ``mtmd <command> [options]``.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 configuration
error. Reports go to stdout as a table; the same results are written as
``key=value`` records to ``<out>/<command>.records``.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from .config import DataConfig, TrainConfig, load_config
from .errors import ConfigurationError, DataError, MtmdError
from .schema import ALL_DOMAINS, DomainKey, TaskId, make_default_schema

logger = logging.getLogger("mtmd")


class UsageError(MtmdError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _u64(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64: {text!r}")
    return v


def _common(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="INI config with [train], [model], [data] sections")
    p.add_argument("--seed", type=_u64, default=d, help="experiment seed (u64)")
    p.add_argument("--out", default=d if suppress else ".", help="output directory")
    return p


def _parse_mix(text: str | None) -> dict | None:
    if not text:
        return None
    mix = {}
    for part in text.split(","):
        try:
            key, frac = part.rsplit(":", 1)
            mix[DomainKey.parse(key.strip())] = float(frac)
        except ValueError:
            raise ConfigurationError(f"bad domain mix entry {part!r}; expected Surface/Product:fraction") from None
    return mix


def build_parser() -> argparse.ArgumentParser:
    top = _Parser(prog="mtmd", description="Multi-task multi-domain two-tower ranker", parents=[_common(False)])
    sub = top.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True
    common = [_common(True)]

    p = sub.add_parser("gen", parents=common, help="generate a synthetic distillation dataset")
    p.add_argument("-n", type=int, required=True, help="number of examples")
    p.add_argument("--mix", help="domain mix, e.g. HomeFeed/Standard:0.5,Search/Shopping:0.5 (default uniform)")
    p.add_argument("--alpha", type=float, help="teacher cross-domain share")
    p.add_argument("--teacher-seed", type=_u64, help="teacher seed (default from config, else 0)")
    p.add_argument("--first-id", type=int, default=0)
    p.add_argument("-o", "--output", help="dataset path (default <out>/dataset.tsv)")

    p = sub.add_parser("train", parents=common, help="train the unified model")
    p.add_argument("--train", required=True, help="training dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("-o", "--output", help="checkpoint path (default <out>/model.ckpt)")

    p = sub.add_parser("train-baselines", parents=common, help="train one baseline per domain slice")
    p.add_argument("--train", required=True)
    p.add_argument("--steps", type=int, help="total step budget shared by all baselines")

    p = sub.add_parser("eval", parents=common, help="LogMAE of a checkpoint on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("compare", parents=common, help="unified model vs per-slice baselines")
    p.add_argument("--model", required=True)
    p.add_argument("--baselines", required=True, help="directory written by train-baselines")
    p.add_argument("--data", required=True)

    p = sub.add_parser("ablate", parents=common, help="one-factor-at-a-time ablations")
    p.add_argument("--train", required=True)
    p.add_argument("--data", required=True, help="evaluation dataset")
    p.add_argument("--variants", default="no_domain_adapt,no_dcn,post_norm,downsample_50")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default: --seed)")
    p.add_argument("--steps", type=int)

    p = sub.add_parser("export-emb", parents=common, help="export item embeddings")
    p.add_argument("--model", required=True)
    p.add_argument("--items", required=True, help="dataset whose rows are the items")
    p.add_argument("-o", "--output", help="embedding file (default <out>/items.emb)")

    p = sub.add_parser("rank", parents=common, help="top-k items for one query")
    p.add_argument("--model", required=True)
    p.add_argument("--emb", required=True, help="embedding file from export-emb")
    p.add_argument("--queries", required=True, help="dataset holding the query row")
    p.add_argument("--row", type=int, default=0, help="query row index")
    p.add_argument("--task", default="CTR", choices=[t.name for t in TaskId])
    p.add_argument("-k", type=int, default=10)
    return top


# ---------------------------------------------------------------------------


def _configs(args) -> tuple[TrainConfig, DataConfig]:
    train, data = load_config(args.config) if args.config else (TrainConfig(), DataConfig())
    if args.seed is not None:
        train = train.replace(seed=args.seed)
    return train, data


def _emit(args, table: str, records: list[str]) -> None:
    print(table)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, f"{args.command}.records")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(r + "\n" for r in records))


def _out_path(args, name: str) -> str:
    if getattr(args, "output", None):
        return args.output
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _read(path):
    from .dataset import read_encoded

    return read_encoded(path, make_default_schema())


def cmd_gen(args) -> None:
    from .dataset import generate_dataset

    train, data = _configs(args)
    seed = train.seed
    alpha = data.alpha if args.alpha is None else args.alpha
    teacher_seed = data.teacher_seed if args.teacher_seed is None else args.teacher_seed
    if args.n < 0:
        raise ConfigurationError("-n must be non-negative")
    path = _out_path(args, "dataset.tsv")
    enc = generate_dataset(seed, args.n, _parse_mix(args.mix), path, alpha=alpha, teacher_seed=teacher_seed, first_id=args.first_id)
    counts = np.bincount(enc.domain, minlength=len(ALL_DOMAINS))
    lines = [f"{str(d):<22} {int(c):>8}" for d, c in zip(ALL_DOMAINS, counts)]
    _emit(
        args,
        f"wrote {len(enc)} examples to {path}\n" + "\n".join(lines),
        [f"kind=gen path={path} rows={len(enc)} seed={seed} teacher_seed={teacher_seed} alpha={alpha!r}"]
        + [f"kind=gen_domain domain={d} rows={int(c)}" for d, c in zip(ALL_DOMAINS, counts)],
    )


def cmd_train(args) -> None:
    from .embio import write_checkpoint
    from .trainer import train as run

    cfg, _ = _configs(args)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    data = _read(args.train)
    result = run(cfg, data, make_default_schema())
    path = _out_path(args, "model.ckpt")
    write_checkpoint(path, result.model, cfg)
    hist = result.history
    recs = [f"kind=train_step step={h['step']} loss={h['total']!r}" for h in hist]
    last = hist[-1]["total"] if hist else float("nan")
    _emit(args, f"trained {len(hist)} steps, final batch loss {last:.6f}\ncheckpoint: {path}", recs + [f"kind=train checkpoint={path}"])


def _baseline_name(d: DomainKey) -> str:
    return f"baseline_{d.surface.name}_{d.product.name}.ckpt"


def cmd_train_baselines(args) -> None:
    from .embio import write_checkpoint
    from .trainer import train_baselines

    cfg, _ = _configs(args)
    data = _read(args.train)
    res = train_baselines(cfg, data, make_default_schema(), steps=args.steps)
    os.makedirs(args.out, exist_ok=True)
    recs, lines = [], []
    for d, m in res.models.items():
        path = os.path.join(args.out, _baseline_name(d))
        seed = (cfg.seed * 1_000_003 + d.index + 1) & 0xFFFFFFFFFFFFFFFF
        write_checkpoint(path, m, cfg.replace(seed=seed, constrained=False), meta=f"kind=baseline domain={d}")
        lines.append(f"{str(d):<22} {path}")
        recs.append(f"kind=baseline domain={d} checkpoint={path} steps={len(res.histories[d])}")
    recs.append(f"kind=params baselines_total={res.non_embedding_params} mtmd={res.mtmd_non_embedding_params}")
    lines.append(f"non-embedding params: baselines {res.non_embedding_params}, unified {res.mtmd_non_embedding_params}")
    _emit(args, "\n".join(lines), recs)


def _report_table(report) -> str:
    rows = [f"{'domain':<22} {'task':<5} {'logmae':>9} {'count':>7}"]
    for (d, t), (v, c) in sorted(report.cells.items(), key=lambda kv: (kv[0][0].index, kv[0][1])):
        rows.append(f"{str(d):<22} {t.name:<5} {v:>9.4f} {c:>7}")
    for t, (v, c) in sorted(report.per_task.items()):
        rows.append(f"{'all':<22} {t.name:<5} {v:>9.4f} {c:>7}")
    rows.append(f"overall logmae {report.overall:.4f}")
    return "\n".join(rows)


def cmd_eval(args) -> None:
    from .embio import load_model
    from .metrics import evaluate

    model, cfg = load_model(args.model)
    data = _read(args.data)
    constrained = cfg.constrained and getattr(model, "supports_constrained", True)
    report = evaluate(model, data, constrained)
    _emit(args, _report_table(report), report.records())


def cmd_compare(args) -> None:
    from .embio import load_model
    from .metrics import compare_unified_vs_baselines

    model, cfg = load_model(args.model)
    baselines = {}
    for d in ALL_DOMAINS:
        path = os.path.join(args.baselines, _baseline_name(d))
        if os.path.exists(path):
            baselines[d] = load_model(path)[0]
    if not baselines:
        raise DataError(f"no baseline checkpoints in {args.baselines!r}")
    table = compare_unified_vs_baselines(model, baselines, _read(args.data), cfg.constrained)
    summary = f"\nMTMD better in {table.positive()} of {table.filled()} cells"
    _emit(args, table.render() + summary, table.records() + [f"kind=compare_summary positive={table.positive()} filled={table.filled()}"])


def cmd_ablate(args) -> None:
    from .ablation import run_ablation

    cfg, _ = _configs(args)
    if args.steps is not None:
        cfg = cfg.replace(steps=args.steps)
    try:
        seeds = [int(s, 0) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    except ValueError:
        raise UsageError(f"bad --seeds {args.seeds!r}") from None
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    report = run_ablation(variants, cfg, _read(args.train), _read(args.data), make_default_schema(), seeds)
    _emit(args, report.render(), report.records())


def cmd_export_emb(args) -> None:
    from .embio import export_embeddings, load_model

    model, _ = load_model(args.model)
    if not hasattr(model, "item"):
        raise ConfigurationError("export-emb needs a unified model checkpoint")
    path = _out_path(args, "items.emb")
    store = export_embeddings(model, _read(args.items), path)
    dims = ", ".join(f"{t} deep {d} shallow {s}" for t, d, s in zip(store.tasks, store.deep_dims, store.shallow_dims))
    _emit(args, f"wrote {len(store)} item embeddings to {path}\n{dims}", [f"kind=export path={path} rows={len(store)}"])


def cmd_rank(args) -> None:
    from .embio import import_embeddings, load_model
    from .towers import embeddings_for_rows, rank_top_k

    model, cfg = load_model(args.model)
    store = import_embeddings(args.emb)
    queries = _read(args.queries)
    if not 0 <= args.row < len(queries):
        raise DataError(f"query row {args.row} out of range (dataset has {len(queries)} rows)")
    q = embeddings_for_rows(model, queries.subset(np.array([args.row])), "query")
    q_emb = {t: (d[0], s[0]) for t, (d, s) in q.items()}
    task = TaskId[args.task]
    hits = rank_top_k(q_emb, store, args.k, task, cfg.constrained)
    rows = [f"{'rank':>4} {'item_id':>20} {'prob':>12}"]
    rows += [f"{r:>4} {i:>20} {p:>12.6g}" for r, (i, p) in enumerate(hits, 1)]
    recs = [f"kind=rank rank={r} item_id={i} task={task.name} prob={p!r}" for r, (i, p) in enumerate(hits, 1)]
    _emit(args, "\n".join(rows), recs)


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "train-baselines": cmd_train_baselines,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
    "export-emb": cmd_export_emb,
    "rank": cmd_rank,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except MtmdError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except SystemExit as e:  # --help
        return int(e.code or 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
