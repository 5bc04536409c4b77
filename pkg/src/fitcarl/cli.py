"""``fitcarl`` command line: pretrain, make-splits, train, eval, explain, inspect."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .graph import DataError, load_concepts, load_quadruples
from .numeric import rng_stream
from .split import META_SETS, LpQuery, load_split, make_split, sample_task
from .train import TrainConfig

log = logging.getLogger("fitcarl")

LOG_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

# flag name -> config key
FLAG_KEYS = {"seed": "seed", "shots": "K", "episodes": "episodes", "beam": "beam", "ablation": "ablations",
             "workers": "workers", "seeds": "eval_seeds"}


class UsageError(Exception):
    """Bad flags, config keys or inputs (exit code 1)."""


class HelpFormatter(argparse.HelpFormatter):
    """Append the default to every optional flag unless the help already states it."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or not action.option_strings or action.required or action.dest == "help":
            return text
        if action.default is None:
            shown = "none"
        elif action.default is False:
            shown = "off"
        else:
            shown = "%(default)s"
        return f"{text} (default: {shown})"


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ config

def _convert(name: str, raw: str, default):
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise UsageError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if isinstance(default, tuple):
        items = [x.strip() for x in raw.split(",") if x.strip()]
        return tuple(int(x) for x in items) if name == "eval_seeds" else tuple(items)
    try:
        return type(default)(raw.strip())
    except ValueError as exc:
        raise UsageError(f"{name}: cannot parse {raw!r} as {type(default).__name__}") from exc


def read_config_file(path) -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    defaults = TrainConfig().to_dict()
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        if key not in defaults:
            raise UsageError(f"{path}:{lineno}: unknown config key {key!r}")
        default = TrainConfig.__dataclass_fields__[key].default
        out[key] = _convert(key, value, default)
    return out


def write_config(path, cfg: TrainConfig) -> None:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(map(str, v)) if isinstance(v, tuple) else v}")
    Path(path).write_text("\n".join(lines) + "\n")


def effective_config(args, base: dict | None = None) -> TrainConfig:
    """defaults < ``base`` (e.g. a checkpoint's config) < ``--config`` file < flags."""
    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[key] = v
    try:
        return TrainConfig.from_dict(values)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- commands

def cmd_pretrain(args) -> int:
    from .pretrain import pretrain

    split = load_split(_require(args.data, "split directory"))
    cfg = effective_config(args)
    out = _out_dir(args)
    write_config(out / "config.txt", cfg)
    emb = pretrain(split.background, d=cfg.d, epochs=cfg.pretrain_epochs, neg_ratio=cfg.neg_ratio, seed=cfg.seed)
    emb.save(out / "embedding.bin")
    emb.export_text(out / "embedding.txt", split.vocab)
    log.info("pretrained d=%d for %d epochs; final loss %s", cfg.d, cfg.pretrain_epochs,
             emb.losses[-1] if emb.losses else "n/a")
    return 0


def cmd_make_splits(args) -> int:
    out = _out_dir(args)
    fractions = tuple(float(x) for x in args.fractions.split(","))
    seed = 0 if args.seed is None else args.seed
    if args.synthetic:
        from .synthetic import generate_synthetic

        split = generate_synthetic(seed=seed, fractions=fractions)
    else:
        store = load_quadruples(_require(args.data, "quadruple file"))
        concepts = load_concepts(_require(args.concepts, "concept file"), store) if args.concepts else None
        split = make_split(store, fractions=fractions, seed=seed, concepts=concepts)
    split.save(out)
    print(stats_table(split.statistics(), str(out)))
    return 0


def _load_split_for(args):
    return load_split(_require(args.data, "split directory"))


def cmd_train(args) -> int:
    from .pretrain import ComplexEmbedding, pretrain
    from .train import meta_train

    split = _load_split_for(args)
    cfg = effective_config(args)
    out = _out_dir(args)
    write_config(out / "config.txt", cfg)
    if args.embedding:
        emb = ComplexEmbedding.load(_require(args.embedding, "embedding file"))
        if emb.d != cfg.d:
            raise UsageError(f"embedding has d={emb.d} but config asks for d={cfg.d}")
    elif cfg.pretrain_epochs > 0:
        emb = pretrain(split.background, d=cfg.d, epochs=cfg.pretrain_epochs, neg_ratio=cfg.neg_ratio, seed=cfg.seed)
    else:
        emb = None
    res = meta_train(split, cfg, embedding=emb)
    res.best.save(out / "best.ckpt")
    res.final.save(out / "final.ckpt")
    res.write_curve(out / "curve.csv")
    log.info("best meta-valid MRR %s at episode %d", res.best.valid_mrr, res.best.episode)
    return 0


def cmd_eval(args) -> int:
    from .evaluate import bucket_by_time, buckets_csv, evaluate
    from .train import Checkpoint

    split = _load_split_for(args)
    ck = Checkpoint.load(_require(args.checkpoint, "checkpoint"))
    cfg = effective_config(args, ck.config.to_dict())
    out = _out_dir(args)
    write_config(out / "config.txt", cfg)
    rep = evaluate(split, ck.params, args.split, cfg)
    (out / "metrics.json").write_text(rep.to_json() + "\n")
    rows = bucket_by_time(rep, args.granularity, split.background.epoch)
    (out / "buckets.csv").write_text(buckets_csv(rows))
    print(f"{args.split}: MRR {rep.mrr:.4f}  H@1 {rep.hits1:.4f}  H@3 {rep.hits3:.4f}  H@10 {rep.hits10:.4f}")
    return 0


def cmd_explain(args) -> int:
    from .evaluate import explain
    from .split import derive_queries
    from .train import Checkpoint

    split = _load_split_for(args)
    ck = Checkpoint.load(_require(args.checkpoint, "checkpoint"))
    cfg = effective_config(args, ck.config.to_dict())
    out = _out_dir(args)
    seed = cfg.eval_seeds[0] if cfg.eval_seeds else cfg.seed
    task = sample_task(split, args.split, cfg.K, rng_stream(seed, f"eval/{args.split}"))
    queries = [q for e in task.entities for q in derive_queries(task, e)]
    if not queries:
        raise UsageError(f"{args.split} has no queries with K={cfg.K}")
    if args.query:
        parts = [p.strip() for p in args.query.split(",")]
        if len(parts) != 4:
            raise UsageError("--query expects 'source,relation,answer,time'")
        v = split.vocab
        try:
            src, ans = v.entity_id(parts[0], frozen=True), v.entity_id(parts[2], frozen=True)
            rel = v.relation_id(parts[1].removesuffix("^-1"), frozen=True)
        except DataError as exc:
            raise UsageError(str(exc)) from exc
        if parts[1].endswith("^-1"):
            rel += 1
        t = int(parts[3])
        match = [q for q in queries if q == LpQuery(src, rel, t, ans)]
        if not match:
            raise UsageError(f"query {args.query!r} is not a query of the sampled {args.split} task")
        query = match[0]
    else:
        if not 0 <= args.index < len(queries):
            raise UsageError(f"--index must be in [0, {len(queries)})")
        query = queries[args.index]
    trace = explain(split, ck.params, cfg, query, task)
    v = split.vocab
    header = (f"# query ({v.entities[query.source]}, {v.relation_name(query.relation)}, ?, {query.query_time}) "
              f"answer {v.entities[query.answer]}")
    text = header + "\n" + trace.to_text(v, split.background.epoch) + "\n"
    (out / "path.txt").write_text(text)
    print(text, end="")
    return 0


STAT_COLUMNS = ["entities", "relations", "timestamps", "meta_train_entities", "meta_valid_entities",
                "meta_test_entities", "background_facts", "meta_train_facts", "meta_valid_facts", "meta_test_facts"]


def stats_table(stats: dict, name: str) -> str:
    head = "dataset\t" + "\t".join(STAT_COLUMNS)
    row = name + "\t" + "\t".join(str(stats[c]) for c in STAT_COLUMNS)
    return head + "\n" + row


def cmd_inspect(args) -> int:
    split = _load_split_for(args)
    text = stats_table(split.statistics(), Path(args.data).name)
    print(text)
    if args.out:
        (_out_dir(args) / "stats.tsv").write_text(text + "\n")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    d = TrainConfig()
    p = Parser(prog="fitcarl", description="Few-shot out-of-graph link prediction on temporal knowledge graphs.",
               formatter_class=HelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def common(sp, data=True, out=True):
        if data:
            sp.add_argument("--data", required=True, help="split directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--config", help="flat 'key = value' config file")
        sp.add_argument("--seed", type=int, help=f"master seed (default {d.seed})")
        return sp

    def model_flags(sp):
        sp.add_argument("--shots", type=int, choices=(1, 3), help=f"support facts per entity (default {d.K})")
        sp.add_argument("--beam", type=int, help=f"beam width (default {d.beam})")
        sp.add_argument("--ablation", action="append", choices=("A1", "A2", "B", "C", "D", "E"),
                        help="ablation flag, repeatable (default none)")
        sp.add_argument("--workers", type=int, help=f"evaluation threads (default {d.workers})")
        sp.add_argument("--seeds", type=_seeds,
                        help=f"comma-separated evaluation seeds (default {','.join(map(str, d.eval_seeds))})")

    fmt = HelpFormatter
    sp = common(sub.add_parser("pretrain", help="pretrain ComplEx embeddings on the background graph",
                               formatter_class=fmt))
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("make-splits", help="build an out-of-graph split", formatter_class=fmt)
    sp.add_argument("--data", help="quadruple file to split (omit with --synthetic)")
    sp.add_argument("--concepts", help="entity concept file")
    sp.add_argument("--synthetic", action="store_true", help="generate the planted-rule synthetic graph")
    sp.add_argument("--fractions", default="0.15,0.05,0.05", help="meta-train,valid,test entity fractions")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--seed", type=int, help="split seed (default 0)")
    sp.set_defaults(func=cmd_make_splits)

    sp = common(sub.add_parser("train", help="meta-train the agent", formatter_class=fmt))
    model_flags(sp)
    sp.add_argument("--episodes", type=int, help=f"meta-training episodes (default {d.episodes})")
    sp.add_argument("--embedding", help="pretrained embedding file (default: pretrain inline)")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("eval", help="filtered MRR / Hits@k of a checkpoint", formatter_class=fmt))
    model_flags(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint file")
    sp.add_argument("--split", default="meta_test", choices=META_SETS, help="meta set to evaluate")
    sp.add_argument("--granularity", default="month", choices=("month", "year"), help="time bucket size")
    sp.set_defaults(func=cmd_eval)

    sp = common(sub.add_parser("explain", help="greedy reasoning path for one query", formatter_class=fmt))
    model_flags(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint file")
    sp.add_argument("--split", default="meta_test", choices=META_SETS, help="meta set to evaluate")
    sp.add_argument("--query", help="'source,relation,answer,time' by name")
    sp.add_argument("--index", type=int, default=0, help="query index when --query is absent")
    sp.set_defaults(func=cmd_explain)

    sp = sub.add_parser("inspect", help="dataset statistics", formatter_class=fmt)
    sp.add_argument("--data", required=True, help="split directory")
    sp.add_argument("--out", help="also write stats.tsv here")
    sp.set_defaults(func=cmd_inspect)
    return p


def setup_logging() -> None:
    level = os.environ.get("FITCARL_LOG", "info").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.INFO), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def main(argv=None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "ablation", None) is not None:
            args.ablation = tuple(args.ablation)
        return args.func(args)
    except UsageError as exc:
        print(f"fitcarl: error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError) as exc:
        print(f"fitcarl: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("traceback", exc_info=True)
        print(f"fitcarl: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
