"""Command-line pipeline: simulate -> ingest -> train -> eval -> report.

Defaults come from a flat ``key = value`` config file (``--config`` or the
``CASCADEPRED_CONFIG`` environment variable); command-line flags win.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

from . import experiment as ex
from .ingest import (
    MalformedLogError,
    SocialGraph,
    build_mention_graph,
    dataset_stats,
    filter_users,
    load_follower_graph,
    parse_post_log,
    write_edge_list,
    write_post_log,
    write_stats_csv,
)
from .simgen import GeneratorSpec, generate
from .slicing import DEFAULT_DELTA_T, export_csv, load_dataset, save_dataset, slice_posts

log = logging.getLogger("cascadepred")

CONFIG_ENV = "CASCADEPRED_CONFIG"

DEFAULTS = {
    "delta_t": DEFAULT_DELTA_T,
    "target_size": 10000,
    "graph": "mention",
    "d": 100,
    "channels": 8,
    "blocks": 2,
    "max_epochs": 5000,
    "patience": 50,
    "batch_size": 0,
    "lr": 0.001,
    "search_budget": 500,
    "seeds": "0,1,2,3,4",
    "max_malformed": 0.01,
    "sample_pairs": 10000,
}


class UsageError(Exception):
    """Bad input: reported on stderr, exit status 2."""


def read_config(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            k = k.replace("-", "_")
            if k not in DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {k!r}")
            out[k] = v
    return out


def settings(args) -> dict:
    """Defaults < config file < flags, coerced to the default's type."""
    merged = dict(DEFAULTS)
    path = args.config or os.environ.get(CONFIG_ENV)
    if path:
        if not Path(path).is_file():
            raise UsageError(f"config file not found: {path}")
        merged.update(read_config(path))
    for k in DEFAULTS:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    for k, default in DEFAULTS.items():
        try:
            merged[k] = type(default)(merged[k])
        except ValueError:
            raise UsageError(f"bad value for {k}: {merged[k]!r}") from None
    return merged


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None
    if not seeds or len(set(seeds)) != len(seeds):
        raise UsageError("seeds must be a non-empty list of distinct integers")
    return seeds


def _need_file(path, what):
    if path is None or not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")


def _load_log(path, cfg):
    _need_file(path, "post log")
    try:
        return parse_post_log(path, cfg["max_malformed"])
    except MalformedLogError as exc:
        raise UsageError(str(exc)) from None
    except UnicodeDecodeError:
        raise UsageError(f"{path}: not a UTF-8 text file") from None


def _prepare(args, cfg):
    """Shared front half of ingest and stats: parse, filter, graph, slice."""
    parsed = _load_log(args.log, cfg)
    posts = parsed.records
    if not posts:
        raise UsageError(f"{args.log}: no records")
    uf = filter_users(posts, cfg["target_size"])
    kept = uf.kept_users
    if cfg["graph"] == "followers":
        if not args.followers:
            raise UsageError("--graph=followers requires --followers EDGE_FILE")
        _need_file(args.followers, "follower edge list")
        graph = load_follower_graph(args.followers, kept)
        kept = kept & set(graph.users)
    elif cfg["graph"] == "mention":
        full = build_mention_graph(posts)
        edges = {(u, v) for u, v in full.edges if u in kept and v in kept}
        graph = SocialGraph(sorted({u for e in edges for u in e}), edges, "mention")
    else:
        raise UsageError(f"unknown graph kind {cfg['graph']!r}")
    users = sorted(kept)
    if not users:
        raise UsageError("no users left after filtering")
    try:
        ds = slice_posts(posts, users, cfg["delta_t"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return parsed, uf, graph, ds


def cmd_ingest(args):
    cfg = settings(args)
    parsed, uf, graph, ds = _prepare(args, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "dataset.bin", ds)
    export_csv(out / "slices.csv", ds)
    write_edge_list(out / "graph.tsv", graph)
    stats = dataset_stats(parsed.records, graph, uf, ds.counts, cfg["sample_pairs"])
    stats.n_users = ds.n_users
    write_stats_csv(out / "stats.csv", stats)
    print(f"{ds.n_users} users x {ds.n_slices} slices; {parsed.malformed} malformed lines; "
          f"B = {stats.broadcasticity:.4f}")
    return 0


def cmd_stats(args):
    cfg = settings(args)
    parsed, uf, graph, ds = _prepare(args, cfg)
    stats = dataset_stats(parsed.records, graph, uf, ds.counts, cfg["sample_pairs"])
    stats.n_users = ds.n_users
    if args.out:
        write_stats_csv(args.out, stats)
    else:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["statistic", "value"])
        w.writerows(stats.rows())
    return 0


def cmd_slice(args):
    cfg = settings(args)
    parsed = _load_log(args.log, cfg)
    if args.users:
        _need_file(args.users, "user list")
        users = [u.strip() for u in open(args.users, encoding="utf-8") if u.strip()]
    else:
        users = sorted({p.author for p in parsed.records})
    try:
        ds = slice_posts(parsed.records, users, cfg["delta_t"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(out / "dataset.bin", ds)
    export_csv(out / "slices.csv", ds)
    print(f"{ds.n_users} users x {ds.n_slices} slices")
    return 0


def _load_dataset(path):
    _need_file(path, "dataset")
    try:
        return load_dataset(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _adjacency(args, ds):
    path = args.graph_file or Path(args.dataset).with_name("graph.tsv")
    if not Path(path).is_file():
        return None
    g = load_follower_graph(path, ds.users)
    return g.adjacency(ds.users)


def train_config(cfg, seeds, shuffle=False) -> ex.TrainConfig:
    return ex.TrainConfig(max_epochs=cfg["max_epochs"], patience=cfg["patience"],
                          batch_size=cfg["batch_size"] or None, seeds=seeds,
                          shuffle_inputs=shuffle, lr=cfg["lr"], d=cfg["d"],
                          channels=cfg["channels"], blocks=cfg["blocks"],
                          search_budget=cfg["search_budget"])


def cmd_train(args):
    cfg = settings(args)
    names = [m.strip() for m in args.model.split(",") if m.strip()]
    bad = [m for m in names if m not in ex.MODEL_NAMES]
    if bad or not names:
        raise UsageError(f"unknown model {', '.join(bad) or '(none)'}; "
                         f"valid: {', '.join(ex.MODEL_NAMES)}")
    ds = _load_dataset(args.dataset)
    seeds = parse_seeds(cfg["seeds"])
    adjacency = _adjacency(args, ds)
    for name in names:
        if name in ("twmn", "alo", "lt") and adjacency is None:
            raise UsageError(f"{name} needs a social graph (--graph-file or graph.tsv)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name in names:
        if args.shuffle and name == "twcrn":
            name = "twcrn_shuf"
        conf = train_config(cfg, seeds, args.shuffle)
        for seed in seeds:
            try:
                fitted = ex.fit_model(name, ds, conf, seed, adjacency)
            except ex.TrainingError as exc:
                log.error("%s seed %d aborted: %s", name, seed, exc)
                continue
            stem = f"{name}_seed{seed}"
            ex.save_predictor(out / f"{stem}.ckpt", fitted.model, seed)
            if fitted.history is not None:
                fitted.history.write_csv(out / f"{stem}_loss.csv")
            if name == "mle":
                fitted.model.to_csv(out / f"{stem}_table.csv", ds.users)
            print(f"trained {stem}")
    return 0


def cmd_eval(args):
    ds = _load_dataset(args.dataset)
    paths = []
    for p in args.checkpoints:
        p = Path(p)
        paths += sorted(p.glob("*.ckpt")) if p.is_dir() else [p]
    if not paths:
        raise UsageError("no checkpoints given")
    wanted = set(parse_seeds(args.seeds)) if args.seeds else None
    runs: dict[str, list] = {}
    for p in paths:
        _need_file(p, "checkpoint")
        try:
            model, seed = ex.load_predictor(p)
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{p}: {exc}") from None
        if wanted is not None and seed not in wanted:
            continue
        if getattr(model, "n_users", ds.n_users) != ds.n_users:
            raise UsageError(f"{p}: trained for a different user set")
        runs.setdefault(model.name, []).append((seed, ex.evaluate(model, ds).metrics()))
    if not runs:
        raise UsageError("no checkpoint matches the requested seeds")
    name = args.name or Path(args.dataset).parent.name or "dataset"
    order = {m: i for i, m in enumerate(ex.MODEL_NAMES)}
    reports = [ex.aggregate(m, name, [r for _, r in sorted(runs[m], key=lambda t: t[0])])
               for m in sorted(runs, key=lambda m: order.get(m, len(order)))]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_report_csv(out / "report.csv", reports)
    table = ex.markdown_table(reports)
    (out / "report.md").write_text(table, encoding="utf-8")
    print(table, end="")
    return 0


def cmd_report(args):
    reports = {}
    for path in args.reports:
        _need_file(path, "report CSV")
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["model"], row["dataset"])
                reports.setdefault(key, {})[row["metric"]] = (float(row["mean"]),
                                                              float(row["std"]))
    lines = []
    datasets = list(dict.fromkeys(d for _, d in reports))
    models = list(dict.fromkeys(m for m, _ in reports))
    lines.append("| Model | " + " | ".join(f"{d} P | {d} F1 | {d} R" for d in datasets) + " |")
    lines.append("|---|" + "---|" * (3 * len(datasets)))
    for m in models:
        cells = []
        for d in datasets:
            r = reports.get((m, d), {})
            for metric in ex.METRICS:
                cells.append(f"{r[metric][0]:.2f} ± {r[metric][1]:.2f}" if metric in r else "n/a")
        lines.append(f"| {ex.DISPLAY.get(m, m)} | " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def cmd_simulate(args):
    _need_file(args.spec, "generator spec")
    try:
        spec = GeneratorSpec.from_json(args.spec)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{args.spec}: {exc}") from None
    if args.seed is not None:
        spec.seed = args.seed
    sim = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_post_log(out / "posts.jsonl", sim.posts())
    write_edge_list(out / "followers.tsv", sim.graph)
    print(f"{spec.kind}: {spec.n_users} users x {spec.n_slices} slices -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cascadepred", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help=f"key = value file (default: ${CONFIG_ENV})")
        return p

    def data_flags(p):
        p.add_argument("--graph", choices=["mention", "followers"])
        p.add_argument("--followers", help="follower<TAB>followee edge list")
        p.add_argument("--target-size", dest="target_size", type=int)
        p.add_argument("--delta-t", dest="delta_t", type=int, help="window width in seconds")
        p.add_argument("--max-malformed", dest="max_malformed", type=float)
        p.add_argument("--sample-pairs", dest="sample_pairs", type=int)

    p = common(sub.add_parser("ingest", help="post log -> dataset, graph and stats"))
    p.add_argument("log")
    data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = common(sub.add_parser("stats", help="dataset statistics as CSV"))
    p.add_argument("log")
    data_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stats)

    p = common(sub.add_parser("slice", help="post log -> sliced dataset for a fixed user list"))
    p.add_argument("log")
    p.add_argument("--users", help="one user id per line (default: every author)")
    p.add_argument("--delta-t", dest="delta_t", type=int)
    p.add_argument("--max-malformed", dest="max_malformed", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_slice)

    p = common(sub.add_parser("train", help="fit models, one checkpoint per seed"))
    p.add_argument("dataset")
    p.add_argument("--model", required=True, help="comma list of " + ", ".join(ex.MODEL_NAMES))
    p.add_argument("--graph-file", help="edge list over the dataset users (default: graph.tsv)")
    p.add_argument("--seeds")
    p.add_argument("--shuffle", action="store_true", help="train twcrn as the permutation test")
    for k in ("d", "channels", "blocks", "max_epochs", "patience", "batch_size",
              "search_budget"):
        p.add_argument("--" + k.replace("_", "-"), dest=k, type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="test-set precision/recall/F1 over checkpoints")
    p.add_argument("dataset")
    p.add_argument("checkpoints", nargs="+", help="checkpoint files or directories")
    p.add_argument("--seeds", help="only checkpoints trained with these seeds")
    p.add_argument("--name", help="dataset label in the report")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge report CSVs into one Markdown table")
    p.add_argument("reports", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("simulate", help="synthetic post log + follower edges from a JSON spec")
    p.add_argument("spec")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
