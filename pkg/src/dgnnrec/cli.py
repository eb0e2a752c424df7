"""Command-line entry point: build / train / eval / ablate / export-attn /
grad-check / bench.

Runs are reproducible: a config file (plain ``key = value`` lines) plus a
root seed fully determine every output except wall-clock fields. CLI
flags override config-file values. The default thread count can be set
via the DGNNREC_THREADS environment variable.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import bench as bench_mod
from . import diffengine as de
from .evaluation import (AblationVariant, EvaluationError, evaluate,
                         export_memory_attention, report_lines, report_table,
                         run_ablation, strip_graph)
from .hetgraph import (EdgeFileError, GraphBuildError, SamplingError, SplitError,
                       build_graph, load_edge_file, load_split_manifest,
                       save_split_manifest, split_leave_one_out)
from .model import forward
from .training import (CheckpointError, TrainingConfig, check_model_gradients,
                       load_checkpoint, save_checkpoint, train_model)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5
EXIT_EVAL = 6


@dataclass
class RunConfig:
    interactions: str = ""
    social: str = ""
    item_relations: str = ""
    out: str = "runs/out"
    dim: int = 16
    layers: int = 2
    memory_units: int = 8
    lr: float = 0.01
    batch_size: int = 2048
    reg: float = 1e-4
    epochs: int = 80
    seed: int = 0
    cutoffs: str = "5,10,20"
    threads: int = 0  # 0 -> DGNNREC_THREADS or 1
    variant: str = "full"
    eval_every: int = 0

    def cutoff_list(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.cutoffs.split(",") if x.strip())

    def thread_count(self) -> int:
        if self.threads > 0:
            return self.threads
        return int(os.environ.get("DGNNREC_THREADS", "1"))

    def training(self) -> TrainingConfig:
        return TrainingConfig(dim=self.dim, layers=self.layers,
                              memory_units=self.memory_units, lr=self.lr,
                              batch_size=self.batch_size, reg=self.reg,
                              epochs=self.epochs, seed=self.seed)


def load_config(path) -> RunConfig:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    cfg = RunConfig()
    casts = {f.name: f.type for f in fields(RunConfig)}
    for key, value in values.items():
        if key not in casts:
            raise ValueError(f"{path}: unknown config key {key!r}")
        current = getattr(cfg, key)
        cfg = replace(cfg, **{key: type(current)(value)})
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# shared plumbing


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {
        "interactions": args.interactions, "social": args.social,
        "item_relations": args.item_relations, "out": args.out,
        "dim": args.dim, "layers": args.layers, "memory_units": args.memory_units,
        "lr": args.lr, "batch_size": args.batch, "reg": getattr(args, "reg", None),
        "epochs": args.epochs, "seed": args.seed, "threads": args.threads,
        "variant": args.variant, "cutoffs": args.cutoffs,
        "eval_every": getattr(args, "eval_every", None),
    }
    cfg = replace(cfg, **{k: v for k, v in overrides.items() if v is not None})
    return cfg


def _load_graph(cfg: RunConfig, users=None, items=None, relations=None):
    if not cfg.interactions:
        raise GraphBuildError("no interactions file configured")
    ui = load_edge_file(cfg.interactions, "interaction")
    uu = load_edge_file(cfg.social, "social") if cfg.social else []
    ir = load_edge_file(cfg.item_relations, "item_relation") if cfg.item_relations else []
    if not ui:
        raise GraphBuildError("no interactions")
    num_users = users if users is not None else 1 + max(
        max(e[0] for e in ui), max((max(a, b) for a, b in uu), default=-1))
    num_items = items if items is not None else 1 + max(
        max(e[1] for e in ui), max((e[0] for e in ir), default=-1))
    num_relations = relations if relations is not None else (
        1 + max(e[1] for e in ir) if ir else 0)
    return build_graph(ui, uu, ir, num_users, num_items, num_relations)


def _manifest_path(cfg: RunConfig) -> Path:
    return Path(cfg.out) / "split.txt"


def _get_split(cfg: RunConfig, graph, write: bool = True):
    path = _manifest_path(cfg)
    if path.exists():
        return load_split_manifest(path, graph)
    split = split_leave_one_out(graph, cfg.seed)
    if write:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_split_manifest(split, path)
    return split


# ---------------------------------------------------------------------------
# commands


def cmd_build(args) -> int:
    cfg = _resolve_config(args)
    graph = _load_graph(cfg, args.users, args.items, args.rel_nodes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    split = split_leave_one_out(graph, cfg.seed)
    save_split_manifest(split, _manifest_path(cfg))

    y_density = graph.num_interactions / (graph.num_users * graph.num_items)
    s_density = (graph.uu.num_edges / (graph.num_users ** 2)) if graph.num_users else 0.0
    print(f"users: {graph.num_users}")
    print(f"items: {graph.num_items}")
    print(f"relation nodes: {graph.num_relations}")
    print(f"interactions: {graph.num_interactions} (density {100 * y_density:.4f}%)")
    print(f"social ties (directed): {graph.uu.num_edges} (density {100 * s_density:.4f}%)")
    print(f"item-relation links: {graph.ir.num_edges}")
    print(f"test users: {split.test_users.size} (skipped single-interaction: {split.num_skipped})")
    print(f"wrote {_manifest_path(cfg)}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    graph = _load_graph(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    split = _get_split(cfg, graph)
    variant = AblationVariant.parse(cfg.variant)
    train_graph = strip_graph(split.train_graph, variant.drops_social,
                              variant.drops_relations)
    model_variant = variant.model_variant()
    tc = variant.adjust_config(cfg.training())

    log_path = out / "train_log.tsv"
    log_rows = ["epoch\tloss\tseconds\thr10\tndcg10"]

    def on_epoch(epoch, params, mean_loss, seconds):
        hr10 = ndcg10 = ""
        if cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == tc.epochs):
            state = forward(train_graph, params, model_variant)
            rep = evaluate(state.hstar, split, train_graph, (10,), model_variant,
                           cfg.thread_count())
            hr10, ndcg10 = f"{rep.hr[10]:.6f}", f"{rep.ndcg[10]:.6f}"
        log_rows.append(f"{epoch}\t{mean_loss:.10f}\t{seconds:.3f}\t{hr10}\t{ndcg10}")
        print(f"epoch {epoch:>4d}  loss {mean_loss:.6f}  {seconds:.2f}s"
              + (f"  hr@10 {hr10} ndcg@10 {ndcg10}" if hr10 else ""))

    params, adam, losses = train_model(train_graph, tc, model_variant, on_epoch=on_epoch)
    last_loss = losses[-1] if losses else float("nan")
    ckpt_path = out / "model.ckpt"
    save_checkpoint(ckpt_path, params, graph.num_users, graph.num_items,
                    graph.num_relations, adam, epoch=tc.epochs, loss=last_loss)
    log_path.write_text("\n".join(log_rows) + "\n", encoding="utf-8")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve_config(args)
    graph = _load_graph(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    split = _get_split(cfg, graph)
    variant = AblationVariant.parse(cfg.variant)
    eval_graph = strip_graph(split.train_graph, variant.drops_social,
                             variant.drops_relations)
    ckpt = load_checkpoint(args.checkpoint or out / "model.ckpt")
    if (ckpt.num_users, ckpt.num_items, ckpt.num_relations) != (
            graph.num_users, graph.num_items, graph.num_relations):
        raise CheckpointError("checkpoint dimensions do not match the data")
    model_variant = variant.model_variant()
    state = forward(eval_graph, ckpt.params, model_variant)
    report = evaluate(state.hstar, replace(split, train_graph=eval_graph), eval_graph,
                      cfg.cutoff_list(), model_variant, cfg.thread_count())
    (out / "metrics.tsv").write_text(report_lines(report), encoding="utf-8")
    (out / "report.txt").write_text(report_table(report), encoding="utf-8")
    print(report_table(report), end="")
    print(f"wrote {out / 'metrics.tsv'}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    graph = _load_graph(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    split = _get_split(cfg, graph)
    wanted = (list(AblationVariant) if args.variant in (None, "all")
              else [AblationVariant.parse(args.variant)])
    for variant in wanted:
        report = run_ablation(variant, graph, split, cfg.training(),
                              cfg.cutoff_list(), cfg.thread_count())
        tag = variant.value.lstrip("-") or "full"
        (out / f"metrics_{tag}.tsv").write_text(report_lines(report), encoding="utf-8")
        n = cfg.cutoff_list()[min(1, len(cfg.cutoff_list()) - 1)]
        print(f"{variant.value:<5s} HR@{n} {report.hr[n]:.4f}  NDCG@{n} {report.ndcg[n]:.4f}")
    return EXIT_OK


def cmd_export_attn(args) -> int:
    cfg = _resolve_config(args)
    graph = _load_graph(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    split = _get_split(cfg, graph)
    variant = AblationVariant.parse(cfg.variant)
    eval_graph = strip_graph(split.train_graph, variant.drops_social,
                             variant.drops_relations)
    ckpt = load_checkpoint(args.checkpoint or out / "model.ckpt")
    model_variant = variant.model_variant()
    state = forward(eval_graph, ckpt.params, model_variant)
    path = out / "attention.tsv"
    export_memory_attention(state, eval_graph, ckpt.params.banks, path, model_variant)
    print(f"wrote {path} ({2 * eval_graph.num_users} rows)")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    result = check_model_gradients(seed=args.seed or 0, tol=args.tol)
    for name, err in sorted(result.worst_by_group().items()):
        print(f"{name:<28s} max rel err {err:.3e}")
    print(f"{len(result.cases)} instances, {sum(c.report.num_coords for c in result.cases)} "
          f"coordinates checked")
    if result.passed:
        print(f"PASS, max rel err {result.max_rel_err:.3e} < {result.tol:g}")
        return EXIT_OK
    print(f"FAIL, max rel err {result.max_rel_err:.3e} >= {result.tol:g}")
    return EXIT_NUMERIC


def cmd_bench(args) -> int:
    rows = bench_mod.scaling_table(base_edges=args.base_edges, reps=args.reps,
                                   seed=args.seed or 0)
    print(bench_mod.format_bench_table(rows), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--interactions")
    p.add_argument("--social")
    p.add_argument("--item-relations", dest="item_relations")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--memory-units", dest="memory_units", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--lambda", dest="reg", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--cutoffs")
    p.add_argument("--variant")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgnnrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="ingest edge files, report stats, write the split")
    _add_common(p)
    p.add_argument("--users", type=int, help="override inferred user count")
    p.add_argument("--items", type=int, help="override inferred item count")
    p.add_argument("--rel-nodes", dest="rel_nodes", type=int,
                   help="override inferred relation-node count")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train and write a checkpoint")
    _add_common(p)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate one or all ablation variants")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-attn", help="write per-user memory attention vectors")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_export_attn)

    p = sub.add_parser("grad-check", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="layer-step scaling table vs |E| and M")
    p.add_argument("--seed", type=int)
    p.add_argument("--base-edges", dest="base_edges", type=int, default=30000)
    p.add_argument("--reps", type=int, default=5)
    p.set_defaults(func=cmd_bench)
    return parser


_ERROR_CODES = (
    ((EdgeFileError, GraphBuildError, SplitError, SamplingError), EXIT_DATA),
    ((de.NonFiniteError, de.ShapeError), EXIT_NUMERIC),
    ((CheckpointError, OSError), EXIT_IO),
    ((EvaluationError,), EXIT_EVAL),
    ((ValueError,), EXIT_USAGE),
)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # map failure classes to distinct exit codes
        for types, code in _ERROR_CODES:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
