"""Command line entry point: ``chronor prepare | train | eval | sweep``.

Every command exits 0 on success and 1 on error. With ``--json`` stdout only
carries one JSON document. ``CHRONOR_THREADS`` caps BLAS threads and sweep
workers; set it to 1 for byte-reproducible runs.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path


from .config import GRID_KEYS, RunSpec, load_grid
from .data import (SPLITS, DataError, Dataset, FilterIndex, Vocab, build_filter_index,
                   build_vocab, encode_dataset, parse_quadruple_file, read_quads, write_quads)
from .evaluation import evaluate, write_ranks_csv
from .params import CheckpointError, ConfigError, init_model, load_checkpoint, save_checkpoint
from .training import TrainingError, fit

log = logging.getLogger("chronor")


@dataclass
class Prepared:
    vocab: Vocab
    splits: dict[str, Dataset]
    filter_index: FilterIndex
    num_facts: int

    def stats(self) -> dict:
        return {"entities": len(self.vocab.entities),
                "relations": self.vocab.num_source_relations,
                "timestamps": self.vocab.num_dated_timestamps,
                "facts": self.num_facts}


def prepare_raw(paths: dict[str, str], format: str) -> Prepared:
    raw = {split: parse_quadruple_file(paths[split], format) for split in SPLITS}
    if not raw["train"]:
        raise DataError(f"{paths['train']}: train split is empty")
    vocab = build_vocab(q for split in SPLITS for q in raw[split])
    splits = {}
    for split in SPLITS:
        try:
            splits[split] = encode_dataset(raw[split], vocab, split)
        except DataError as exc:
            raise DataError(f"{paths[split]}: {exc}") from None
    index = build_filter_index(splits.values(), vocab.num_base_relations)
    return Prepared(vocab, splits, index, sum(len(raw[s]) for s in SPLITS))


def write_prepared(prep: Prepared, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = (len(prep.vocab.entities), len(prep.vocab.relations), len(prep.vocab.timestamps))
    for split, ds in prep.splits.items():
        write_quads(out / f"{split}.tkgd", ds.quads, split, *counts)
    write_quads(out / "filter.tkgd", prep.filter_index.to_quads(), "filter", *counts)
    (out / "vocab.json").write_text(json.dumps(prep.vocab.to_json(), ensure_ascii=False),
                                    encoding="utf-8")
    (out / "stats.json").write_text(json.dumps(prep.stats()) + "\n", encoding="utf-8")


def load_prepared(data_dir) -> Prepared:
    d = Path(data_dir)
    vocab = Vocab.from_json(json.loads((d / "vocab.json").read_text(encoding="utf-8")))
    expected = {"entities": len(vocab.entities), "relations": len(vocab.relations),
                "timestamps": len(vocab.timestamps)}
    splits = {}
    for split in SPLITS:
        quads, meta = read_quads(d / f"{split}.tkgd")
        _check_counts(d / f"{split}.tkgd", meta, expected)
        splits[split] = Dataset(quads, split)
    fq, meta = read_quads(d / "filter.tkgd")
    _check_counts(d / "filter.tkgd", meta, expected)
    num_facts = len(splits["train"]) // 2 + len(splits["valid"]) + len(splits["test"])
    return Prepared(vocab, splits, FilterIndex.from_quads(fq), num_facts)


def _check_counts(path, meta: dict, expected: dict) -> None:
    for key, value in expected.items():
        if meta[key] != value:
            raise DataError(f"{path}: header has {meta[key]} {key}, vocab has {value}")


def load_spec_data(spec: RunSpec) -> Prepared:
    if spec.data:
        return load_prepared(spec.data)
    missing = [s for s in SPLITS if getattr(spec, s) is None]
    if missing:
        raise ConfigError(f"run spec needs 'data' or raw paths; missing {missing}")
    return prepare_raw({s: getattr(spec, s) for s in SPLITS}, spec.format)


def run_training(spec: RunSpec) -> dict:
    """Train one RunSpec; writes checkpoints, metrics.jsonl and runspec.txt to ``spec.out``."""
    prep = load_spec_data(spec)
    vocab = prep.vocab
    model_config = spec.model_config(len(vocab.entities), len(vocab.relations),
                                     len(vocab.timestamps), vocab.num_dated_timestamps)
    out = Path(spec.out)
    out.mkdir(parents=True, exist_ok=True)
    spec.save(out / "runspec.txt")
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        def emit(record):
            fh.write(json.dumps(record) + "\n")
            fh.flush()

        result = fit(prep.splits["train"].quads, model_config, spec.train_config(),
                     valid=prep.splits["valid"].quads if len(prep.splits["valid"]) else None,
                     filter_index=prep.filter_index, callbacks=[emit],
                     params=init_model(model_config))
    save_checkpoint(result.best_params, model_config, out / "best.chrn")
    save_checkpoint(result.params, model_config, out / "final.chrn")
    return {"out": str(out), "epochs_run": len(result.history), "best_epoch": result.best_epoch,
            "best_valid_mrr": result.best_valid_mrr,
            "num_parameters": model_config.num_parameters}


def _child(spec: RunSpec) -> dict:
    try:
        return {"status": "ok", **run_training(spec)}
    except Exception as exc:  # one failed grid point must not end the sweep
        return {"status": f"failed: {type(exc).__name__}: {exc}", "best_valid_mrr": None}


def run_sweep(base: RunSpec, grid: dict[str, list[float]], workers: int = 1) -> tuple[RunSpec | None, list[dict]]:
    keys = [k for k in GRID_KEYS if k in grid]
    combos = list(product(*(grid[k] for k in keys))) or [()]
    specs = []
    for i, values in enumerate(combos):
        changes = dict(zip(keys, values))
        specs.append(base.updated(out=str(Path(base.out) / f"run_{i:03d}"), **changes))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_child, specs))
    else:
        outcomes = [_child(s) for s in specs]

    rows = []
    best, best_mrr = None, None
    for spec, outcome in zip(specs, outcomes):
        mrr = outcome.get("best_valid_mrr")
        rows.append({"lambda1": spec.lambda1, "lambda2": spec.lambda2, "ratio": spec.ratio,
                     "valid_mrr": mrr, "status": outcome["status"], "out": spec.out})
        if mrr is not None and (best_mrr is None or mrr > best_mrr):
            best, best_mrr = spec, mrr

    Path(base.out).mkdir(parents=True, exist_ok=True)
    with open(Path(base.out) / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["lambda1", "lambda2", "ratio", "valid_mrr", "status", "out"])
        w.writeheader()
        for row in rows:
            w.writerow({**row, "valid_mrr": "" if row["valid_mrr"] is None else row["valid_mrr"]})
    if best is not None:
        best.save(Path(base.out) / "best_runspec.txt")
    return best, rows


# ---------------------------------------------------------------------------
# argument handling

_SPEC_FLAGS = {
    "data": str, "train": str, "valid": str, "test": str, "n": int, "k": int, "ratio": float,
    "n_r": int, "init_std": float, "lambda1": float, "lambda2": float, "learning_rate": float,
    "batch_size": int, "epochs": int, "adagrad_eps": float, "reg_p": int, "valid_every": int,
    "patience": int,
}


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run spec file")
    p.add_argument("--seed", type=int)
    p.add_argument("--json", action="store_true", help="machine-readable stdout")
    p.add_argument("--out", help="output directory")


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    for name, typ in _SPEC_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.add_argument("--format", choices=("icews", "yago15k"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chronor", description="Temporal knowledge-graph completion with rotation-scaling embeddings.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="parse raw splits into encoded binary files")
    _add_common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--valid", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--format", choices=("icews", "yago15k"), default="icews")

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    _add_spec_flags(p)

    p = sub.add_parser("eval", help="filtered MRR / Hits@k of a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="prepared dataset directory")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--ranks-csv", help="write per-query ranks here")

    p = sub.add_parser("sweep", help="grid search over lambda1, lambda2 and n_r/n_tau")
    _add_common(p)
    _add_spec_flags(p)
    p.add_argument("--grid", help="file with comma lists, e.g. 'lambda1 = 0, 0.001, 0.01'")
    p.add_argument("--lambda1-grid")
    p.add_argument("--lambda2-grid")
    p.add_argument("--ratio-grid")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _spec_from_args(args) -> RunSpec:
    spec = RunSpec.load(args.config) if args.config else RunSpec()
    changes = {name: getattr(args, name, None) for name in _SPEC_FLAGS}
    changes.update(format=args.format, seed=args.seed, out=args.out)
    return spec.updated(**changes)


def _thread_cap() -> int | None:
    raw = os.environ.get("CHRONOR_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"CHRONOR_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise ConfigError("CHRONOR_THREADS must be >= 1")
    return value


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload) if args.json else text)


def cmd_prepare(args) -> None:
    if not args.out:
        raise ConfigError("prepare needs --out")
    prep = prepare_raw({"train": args.train, "valid": args.valid, "test": args.test}, args.format)
    write_prepared(prep, args.out)
    s = prep.stats()
    _emit(args, s, f"entities    {s['entities']:,}\nrelations   {s['relations']:,}\n"
                   f"timestamps  {s['timestamps']:,}\nfacts       {s['facts']:,}")


def cmd_train(args) -> None:
    summary = run_training(_spec_from_args(args))
    mrr = summary["best_valid_mrr"]
    _emit(args, summary, f"wrote {summary['out']}; best valid MRR "
                         f"{'n/a' if mrr is None else f'{100 * mrr:.2f}'} at epoch {summary['best_epoch']}")


def cmd_eval(args) -> None:
    params, config = load_checkpoint(args.checkpoint)
    prep = load_prepared(args.data)
    v = prep.vocab
    ours = (len(v.entities), len(v.relations), len(v.timestamps))
    theirs = (config.num_entities, config.num_relations, config.num_timestamps)
    if ours != theirs:
        raise ConfigError(f"checkpoint has {theirs[0]} entities / {theirs[1]} relations / "
                          f"{theirs[2]} timestamps but dataset has {ours[0]} / {ours[1]} / {ours[2]}")
    report, ranks = evaluate(prep.splits[args.split].quads, params, prep.filter_index,
                             return_ranks=True)
    if args.ranks_csv:
        write_ranks_csv(args.ranks_csv, ranks)
    pct = report.percentages()
    _emit(args, {"split": args.split, **report.to_json(), "percent": pct},
          "  ".join(f"{k} {v}" for k, v in pct.items()))


def cmd_sweep(args) -> None:
    base = _spec_from_args(args)
    grid = load_grid(Path(args.grid).read_text(encoding="utf-8")) if args.grid else {}
    for key in GRID_KEYS:
        flag = getattr(args, f"{key}_grid")
        if flag:
            grid[key] = [float(x) for x in flag.split(",") if x.strip()]
    workers = max(1, args.workers)
    cap = _thread_cap()
    if cap is not None:
        workers = min(workers, cap)
    best, rows = run_sweep(base, grid, workers)
    if best is None:
        raise TrainingError("every sweep run failed; see sweep.csv")
    payload = {"best": best.out, "rows": rows}
    lines = []
    for r in rows:
        mrr = "" if r["valid_mrr"] is None else f"{100 * r['valid_mrr']:.2f}"
        lines.append(f"{r['lambda1']:<10g}{r['lambda2']:<10g}{r['ratio']:<8g}{mrr:<8}{r['status']}")
    table = "\n".join(lines)
    _emit(args, payload, "lambda1   lambda2   ratio   MRR     status\n" + table + f"\nbest: {best.out}")


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cap = _thread_cap()
        if cap is not None:
            from threadpoolctl import threadpool_limits
            with threadpool_limits(limits=cap):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except (DataError, ConfigError, CheckpointError, TrainingError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
