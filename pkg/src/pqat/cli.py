"""Command-line entry point: ``pqat gen | train | eval | compare``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import (DataError, Vocab, file_sha256, gen_choice_task, gen_kv_task, inject_distractor,
                   load_dataset, save_dataset)
from .perturb import ConfigError
from .training import MODES, NonFiniteLossError, TrainConfig, evaluate, required_len, train

log = logging.getLogger("pqat")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
DISTRACTOR_SEED = 1234
# a distractor appends one key/value pair to the passage
DISTRACTOR_ROOM = 2

_CHOICES = {"grad_accum_mode": ("sum", "mean"), "delta_norm_scope": ("per_example", "whole_batch")}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def add_train_flags(p: argparse.ArgumentParser, overrides: dict | None = None) -> None:
    """One flag per TrainConfig field, named after it."""
    overrides = overrides or {}
    g = p.add_argument_group("training config")
    for f in fields(TrainConfig):
        default = overrides.get(f.name, f.default)
        kw: dict = {"dest": f.name, "default": default}
        if f.name in ("alpha", "eps_ball"):
            kw["type"] = float
        elif f.name == "betas":
            kw.update(type=float, nargs=2)
        elif isinstance(f.default, bool):
            kw["action"] = argparse.BooleanOptionalAction
        else:
            kw["type"] = type(f.default)
        if f.name in _CHOICES:
            kw["choices"] = _CHOICES[f.name]
        g.add_argument(_flag(f.name), **kw)


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    values = {f.name: getattr(args, f.name) for f in fields(TrainConfig)}
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        msg = str(exc)
        for f in fields(TrainConfig):
            if re.search(rf"\b{f.name}\b", msg):
                raise ConfigError(f"{_flag(f.name)}: {msg}") from None
        raise


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be >= 1")
    if args.task == "span":
        examples = gen_kv_task(args.n, args.n_pairs, args.vocab_size, args.seed)
    else:
        examples = gen_choice_task(args.n, args.n_pairs, args.m, args.vocab_size, args.seed)
    if args.distractor:
        vocab = Vocab.standard(args.vocab_size)
        examples = [inject_distractor(ex, vocab, DISTRACTOR_SEED) for ex in examples]
    params = {"task": args.task, "n": args.n, "n_pairs": args.n_pairs, "seed": args.seed,
              "distractor": args.distractor}
    if args.task == "choice":
        params["m"] = args.m
    out = Path(args.out)
    try:
        save_dataset(out, examples, Vocab.standard(args.vocab_size), params)
    except OSError as exc:
        log.error("cannot write %s: %s", out, exc)
        return EXIT_RUNTIME
    print(f"wrote {len(examples)} examples to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_training(config: TrainConfig, data_path: Path, out_dir: Path, eval_paths: dict[str, Path],
                 metrics_name: str = "metrics.jsonl", checkpoint_name: str | None = "checkpoint.json") -> dict:
    """Train one (config, seed) job, streaming records to ``out_dir/metrics_name``.

    The first line of the metrics file is a header with the resolved config and
    the dataset hash. Returns the final evaluation results per eval set.
    """
    examples, vocab = load_dataset(data_path)
    eval_sets = {}
    for name, path in eval_paths.items():
        ds, v = load_dataset(path)
        if len(v) != len(vocab):
            raise ConfigError(f"{path}: vocabulary size {len(v)} differs from training data ({len(vocab)})")
        eval_sets[name] = ds
    if not config.max_len:
        needed = required_len(examples, *eval_sets.values()) + DISTRACTOR_ROOM
        config = TrainConfig.from_dict({**config.to_dict(), "max_len": needed})
    out_dir.mkdir(parents=True, exist_ok=True)
    header = {"header": {"config": config.to_dict(), "seed": config.seed, "mode": config.mode,
                         "dataset": str(data_path), "dataset_sha256": file_sha256(data_path),
                         "eval_sha256": {k: file_sha256(p) for k, p in eval_paths.items()}}}
    metrics_path = out_dir / metrics_name
    final: dict = {}
    with open(metrics_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")

        def sink(rec):
            fh.write(rec.to_json() + "\n")
            if "eval" in rec.diagnostics:
                final.update(rec.diagnostics["eval"])

        try:
            model, emb, _ = train(examples, vocab, config, eval_sets=eval_sets, on_record=sink)
        except NonFiniteLossError as exc:
            fh.write(json.dumps({"error": str(exc), "diagnostics": exc.diagnostics}) + "\n")
            raise
    if checkpoint_name:
        save_checkpoint(out_dir / checkpoint_name, model, emb, vocab, config.to_dict())
    return final


def cmd_train(args) -> int:
    config = config_from_args(args)
    evals = {Path(p).stem: Path(p) for p in args.eval_data or []}
    final = run_training(config, Path(args.data), Path(args.out_dir), evals)
    print(json.dumps({"mode": config.mode, "seed": config.seed, "eval": final}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    model, emb, vocab, train_cfg = load_checkpoint(args.checkpoint)
    examples, data_vocab = load_dataset(args.data)
    if len(data_vocab) != emb.V:
        raise ConfigError(f"{args.data}: vocabulary size {len(data_vocab)} does not match "
                          f"checkpoint V={emb.V}")
    if args.distractor:
        examples = [inject_distractor(ex, vocab, args.distractor_seed) for ex in examples]
    needed = required_len(examples)
    if needed > model.cfg.max_len:
        raise ConfigError(f"{args.data}: sequences of length {needed} exceed the checkpoint's "
                          f"max_len {model.cfg.max_len}")
    result = evaluate(model, emb, examples, vocab, model.cfg.max_len,
                      train_cfg.get("max_answer_len", 8))
    result = {**result, "distractor": bool(args.distractor), "n": len(examples)}
    text = json.dumps(result, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compare
# ---------------------------------------------------------------------------


def mode_config(base: TrainConfig, mode: str, seed: int) -> TrainConfig:
    d = base.to_dict()
    d["seed"] = seed
    if mode in ("baseline", "pqat"):
        d["eps_delta"] = 0.0
        d["alpha"] = d["eps_ball"] = None
    if mode in ("baseline", "at"):
        d["eps_p"] = d["eps_q"] = 0.0
    cfg = TrainConfig.from_dict(d)
    if cfg.mode != mode:
        need = {"at": "--eps-delta", "pqat": "--eps-p/--eps-q", "both": "--eps-delta and --eps-p/--eps-q"}
        raise ConfigError(f"mode {mode!r} needs nonzero {need[mode]}")
    return cfg


def _compare_job(job: tuple) -> tuple:
    mode, seed, cfg_dict, train_path, test_path, dis_path, out_dir = job
    cfg = TrainConfig.from_dict(cfg_dict)
    try:
        final = run_training(cfg, Path(train_path), Path(out_dir),
                             {"clean": Path(test_path), "distractor": Path(dis_path)},
                             metrics_name=f"{mode}-s{seed}.jsonl", checkpoint_name=None)
        return mode, seed, final, None
    except Exception as exc:  # reported as a flagged partial result
        return mode, seed, None, f"{type(exc).__name__}: {exc}"


def summarize(results: dict[str, dict[int, dict]]) -> dict:
    """Mean and population std over seeds, per mode, eval set and metric."""
    out = {}
    for mode, by_seed in results.items():
        entry: dict = {"seeds": sorted(by_seed)}
        for split in ("clean", "distractor"):
            runs = [by_seed[s][split] for s in sorted(by_seed)]
            entry[split] = {}
            for metric in ("em", "f1", "acc"):
                if metric in runs[0]:
                    vals = [r[metric] for r in runs]
                    entry[split][metric] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                                            "values": vals}
        out[mode] = entry
    return out


def format_table(summary: dict) -> str:
    lines = [f"{'mode':10s} {'metric':6s} {'clean':>18s} {'distractor':>18s}"]
    for mode, entry in summary.items():
        for metric in ("em", "f1", "acc"):
            if metric not in entry["clean"]:
                continue
            c = entry["clean"][metric]
            d = entry["distractor"][metric]
            lines.append(f"{mode:10s} {metric:6s} {c['mean']:10.4f} ({c['std']:.4f}) "
                         f"{d['mean']:10.4f} ({d['std']:.4f})")
    return "\n".join(lines)


def cmd_compare(args) -> int:
    base = config_from_args(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    modes = args.modes.split(",")
    if len(seeds) < 2:
        raise ConfigError("--seeds needs at least 2 seeds")
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"--modes: unknown mode {m!r}; expected one of {MODES}")
    configs = {(m, s): mode_config(base, m, s) for m in modes for s in seeds}
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    test, vocab = load_dataset(args.test)
    dis_path = out_dir / "distractor.jsonl"
    save_dataset(dis_path, [inject_distractor(ex, vocab, args.distractor_seed) for ex in test], vocab,
                 {"source": str(args.test), "distractor_seed": args.distractor_seed})
    jobs = [(m, s, configs[m, s].to_dict(), str(args.train), str(args.test), str(dis_path), str(out_dir))
            for m, s in configs]
    if args.workers > 1:
        with ProcessPoolExecutor(args.workers) as pool:
            outcomes = list(pool.map(_compare_job, jobs))
    else:
        outcomes = [_compare_job(j) for j in jobs]
    results: dict[str, dict[int, dict]] = {m: {} for m in modes}
    failures = []
    for mode, seed, final, err in outcomes:
        if err is None:
            results[mode][seed] = final
        else:
            failures.append({"mode": mode, "seed": seed, "error": err})
    results = {m: r for m, r in results.items() if r}
    summary = {"modes": summarize(results), "failures": failures, "partial": bool(failures),
               "config": base.to_dict()}
    _write_json(out_dir / "summary.json", summary)
    print(format_table(summary["modes"]))
    for f in failures:
        print(f"FAILED {f['mode']} seed {f['seed']}: {f['error']}", file=sys.stderr)
    return EXIT_RUNTIME if failures else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqat", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("task", choices=("span", "choice"))
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--n-pairs", type=int, default=4)
    g.add_argument("--m", type=int, default=4, help="options per question (choice task)")
    g.add_argument("--vocab-size", type=int, default=43)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--distractor", action="store_true", help="append a distractor to every example")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data", nargs="*", help="datasets scored after every epoch")
    t.add_argument("--out-dir", required=True)
    add_train_flags(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--distractor", action="store_true")
    e.add_argument("--distractor-seed", type=int, default=DISTRACTOR_SEED)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="train every mode over several seeds and tabulate")
    c.add_argument("--train", required=True)
    c.add_argument("--test", required=True)
    c.add_argument("--out-dir", required=True)
    c.add_argument("--modes", default="baseline,at,pqat")
    c.add_argument("--seeds", default="0,1,2,3")
    c.add_argument("--workers", type=int, default=1)
    c.add_argument("--distractor-seed", type=int, default=DISTRACTOR_SEED)
    add_train_flags(c, {"eps_delta": 1e-2})
    c.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"error: {exc} {json.dumps(exc.diagnostics)}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
