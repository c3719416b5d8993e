"""Command-line entry point: ``cosparse <verb> [flags]``.

Exit codes: 0 success, 2 usage or config error, 3 infeasible or unmet
budget, 4 unreadable or corrupt checkpoint.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint, config as runcfg, theory
from .importance import CalibrationBatch, estimate_importance, write_importance_csv
from .model import Model, coupled_pairs, param_count
from .numerics import Rng
from .sparsifier import BudgetInfeasible, write_removal_csv
from .trainer import CharCorpus, prune_pretrained, train, write_log_csv

EXIT_OK, EXIT_USAGE, EXIT_BUDGET, EXIT_CORRUPT = 0, 2, 3, 4

log = logging.getLogger("cosparse")


class UsageError(Exception):
    pass


def _load_config(path) -> runcfg.RunConfig:
    return runcfg.bundled_toy() if path is None else runcfg.load(path)


def _corpus(cfg: runcfg.RunConfig) -> CharCorpus:
    frac = cfg.train.get("eval_fraction", 0.1)
    if cfg.corpus_path is None:
        return CharCorpus.bundled(frac)
    try:
        text = Path(cfg.corpus_path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read corpus {cfg.corpus_path}: {exc}") from exc
    return CharCorpus(text, frac)


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from exc


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from exc


def _outputs(out_dir: Path, result, optimizer) -> str:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_log_csv(out_dir / "train_log.csv", result.log)
    write_removal_csv(out_dir / "removals.csv", result.reports)
    return checkpoint.save(out_dir / "model.ecsp", result.model, optimizer)


def _report_budget(result, schedule) -> int:
    final = param_count(result.model)
    print(f"final params: {final}")
    if schedule is None:
        return EXIT_OK
    print(f"target params: {schedule.target_params}")
    if not result.budget_met:
        print(f"budget not met: {final} > {schedule.target_params}", file=sys.stderr)
        return EXIT_BUDGET
    return EXIT_OK


# -- verbs ---------------------------------------------------------------------


def cmd_validate_theory(args) -> int:
    summaries = []
    for n in args.size:
        if n < 2:
            raise UsageError(f"--size must be >= 2, got {n}")
        if args.trials < 1:
            raise UsageError("--trials must be >= 1")
        s = theory.run_comparison(n, args.trials, args.seed, args.workers)
        summaries.append(s)
        print(f"n={n} trials={s.trials} avg_coupled={s.avg_err_coupled:.4f} "
              f"avg_individual={s.avg_err_individual:.4f} win_probability={s.win_probability:.4f}")
    theory.write_summary_csv(args.out, summaries)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    corpus = _corpus(cfg)
    model = Model(cfg.model_config(corpus.vocab), seed=cfg.model_seed)
    tc = cfg.train_config(param_count(model))
    result = train(model, corpus, tc)
    digest = _outputs(Path(args.out_dir), result, result.optimizer)
    print(f"checkpoint sha256: {digest}")
    return _report_budget(result, tc.schedule)


def cmd_prune(args) -> int:
    cfg = _load_config(args.config)
    model, _ = checkpoint.load(args.checkpoint)
    corpus = _corpus(cfg)
    if corpus.vocab > model.config.vocab:
        raise UsageError(f"corpus has {corpus.vocab} symbols but the checkpoint vocab is {model.config.vocab}")
    schedule = cfg.schedule(param_count(model))
    if schedule is None:
        raise UsageError("[sparsify] needs target_fraction or target_params for prune")
    t = cfg.train
    result = prune_pretrained(
        model, corpus, schedule, recovery_steps=cfg.sparsify.get("recovery_steps", 50),
        batch_size=t.get("batch_size", 4), seq_len=t.get("seq_len", 32), lr=cfg.sparsify.get("recovery_lr", 1e-3),
        seed=t.get("seed", 0), calib_size=t.get("calib_size", 8), eval_batches=t.get("eval_batches", 8))
    digest = _outputs(Path(args.out_dir), result, result.optimizer)
    print(f"checkpoint sha256: {digest}")
    return _report_budget(result, schedule)


def dimension_table(model: Model) -> list[tuple[int, str, str, int, int]]:
    return [(p.layer, p.pair_id, p.kind, model.original_dims.get(p.pair_id, p.inner_dim), p.inner_dim)
            for p in coupled_pairs(model)]


def cmd_inspect(args) -> int:
    model, _ = checkpoint.load(args.checkpoint)
    print(f"{'layer':>5}  {'pair':<10} {'kind':<4} {'original':>8} {'current':>8}")
    for layer, pid, kind, orig, cur in dimension_table(model):
        print(f"{layer:>5}  {pid:<10} {kind:<4} {orig:>8} {cur:>8}")
    print(f"total params: {param_count(model)}")
    if args.importance:
        cfg = _load_config(args.config)
        corpus = _corpus(cfg)
        t = cfg.train
        seq_len = min(t.get("seq_len", 32), model.config.max_seq_len)
        calib = CalibrationBatch(corpus.sample(t.get("calib_size", 8), seq_len, Rng(t.get("seed", 0))))
        calib.check_vocab(model.config.vocab)
        write_importance_csv(args.importance, estimate_importance(model, calib))
    return EXIT_OK


def cmd_ffn_bound(args) -> int:
    if len(args.dims) != 3:
        raise UsageError("--dims takes d_model,d_ffn,length")
    d_m, d_ffn, length = args.dims
    if min(d_m, d_ffn, length) < 2 or args.trials < 1:
        raise UsageError("dims must be >= 2 and --trials >= 1")
    rep = theory.ffn_bound_check(d_m, d_ffn, length, args.trials, args.seed)
    theory.write_bound_csv(args.out, rep)
    print(f"cases={rep.cases} violations={rep.violations} mean_spearman={rep.mean_spearman:.4f}")
    return EXIT_OK


def cmd_ffn_compare(args) -> int:
    cfg = _load_config(args.config)
    corpus = _corpus(cfg)
    if args.checkpoint:
        model, _ = checkpoint.load(args.checkpoint)
    else:
        model = Model(cfg.model_config(corpus.vocab), seed=cfg.model_seed)
        train(model, corpus, cfg.train_config(dense=True))
    levels = args.sparsity_list if args.sparsity_list is not None else list(cfg.theory.get("sparsity_levels", (0.3, 0.5)))
    if any(not 0.0 <= s < 1.0 for s in levels):
        raise UsageError("sparsity levels must lie in [0, 1)")
    seq_len = min(cfg.train.get("seq_len", 32), model.config.max_seq_len)
    batches = corpus.eval_batches(seq_len, cfg.train.get("batch_size", 4), cfg.train.get("eval_batches", 8))
    rows = theory.ffn_coupled_vs_uncoupled(model, levels, batches)
    theory.write_compare_csv(args.out, rows)
    for r in rows:
        print(f"sparsity={r.sparsity:g} coupled={r.coupled_loss:.4f} uncoupled={r.uncoupled_loss:.4f}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cosparse", description="Coupled structured sparsification of a toy transformer.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("validate-theory", help="coupled vs. individual single-pair removal error")
    p.add_argument("--size", type=_ints, default=[100], help="matrix size(s), comma separated")
    p.add_argument("--trials", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", default="theory_summary.csv")
    p.set_defaults(fn=cmd_validate_theory)

    for verb, fn, needs_ckpt in (("train", cmd_train, False), ("prune", cmd_prune, True)):
        p = sub.add_parser(verb)
        p.add_argument("--config", default=None, help="run config (default: bundled toy config)")
        if needs_ckpt:
            p.add_argument("--checkpoint", required=True)
        p.add_argument("--out-dir", required=True)
        p.set_defaults(fn=fn)

    p = sub.add_parser("inspect", help="per-pair inner dimensions of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--importance", default=None, help="also write per-pair importance to this CSV")
    p.add_argument("--config", default=None, help="calibration settings for --importance")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("ffn-bound", help="check the linearized FFN removal bound")
    p.add_argument("--dims", type=_ints, default=[32, 128, 16], help="d_model,d_ffn,length")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="ffn_bound.csv")
    p.set_defaults(fn=cmd_ffn_bound)

    p = sub.add_parser("ffn-compare", help="one-shot coupled vs. uncoupled FFN sparsification")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", default=None, help="use this model instead of training one")
    p.add_argument("--sparsity-list", type=_floats, default=None)
    p.add_argument("--out", default="ffn_compare.csv")
    p.set_defaults(fn=cmd_ffn_compare)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except checkpoint.CorruptCheckpoint as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except BudgetInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except (UsageError, runcfg.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
