"""``mpq-forge`` command line interface.

Exit codes: 0 success, 2 infeasible budget, 3 config error, 4 divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INFEASIBLE = 2
EXIT_CONFIG = 3
EXIT_DIVERGENCE = 4


def _bits(text: str) -> list[int]:
    try:
        return [int(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpq-forge", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--out-dir", default="runs/default", help="artifact directory")
        sp.add_argument("--bits", type=_bits, help="override run.bits, e.g. 2,3,4,8")
        sp.add_argument("--alpha", type=float, help="override search.alpha")
        sp.add_argument("--budget-bitops", type=int, help="absolute BitOps limit")
        sp.add_argument("--budget-size-bits", type=int, help="absolute weight-size limit in bits")
        sp.add_argument("--force", action="store_true", help="rerun even if the record is up to date")

    sp = sub.add_parser("train-indicators", help="pretrain and jointly train the importance indicators")
    common(sp)

    sp = sub.add_parser("search", help="solve the allocation ILP from an indicator report (no data needed)")
    common(sp, config_required=False)
    sp.add_argument("--indicators", required=True, help="indicator report file")
    sp.add_argument("--stats", help="layer stats file (default: stats.txt next to the report)")
    sp.add_argument("--bitops-level", type=float, default=0.0, help="BitOps limit as a uniform bit level")
    sp.add_argument("--reversed", action="store_true", help="maximize summed importance (ablation)")

    sp = sub.add_parser("finetune", help="quantization-aware fine-tuning under a policy")
    common(sp)
    sp.add_argument("--policy", required=True)

    sp = sub.add_parser("eval", help="evaluate fine-tuned weights")
    common(sp)
    sp.add_argument("--weights", required=True)

    sp = sub.add_parser("run", help="full pipeline")
    common(sp)
    sp.add_argument("--reversed", action="store_true")

    sp = sub.add_parser("ablate-reverse", help="routine vs reversed allocation sharing one indicator report")
    common(sp)
    return p


def _apply_overrides(cfg, args):
    from .config import ConfigError
    from .indicators import check_bits

    if args.seed is not None:
        cfg.run.seed = args.seed
    if args.bits is not None:
        try:
            cfg.run.bits = list(check_bits(args.bits))
        except ValueError as e:
            raise ConfigError(f"--bits: {e}") from None
    if args.alpha is not None:
        if args.alpha < 0:
            raise ConfigError("--alpha must be non-negative")
        cfg.search.alpha = args.alpha
    if args.budget_bitops is not None:
        cfg.search.budget_bitops = args.budget_bitops
    if args.budget_size_bits is not None:
        cfg.search.budget_size_bits = args.budget_size_bits
    return cfg


def _load(args):
    from .config import load_config

    return _apply_overrides(load_config(args.config), args)


def cmd_search(args) -> int:
    # imports stay within the search stage: no dataset code is loaded
    from .config import ConfigError
    from .search import search_files

    alpha, level, bitops, size = 1.0, args.bitops_level, args.budget_bitops or 0, args.budget_size_bits or 0
    reversed = args.reversed
    if args.config:
        cfg = _load(args)
        alpha = cfg.search.alpha
        bitops = bitops or cfg.search.budget_bitops
        size = size or cfg.search.budget_size_bits
        level = level or cfg.search.bitops_level
        reversed = reversed or cfg.search.reversed
    elif args.alpha is not None:
        alpha = args.alpha
    if alpha < 0:
        raise ConfigError("--alpha must be non-negative")
    indicators = Path(args.indicators)
    stats = Path(args.stats) if args.stats else indicators.parent / "stats.txt"
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        policy = search_files(indicators, stats, alpha, out / "policy.txt", reversed=reversed,
                              budget_bitops=bitops, budget_size_bits=size, bitops_level=level)
    except FileNotFoundError as e:
        raise ConfigError(str(e)) from None
    except ValueError as e:
        raise ConfigError(str(e)) from None
    print(policy.to_text(), end="")
    print(f"# solver wall time: {policy.wall_time:.4f} s")
    return EXIT_OK


def cmd_train_indicators(args) -> int:
    from .pipeline import RunRecord, _prepare_shared, load_dataset

    cfg = _load(args)
    out = Path(args.out_dir)
    record = RunRecord(cfg.digest(), cfg.run.seed, "indicators")
    _prepare_shared(cfg, load_dataset(cfg), cfg.run.seed, out, record, out)
    record.complete = True
    record.save(out / "indicators_record.json")
    print(f"indicator report: {out / 'indicators.txt'}")
    return EXIT_OK


def _pretrained(cfg, dataset, out: Path):
    from .pipeline import load_weights, make_model, pretrain, save_weights

    model = make_model(cfg, dataset, cfg.run.seed)
    path = out / "pretrained.npz"
    if path.exists():
        load_weights(path, model)
    else:
        out.mkdir(parents=True, exist_ok=True)
        pretrain(model, dataset, cfg, cfg.run.seed)
        save_weights(path, model)
    return model


def cmd_finetune(args) -> int:
    from .allocator import Policy
    from .pipeline import load_dataset, finetune_with_policy, save_weights

    cfg = _load(args)
    out = Path(args.out_dir)
    dataset = load_dataset(cfg)
    model = _pretrained(cfg, dataset, out)
    policy = Policy.load(args.policy)
    result = finetune_with_policy(model, policy, dataset, cfg, cfg.run.seed)
    save_weights(out / "finetuned.npz", result.model, result.pairs)
    print(json.dumps({"top1": result.top1, "weights": str(out / "finetuned.npz")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import evaluate, load_dataset, load_weights, make_model

    cfg = _load(args)
    dataset = load_dataset(cfg)
    model = make_model(cfg, dataset, cfg.run.seed)
    pairs = load_weights(args.weights, model)
    print(json.dumps({"top1": evaluate(model, pairs, dataset)}))
    return EXIT_OK


def cmd_run(args) -> int:
    from .pipeline import run_pipeline

    cfg = _load(args)
    record = run_pipeline(cfg, args.out_dir, force=args.force, reversed=args.reversed or None)
    print(json.dumps({"record": str(Path(args.out_dir) / "record.json"),
                      "top1": record.stage("finetune")["metrics"]["top1"]}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .pipeline import ablate_reverse

    cfg = _load(args)
    seeds = [args.seed] if args.seed is not None else None
    summary = ablate_reverse(cfg, args.out_dir, force=args.force, seeds=seeds)
    print(json.dumps(summary["mean_top1"], sort_keys=True))
    return EXIT_OK


COMMANDS = {
    "train-indicators": cmd_train_indicators,
    "search": cmd_search,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "run": cmd_run,
    "ablate-reverse": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .allocator import Infeasible
    from .config import ConfigError
    from .indicators import DivergenceError

    try:
        return COMMANDS[args.command](args)
    except Infeasible as e:
        print(f"mpq-forge: infeasible budget: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except ConfigError as e:
        print(f"mpq-forge: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"mpq-forge: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
