"""Command-line entry point: ``milbench <subcommand>``.

Exit codes: 0 ok, 1 usage, 2 IO failure, 3 data/config mismatch.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .bayes import oracle_scores
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import DataMismatchError, MilbenchError, ParameterError
from .experiment import (ExperimentConfig, ResultRow, append_rows, load_config, make_test_set, read_rows,
                         run_sweep, split_for, summary, train_pool, write_plot_data)
from .metrics import (MetricReport, auprc, auroc, centered_gaussian_attention, instance_level_report,
                      write_reports_csv, write_summary_json)
from .model import ModelConfig, predict, train
from .synthgen import GeneratorParams, check_consistent, read_bags, write_bags

log = logging.getLogger("milbench")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_MISMATCH = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _experiment_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if getattr(args, "out", None):
        cfg = replace(cfg, output_dir=str(args.out))
    if getattr(args, "threads", None):
        cfg = replace(cfg, threads=args.threads)
    return cfg


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps({"version": __version__, **payload}, indent=2, sort_keys=True) + "\n")


def cmd_generate(args) -> int:
    cfg = _experiment_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ext = "." + args.format
    r = cfg.generator.r
    write_bags(out / f"test{ext}", make_test_set(cfg), r)
    n = args.pool_size or cfg.sizes[-1]
    files = {"test": f"test{ext}"}
    for seed in cfg.seeds:
        train_set, val_set = split_for(cfg, train_pool(cfg, seed, n), seed, n)
        write_bags(out / f"seed{seed}_train{ext}", train_set, r)
        write_bags(out / f"seed{seed}_val{ext}", val_set, r)
        files[f"seed{seed}"] = [f"seed{seed}_train{ext}", f"seed{seed}_val{ext}"]
    _write_manifest(out / "manifest.json", {
        "generator": cfg.generator.to_dict(), "seeds": list(cfg.seeds), "data_seed": cfg.data_seed,
        "pool_size": n, "test_size": cfg.test_size, "train_fraction": cfg.train_fraction,
        "config_hash": cfg.hash(), "files": files})
    print(f"wrote {len(files)} dataset groups to {out}")
    return EXIT_OK


def _generator_for(data: Path, args) -> GeneratorParams:
    if getattr(args, "config", None):
        return load_config(args.config).generator
    manifest = Path(args.manifest) if getattr(args, "manifest", None) else data.parent / "manifest.json"
    if manifest.exists():
        return GeneratorParams.from_dict(json.loads(manifest.read_text())["generator"])
    return GeneratorParams()


def cmd_bayes(args) -> int:
    data = Path(args.data)
    bags, r = read_bags(data)
    params = _generator_for(data, args)
    if r != params.r:
        raise DataMismatchError(f"dataset segment length r={r}, params r={params.r}")
    check_consistent(bags, params)
    scores = oracle_scores(bags, params)
    y = [b.label for b in bags]
    row = ResultRow("bayes", "oracle", 0, args.seed or 0, auroc(scores, y), auprc(scores, y), 0.0)
    if args.out:
        append_rows(args.out, [row])
    print(f"bayes oracle: AUROC {row.test_auroc:.4f}  AUPRC {row.test_auprc:.4f}  ({len(bags)} bags)")
    return EXIT_OK


def cmd_train(args) -> int:
    train_set, _ = read_bags(args.train)
    val_set, _ = read_bags(args.val)
    model_kw = {}
    if args.config:
        model_kw = dict(load_config(args.config).model)
    for flag, key in (("epochs", "epochs"), ("lr", "lr"), ("reg", "reg_strength"), ("reg_kind", "reg_kind"),
                      ("batch_size", "batch_size"), ("tm_width", "tm_width"), ("attn_hidden", "attn_hidden")):
        if getattr(args, flag) is not None:
            model_kw[key] = getattr(args, flag)
    cfg = ModelConfig(ordering=args.ordering, pooling=args.pooling, init_seed=args.seed or 0, **model_kw)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = train(train_set, val_set, cfg, log_path=out / "train_log.csv")
    extra = {}
    if args.test:
        test, _ = read_bags(args.test)
        probs = predict(cfg, ckpt.params, test)
        y = [b.label for b in test]
        extra = {"test_auroc": auroc(probs, y), "test_auprc": auprc(probs, y)}
    save_checkpoint(out / "checkpoint.bin", ckpt, cfg, **extra)
    msg = f"epoch {ckpt.epoch}: train AUROC {ckpt.train_auroc:.4f}, val AUROC {ckpt.val_auroc:.4f}"
    if extra:
        msg += f", test AUROC {extra['test_auroc']:.4f}"
    print(msg + ("" if ckpt.constrained else " (no epoch met val < train)"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _experiment_config(args)
    rows = run_sweep(cfg, resume=args.resume)
    print(json.dumps(summary(rows), indent=2))
    return EXIT_OK


def eval_attention(bags, ckpt_path=None, gaussian: bool = False, rel_width: float = 0.25) -> list[MetricReport]:
    reports = []
    labels = [b.label for b in bags]
    inst = [b.instance_labels for b in bags]
    if ckpt_path is not None:
        cfg, ckpt, manifest = load_checkpoint(ckpt_path)
        probs, attn = predict(cfg, ckpt.params, bags, with_attention=True)
        if attn is None:
            if not gaussian:
                raise ParameterError(f"{cfg.pooling}/{cfg.ordering} defines no attention; "
                                     "pass --gaussian-baseline to evaluate the position baseline")
        else:
            rep = instance_level_report(attn, inst, labels)
            reports.append(MetricReport("test", cfg.init_seed, auroc(probs, labels), auprc(probs, labels),
                                        rep.attention_correctness, rep.instance_auroc, rep.instance_auprc,
                                        method=cfg.name))
    if gaussian:
        attn = [centered_gaussian_attention(b.size, rel_width) for b in bags]
        rep = instance_level_report(attn, inst, labels)
        reports.append(MetricReport("test", 0, attention_correctness=rep.attention_correctness,
                                    instance_auroc=rep.instance_auroc, instance_auprc=rep.instance_auprc,
                                    method=f"centered-gaussian-{rel_width:g}"))
    if not reports:
        raise ParameterError("nothing to evaluate: give --checkpoint and/or --gaussian-baseline")
    return reports


def cmd_eval_attention(args) -> int:
    bags, _ = read_bags(args.data)
    reports = eval_attention(bags, args.checkpoint, args.gaussian_baseline, args.rel_width)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_reports_csv(out / "attention_metrics.csv", reports)
    write_summary_json(out / "attention_summary.json", reports)
    for r in reports:
        print(f"{r.method}: correctness {r.attention_correctness:.4f}  instance AUROC {r.instance_auroc:.4f}  "
              f"instance AUPRC {r.instance_auprc:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = read_rows(args.results)
    if not rows:
        raise FileNotFoundError(f"no result rows in {args.results}")
    out = Path(args.out or Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    write_plot_data(out, rows)
    summ = summary(rows)
    (out / "summary.json").write_text(json.dumps(summ, indent=2, sort_keys=True) + "\n")
    for name, by_size in summ.items():
        pts = "  ".join(f"{s}: {v['mean_auroc']:.3f}±{v['std_auroc']:.3f}" for s, v in by_size.items())
        print(f"{name:22s} {pts}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="milbench", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write train/val/test bag files and a manifest")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--pool-size", type=int, help="bags per seed before the 4:1 split (default: largest size)")
    g.add_argument("--format", choices=("bin", "txt"), default="bin")
    g.set_defaults(func=cmd_generate)

    b = sub.add_parser("bayes", help="Bayes-oracle AUROC/AUPRC on a dataset file")
    b.add_argument("--data", required=True)
    b.add_argument("--config")
    b.add_argument("--manifest")
    b.add_argument("--seed", type=int)
    b.add_argument("--out", help="append the result row to this CSV")
    b.set_defaults(func=cmd_bayes)

    t = sub.add_parser("train", help="train one model with the checkpoint rule")
    t.add_argument("--train", required=True)
    t.add_argument("--val", required=True)
    t.add_argument("--test")
    t.add_argument("--config")
    t.add_argument("--pooling", default="mean", choices=("max", "mean", "abmil", "smap", "transmil"))
    t.add_argument("--ordering", default="embedding", choices=("embedding", "prediction"))
    t.add_argument("--lr", type=float)
    t.add_argument("--reg", type=float)
    t.add_argument("--reg-kind", choices=("l1", "l2"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--tm-width", type=int)
    t.add_argument("--attn-hidden", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", help="train-size sweep against the Bayes oracle")
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--resume", action="store_true")
    s.set_defaults(func=cmd_sweep)

    e = sub.add_parser("eval-attention", help="instance-level attention metrics on positive bags")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--gaussian-baseline", action="store_true")
    e.add_argument("--rel-width", type=float, default=0.25)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval_attention)

    r = sub.add_parser("report", help="plot data and mean±std summary from results.csv")
    r.add_argument("--results", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except OSError as e:
        print(f"milbench: IO error: {e}", file=sys.stderr)
        return EXIT_IO
    except MilbenchError as e:
        print(f"milbench: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())
