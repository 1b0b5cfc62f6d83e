"""Command-line entry point exposing the full pipeline as subcommands.

Every command validates its RunConfig up front, writes a JSON report with the
config echoed for provenance, and exits nonzero on any error. The timestamp
is the single non-deterministic report field; PD_LOG controls log verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from .bpe import load_bpe
from .config import RunConfig
from .corpus import upsample
from .experiments import (
    learn_joint_bpe,
    load_corpora,
    model_config_from,
    perturbation_probe,
    plan_from,
    write_probe_csv,
)
from .model import load_checkpoint, save_checkpoint
from .synth import SynthSpec, generate
from .training import back_distill, derive_seed, dev_bleu, train_multilingual, train_teacher
from .traces import export_seqkd, export_topk, load_trace

log = logging.getLogger("polydistill")


class CliError(RuntimeError):
    pass


def _setup_logging() -> None:
    level = os.environ.get("PD_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%H:%M:%S",
    )


def _load_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "train.lambda": getattr(args, "lam", None),
        "train.tau": getattr(args, "tau", None),
        "train.check_every": getattr(args, "check_every", None),
        "train.topk": getattr(args, "topk", None),
        "train.seed": getattr(args, "seed", None),
        "train.token_budget": getattr(args, "token_budget", None),
        "train.warmup_steps": getattr(args, "warmup", None),
        "decode.beam": getattr(args, "beam", None),
        "decode.alpha": getattr(args, "alpha", None),
    }
    return config.apply_overrides(overrides)


def _report(path: Path | None, command: str, config: RunConfig | None, payload: dict) -> dict:
    body = {"command": command, "config": config.to_dict() if config else None, **payload}
    run_id = hashlib.sha256(json.dumps(body, sort_keys=True, default=str).encode()).hexdigest()[:16]
    body = {"run_id": run_id, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"), **body}
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return body


def _pair_index(config: RunConfig, key: str) -> int:
    for idx, pair in enumerate(config.data.pairs):
        if pair.key == key:
            return idx
    raise CliError(f"pair {key!r} not in config; have {[p.key for p in config.data.pairs]}")


def cmd_synth(args) -> None:
    spec = SynthSpec(
        codes=tuple(args.pairs.split(",")),
        transforms=tuple(args.transforms.split(",")) if args.transforms else None,
        train_size=args.train_size,
        dev_size=args.dev_size,
        test_size=args.test_size,
        base_vocab=args.vocab,
        min_len=args.min_len,
        max_len=args.max_len,
        tgt_code=args.tgt_code,
        seed=args.seed if args.seed is not None else 7,
    )
    manifest = generate(spec, args.out_dir)
    _report(Path(args.out_dir) / "synth_report.json", "synth", None, {"manifest": manifest})
    print(f"wrote {len(manifest['pairs'])} pairs under {args.out_dir}")


def cmd_prepare_data(args) -> None:
    config = _load_config(args)
    bpe = learn_joint_bpe(config)
    payload = {"merges": len(bpe.merges), "vocab_size": bpe.vocab_size, "path": str(config.bpe_path())}
    _report(Path(config.data.data_dir) / "bpe_report.json", "prepare-data", config, payload)
    print(f"BPE model: {payload['merges']} merges, vocab {payload['vocab_size']}")


def cmd_train_teacher(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    idx = _pair_index(config, args.pair)
    train_corpus = load_corpora(config, bpe, "train")[idx]
    dev_corpus = load_corpora(config, bpe, "dev")[idx]
    mcfg = model_config_from(config, bpe.vocab_size, config.train.dropout_individual)
    steps = args.steps if args.steps else config.train.total_steps
    plan = plan_from(config, config.train.dropout_individual, steps,
                     seed=derive_seed(config.train.seed, f"teacher:{args.pair}"))
    result = train_teacher(mcfg, plan, train_corpus, dev_corpus, bpe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "model.ckpt")
    payload = {"pair": args.pair, "dev_bleu": result.best_avg_bleu,
               "best_step": result.best_step, "checkpoint": str(out / "model.ckpt"),
               **result.report}
    _report(out / "report.json", "train-teacher", config, payload)
    print(f"teacher {args.pair}: dev BLEU {result.best_avg_bleu:.2f} (best step {result.best_step})")


def cmd_export_topk(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    idx = _pair_index(config, args.pair)
    corpus = load_corpora(config, bpe, "train")[idx]
    teacher = load_checkpoint(args.teacher)
    if teacher.config.vocab_size != bpe.vocab_size:
        raise CliError(
            f"teacher vocab {teacher.config.vocab_size} != BPE vocab {bpe.vocab_size}"
        )
    trace = export_topk(teacher, corpus, config.train.topk, args.out)
    payload = {"pair": args.pair, "k": trace.k, "examples": trace.num_examples, "path": str(args.out)}
    _report(Path(str(args.out) + ".report.json"), "export-topk", config, payload)
    print(f"trace for {args.pair}: {trace.num_examples} examples at K={trace.k}")


def cmd_train_multi(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    train_c = load_corpora(config, bpe, "train")
    dev_c = load_corpora(config, bpe, "dev")
    dataset = upsample(list(train_c.values()), derive_seed(config.train.seed, "upsample"))
    mcfg = model_config_from(config, bpe.vocab_size, config.train.dropout_multilingual)
    steps = args.steps if args.steps else config.train.total_steps
    plan = plan_from(config, config.train.dropout_multilingual, steps)

    traces = None
    teacher_bleus = None
    if args.mode == "distill":
        if not args.teachers_dir or not args.traces_dir:
            raise CliError("--mode distill requires --teachers-dir and --traces-dir")
        traces = {}
        teacher_bleus = {}
        for idx, pair in enumerate(config.data.pairs):
            trace_path = Path(args.traces_dir) / f"{pair.key}.trace"
            traces[idx] = load_trace(trace_path, expected_k=config.train.topk)
            report_path = Path(args.teachers_dir) / pair.key / "report.json"
            report = json.loads(report_path.read_text(encoding="utf-8"))
            teacher_bleus[idx] = float(report["dev_bleu"])
    result = train_multilingual(
        mcfg, plan, dataset, dev_c, bpe, mode=args.mode,
        traces=traces, teacher_dev_bleus=teacher_bleus,
        force_flags_off=args.force_flags_off,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "model.ckpt")
    payload = {"mode": args.mode, "checkpoint": str(out / "model.ckpt"), **result.report}
    _report(out / "report.json", "train-multi", config, payload)
    print(f"multilingual ({args.mode}): best avg dev BLEU {result.best_avg_bleu:.2f} "
          f"at step {result.best_step}")


def cmd_evaluate(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    idx = _pair_index(config, args.pair)
    corpus = load_corpora(config, bpe, args.split)[idx]
    model = load_checkpoint(args.model)
    plan = plan_from(config, config.train.dropout_multilingual, total_steps=1)
    score = dev_bleu(model, corpus, bpe, plan, cap=args.cap)
    payload = {"pair": args.pair, "split": args.split, "bleu": score,
               "sentences": len(corpus.examples)}
    out = Path(args.out) if args.out else Path(f"eval.{args.pair}.{args.split}.json")
    _report(out, "evaluate", config, payload)
    print(f"BLEU {score:.2f} on {args.pair} {args.split} ({payload['sentences']} sentences)")


def cmd_back_distill(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    idx = _pair_index(config, args.pair)
    train_corpus = load_corpora(config, bpe, "train")[idx]
    dev_corpus = load_corpora(config, bpe, "dev")[idx]
    multi = load_checkpoint(args.multi)
    init = load_checkpoint(args.init) if args.init else None
    mcfg = model_config_from(config, bpe.vocab_size, config.train.dropout_individual)
    steps = args.steps if args.steps else config.train.total_steps
    plan = plan_from(config, config.train.dropout_individual, steps,
                     seed=derive_seed(config.train.seed, f"back:{args.pair}"))
    result, _ = back_distill(multi, train_corpus, dev_corpus, bpe, mcfg, plan, init_model=init)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / "model.ckpt")
    payload = {"pair": args.pair, "dev_bleu": result.best_avg_bleu,
               "checkpoint": str(out / "model.ckpt"), **result.report}
    _report(out / "report.json", "back-distill", config, payload)
    print(f"back-distilled {args.pair}: dev BLEU {result.best_avg_bleu:.2f}")


def cmd_export_seqkd(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    idx = _pair_index(config, args.pair)
    corpus = load_corpora(config, bpe, "train")[idx]
    teacher = load_checkpoint(args.teacher)
    out_src = Path(args.out_prefix + ".src")
    out_tgt = Path(args.out_prefix + ".tgt")
    report = export_seqkd(
        teacher, corpus, config.decode.beam, config.decode.alpha,
        config.decode.max_len, out_src, out_tgt, bpe,
    )
    _report(Path(args.out_prefix + ".report.json"), "export-seqkd", config, report)
    print(f"seq-KD corpus for {args.pair}: {report['sentences']} sentences, "
          f"{len(report['truncated_lines'])} truncated")


def cmd_perturb(args) -> None:
    config = _load_config(args)
    bpe = load_bpe(config.bpe_path())
    dev_c = load_corpora(config, bpe, "dev")
    model = load_checkpoint(args.model)
    plan = plan_from(config, config.train.dropout_multilingual, total_steps=1)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    seed = args.seed if args.seed is not None else config.train.seed
    rows = perturbation_probe(model, dev_c, bpe, plan, sigmas, derive_seed(seed, "perturb"))
    write_probe_csv(rows, args.out)
    _report(Path(str(args.out) + ".report.json"), "perturb", config,
            {"model": str(args.model), "rows": rows})
    print(f"perturbation probe over {len(sigmas)} sigmas written to {args.out}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML run configuration")
    p.add_argument("--lambda", dest="lam", type=float, default=None,
                   help="distillation coefficient in [0, 1]")
    p.add_argument("--tau", type=float, default=None, help="flag threshold in BLEU points")
    p.add_argument("--check-every", dest="check_every", type=int, default=None)
    p.add_argument("--topk", type=int, default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None, help="length penalty exponent")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--token-budget", dest="token_budget", type=int, default=None)
    p.add_argument("--warmup", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polydistill",
        description="Selective multi-teacher distillation for multilingual translation",
    )
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate synthetic cipher-language corpora")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--pairs", required=True, help="comma list of source language codes")
    p.add_argument("--transforms", help="comma list of reorder rules, one per pair")
    p.add_argument("--train-size", type=int, default=20000)
    p.add_argument("--dev-size", type=int, default=1000)
    p.add_argument("--test-size", type=int, default=1000)
    p.add_argument("--vocab", type=int, default=160)
    p.add_argument("--min-len", type=int, default=4)
    p.add_argument("--max-len", type=int, default=12)
    p.add_argument("--tgt-code", default="en")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare-data", help="learn the joint BPE model")
    _add_common(p)
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train-teacher", help="train one individual model")
    _add_common(p)
    p.add_argument("--pair", required=True, help="pair key like de-en")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("export-topk", help="export a teacher's top-K trace")
    _add_common(p)
    p.add_argument("--pair", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_topk)

    p = sub.add_parser("train-multi", help="train the multilingual student")
    _add_common(p)
    p.add_argument("--mode", choices=("baseline", "distill"), default="distill")
    p.add_argument("--teachers-dir", help="directory of per-pair teacher runs")
    p.add_argument("--traces-dir", help="directory of per-pair trace files")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--force-flags-off", action="store_true",
                   help="keep every distillation flag False (diagnostics)")
    p.set_defaults(func=cmd_train_multi)

    p = sub.add_parser("evaluate", help="BLEU of a checkpoint on one pair/split")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--pair", required=True)
    p.add_argument("--split", choices=("train", "dev", "test"), default="test")
    p.add_argument("--cap", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("back-distill", help="distill the multilingual model back into one pair")
    _add_common(p)
    p.add_argument("--pair", required=True)
    p.add_argument("--multi", required=True, help="multilingual checkpoint")
    p.add_argument("--init", help="individual checkpoint to fine-tune from")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_back_distill)

    p = sub.add_parser("export-seqkd", help="write a beam-decoded pseudo corpus")
    _add_common(p)
    p.add_argument("--pair", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_export_seqkd)

    p = sub.add_parser("perturb", help="parameter-noise generalization probe")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--sigmas", default="0.0,0.05,0.1,0.15,0.2,0.25,0.3")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_perturb)

    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        args.func(args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
