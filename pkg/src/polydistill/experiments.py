"""End-to-end experiment pipelines over the synthetic cipher benchmark.

These functions glue the library stages together (data generation, joint BPE,
teacher training, trace export, baseline and distilled multilingual training,
test evaluation) so the CLI, the scripts, and the acceptance suite all drive
the exact same code.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

from .bpe import BpeModel, learn_bpe, load_bpe
from .config import PairSpec, RunConfig
from .corpus import LanguagePair, MultiDataset, ParallelCorpus, load_parallel, upsample
from .model import ModelConfig, TranslationModel, load_checkpoint, perturb, save_checkpoint
from .synth import SynthSpec, generate
from .training import (
    TrainPlan,
    TrainResult,
    dev_bleu,
    dev_loss,
    derive_seed,
    train_multilingual,
    train_teacher,
)
from .traces import TeacherTrace, export_topk, load_trace

log = logging.getLogger("polydistill")


def learn_joint_bpe(config: RunConfig) -> BpeModel:
    """Learn one merge table over every pair's train files, both sides."""
    corpora = []
    for pair in config.data.pairs:
        for side in ("src", "tgt"):
            path = config.pair_path(pair, "train", side)
            corpora.append(path.read_text(encoding="utf-8").splitlines())
    tag_codes = sorted({p.tgt for p in config.data.pairs})
    bpe = learn_bpe(corpora, config.data.bpe_merges, tag_codes=tag_codes)
    bpe.save(config.bpe_path())
    return bpe


def load_corpora(
    config: RunConfig, bpe: BpeModel, split: str
) -> dict[int, ParallelCorpus]:
    out: dict[int, ParallelCorpus] = {}
    for idx, pair in enumerate(config.data.pairs):
        lp = LanguagePair(idx, pair.src, pair.tgt)
        tag = pair.tgt if config.data.tag_sources else None
        out[idx] = load_parallel(
            config.pair_path(pair, split, "src"),
            config.pair_path(pair, split, "tgt"),
            lp,
            bpe,
            max_len=config.data.max_len,
            tgt_tag=tag,
        )
    return out


def model_config_from(config: RunConfig, vocab_size: int, dropout: float) -> ModelConfig:
    m = config.model
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=m.d_model,
        d_ff=m.d_ff,
        n_layers=m.n_layers,
        n_heads=m.n_heads,
        dropout=dropout,
        max_len=m.max_len,
    )


def plan_from(config: RunConfig, dropout: float, total_steps: int, seed: int | None = None) -> TrainPlan:
    t = config.train
    return TrainPlan(
        total_steps=total_steps,
        check_every=t.check_every,
        tau=t.tau,
        lam=t.lam,
        topk=t.topk,
        token_budget=t.token_budget,
        dropout=dropout,
        warmup_steps=t.warmup_steps,
        beam=config.decode.beam,
        alpha=config.decode.alpha,
        decode_max_len=config.decode.max_len,
        dev_cap=t.dev_cap,
        seed=t.seed if seed is None else seed,
    )


@dataclass
class BenchmarkSpec:
    """Everything a full synthetic benchmark run needs."""

    out_dir: Path
    synth: SynthSpec
    config: RunConfig
    teacher_steps: int
    multi_steps: int

    @property
    def data_dir(self) -> Path:
        return self.out_dir / "data"


def default_benchmark(out_dir: str | Path, scale: str = "acceptance") -> BenchmarkSpec:
    """Tuned benchmark presets.

    "acceptance": 4 pairs at 20k/1k/1k sentences, sized to finish on a
    multicore desktop CPU. "smoke": minutes-scale miniature for tests.
    """
    out_dir = Path(out_dir)
    if scale == "acceptance":
        synth = SynthSpec(
            codes=("aa", "bb", "cc", "dd"),
            train_size=20000,
            dev_size=1000,
            test_size=1000,
            base_vocab=80,
            min_len=3,
            max_len=8,
            seed=7,
        )
        # Teachers get enough steps to plateau (they are "pretrained" inputs
        # to the distillation loop); both students run the same matched
        # budget. check_every ~= two epochs: ~110 sentences/batch at this
        # budget makes an epoch ~180 steps.
        raw = {
            "data": {"data_dir": str(out_dir / "data"), "bpe_merges": 280, "max_len": 48,
                     "pairs": [{"src": c, "tgt": "en"} for c in synth.codes]},
            "model": {"d_model": 32, "d_ff": 128, "n_layers": 2, "n_heads": 4, "max_len": 48},
            "train": {"total_steps": 1000, "check_every": 350, "tau": 1.0, "lambda": 0.5,
                      "topk": 8, "token_budget": 800, "warmup_steps": 250,
                      "dropout_individual": 0.1, "dropout_multilingual": 0.1,
                      "dev_cap": 120, "seed": 1},
            "decode": {"beam": 4, "alpha": 1.0, "max_len": 20},
        }
        teacher_steps, multi_steps = 1500, 1000
    elif scale == "smoke":
        synth = SynthSpec(
            codes=("aa", "bb"),
            train_size=400,
            dev_size=60,
            test_size=60,
            base_vocab=40,
            min_len=3,
            max_len=7,
            seed=7,
        )
        raw = {
            "data": {"data_dir": str(out_dir / "data"), "bpe_merges": 120, "max_len": 48,
                     "pairs": [{"src": c, "tgt": "en"} for c in synth.codes]},
            "model": {"d_model": 32, "d_ff": 64, "n_layers": 1, "n_heads": 2, "max_len": 48},
            "train": {"total_steps": 120, "check_every": 40, "tau": 1.0, "lambda": 0.5,
                      "topk": 4, "token_budget": 400, "warmup_steps": 60,
                      "dropout_individual": 0.1, "dropout_multilingual": 0.1,
                      "dev_cap": 30, "seed": 1},
            "decode": {"beam": 2, "alpha": 1.0, "max_len": 16},
        }
        teacher_steps, multi_steps = 100, 120
    else:
        raise ValueError(f"unknown benchmark scale {scale!r}")
    return BenchmarkSpec(
        out_dir=out_dir,
        synth=synth,
        config=RunConfig.from_dict(raw),
        teacher_steps=teacher_steps,
        multi_steps=multi_steps,
    )


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _test_bleus(
    model: TranslationModel,
    corpora: dict[int, ParallelCorpus],
    bpe: BpeModel,
    plan: TrainPlan,
) -> dict[str, float]:
    return {
        c.pair.key: dev_bleu(model, c, bpe, plan, cap=None) for c in corpora.values()
    }


def run_benchmark(spec: BenchmarkSpec) -> dict:
    """Full pipeline: teachers, traces, baseline and distilled students, test BLEU.

    Returns (and writes) a summary comparing the three systems per pair, the
    desk-scale analogue of the paper-style result table.
    """
    t0 = time.time()
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    config = spec.config

    log.info("generating synthetic data in %s", spec.data_dir)
    generate(spec.synth, spec.data_dir)
    bpe = learn_joint_bpe(config)
    log.info("joint BPE learned: %d merges, vocab %d", len(bpe.merges), bpe.vocab_size)

    train_c = load_corpora(config, bpe, "train")
    dev_c = load_corpora(config, bpe, "dev")
    test_c = load_corpora(config, bpe, "test")

    teacher_plan = plan_from(config, config.train.dropout_individual, spec.teacher_steps)
    student_plan = plan_from(config, config.train.dropout_multilingual, spec.multi_steps)
    mcfg = model_config_from(config, bpe.vocab_size, config.train.dropout_individual)

    teachers: dict[int, TrainResult] = {}
    traces: dict[int, TeacherTrace] = {}
    teacher_bleus: dict[int, float] = {}
    teacher_test: dict[str, float] = {}
    for idx in sorted(train_c):
        key = train_c[idx].pair.key
        seed = derive_seed(config.train.seed, f"teacher:{key}")
        plan = dataclasses.replace(teacher_plan, seed=seed)
        log.info("training teacher %s (%d steps)", key, plan.total_steps)
        result = train_teacher(mcfg, plan, train_c[idx], dev_c[idx], bpe)
        tdir = out / "teachers" / key
        tdir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(result.model, tdir / "model.ckpt")
        _write_json(tdir / "report.json", result.report)
        teachers[idx] = result
        teacher_bleus[idx] = result.best_avg_bleu
        trace_path = out / "traces" / f"{key}.trace"
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        traces[idx] = export_topk(result.model, train_c[idx], config.train.topk, trace_path)
        teacher_test[key] = dev_bleu(result.model, test_c[idx], bpe, student_plan, cap=None)
        log.info("teacher %s: dev %.2f, test %.2f", key, teacher_bleus[idx], teacher_test[key])

    dataset = upsample(list(train_c.values()), derive_seed(config.train.seed, "upsample"))

    log.info("training multilingual baseline (%d steps)", spec.multi_steps)
    baseline = train_multilingual(mcfg, student_plan, dataset, dev_c, bpe, mode="baseline")
    bdir = out / "multi_baseline"
    bdir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(baseline.model, bdir / "model.ckpt")
    _write_json(bdir / "report.json", baseline.report)

    log.info("training multilingual distilled (%d steps)", spec.multi_steps)
    distilled = train_multilingual(
        mcfg, student_plan, dataset, dev_c, bpe, mode="distill",
        traces=traces, teacher_dev_bleus=teacher_bleus,
    )
    ddir = out / "multi_distill"
    ddir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(distilled.model, ddir / "model.ckpt")
    _write_json(ddir / "report.json", distilled.report)

    baseline_test = _test_bleus(baseline.model, test_c, bpe, student_plan)
    distilled_test = _test_bleus(distilled.model, test_c, bpe, student_plan)

    rows = []
    for idx in sorted(train_c):
        key = train_c[idx].pair.key
        delta = distilled_test[key] - baseline_test[key]
        rows.append({
            "pair": key,
            "teacher_test_bleu": teacher_test[key],
            "baseline_test_bleu": baseline_test[key],
            "distilled_test_bleu": distilled_test[key],
            "delta": delta,
        })
    deltas = [r["delta"] for r in rows]
    summary = {
        "config": config.to_dict(),
        "teacher_steps": spec.teacher_steps,
        "multi_steps": spec.multi_steps,
        "vocab_size": bpe.vocab_size,
        "rows": rows,
        "pairs_improved": sum(d >= 0 for d in deltas),
        "pairs_strictly_improved": sum(d > 0 for d in deltas),
        "mean_delta": sum(deltas) / len(deltas),
        "runtime_seconds": time.time() - t0,
    }
    _write_json(out / "summary.json", summary)
    log.info(
        "benchmark done in %.0fs: %d/%d pairs improved, mean delta %.2f",
        summary["runtime_seconds"], summary["pairs_improved"], len(rows), summary["mean_delta"],
    )
    return summary


def run_topk_sweep(spec: BenchmarkSpec, ks: list[int | str]) -> dict:
    """Distill one pair with varying K and report dev BLEU per K.

    K may be the string "V" to mean the full vocabulary. Uses the first
    configured pair and otherwise the spec's training settings.
    """
    out = spec.out_dir
    out.mkdir(parents=True, exist_ok=True)
    config = spec.config
    if not spec.data_dir.joinpath("manifest.json").exists():
        generate(spec.synth, spec.data_dir)
    if not config.bpe_path().exists():
        learn_joint_bpe(config)
    bpe = load_bpe(config.bpe_path())
    train_c = load_corpora(config, bpe, "train")
    dev_c = load_corpora(config, bpe, "dev")
    idx = sorted(train_c)[0]
    key = train_c[idx].pair.key

    mcfg = model_config_from(config, bpe.vocab_size, config.train.dropout_individual)
    teacher_plan = dataclasses.replace(
        plan_from(config, config.train.dropout_individual, spec.teacher_steps),
        seed=derive_seed(config.train.seed, f"teacher:{key}"),
    )
    teacher = train_teacher(mcfg, teacher_plan, train_c[idx], dev_c[idx], bpe)

    solo = ParallelCorpus(LanguagePair(0, train_c[idx].pair.src_code, train_c[idx].pair.tgt_code),
                          train_c[idx].examples)
    dataset = upsample([solo], derive_seed(config.train.seed, "upsample"))
    results = []
    for k_spec in ks:
        k = bpe.vocab_size if k_spec == "V" else int(k_spec)
        trace_path = out / f"trace.k{k}.bin"
        trace = export_topk(teacher.model, solo, k, trace_path)
        plan = dataclasses.replace(
            plan_from(config, config.train.dropout_multilingual, spec.multi_steps), topk=k
        )
        run = train_multilingual(
            mcfg, plan, dataset, {0: dev_c[idx]}, bpe, mode="distill",
            traces={0: trace}, teacher_dev_bleus={0: teacher.best_avg_bleu},
        )
        results.append({"k": k, "k_spec": str(k_spec), "dev_bleu": run.best_avg_bleu})
        log.info("top-K sweep: K=%s -> dev BLEU %.2f", k_spec, run.best_avg_bleu)
    table = {
        "pair": key,
        "teacher_dev_bleu": teacher.best_avg_bleu,
        "vocab_size": bpe.vocab_size,
        "results": results,
    }
    _write_json(out / "topk_sweep.json", table)
    return table


def perturbation_probe(
    model: TranslationModel,
    dev_corpora: dict[int, ParallelCorpus],
    bpe: BpeModel,
    plan: TrainPlan,
    sigmas: list[float],
    seed: int,
) -> list[dict]:
    """Loss/BLEU degradation under parameter noise theta + mean(theta)*N(0, s^2).

    Loss is evaluated in float64 so small-sigma differences are resolved.
    Returns one row per sigma; sigma=0 must reproduce the unperturbed model.
    """
    rows = []
    for sigma in sigmas:
        noisy = perturb(model, sigma, seed)
        losses = []
        tokens = []
        bleus = {}
        for idx in sorted(dev_corpora):
            c = dev_corpora[idx]
            loss, count = dev_loss(noisy, c, cap=plan.dev_cap, float64=True)
            losses.append(loss * count)
            tokens.append(count)
            bleus[c.pair.key] = dev_bleu(noisy, c, bpe, plan, cap=plan.dev_cap)
        row = {
            "sigma": sigma,
            "dev_loss": sum(losses) / sum(tokens),
            "dev_bleu": sum(bleus.values()) / len(bleus),
            "per_pair_bleu": bleus,
        }
        rows.append(row)
        log.info("perturb sigma=%.2f: loss %.4f, BLEU %.2f", sigma, row["dev_loss"], row["dev_bleu"])
    return rows


def write_probe_csv(rows: list[dict], path: str | Path) -> None:
    pair_keys = sorted(rows[0]["per_pair_bleu"]) if rows else []
    lines = ["sigma,dev_loss,dev_bleu" + "".join(f",bleu_{k}" for k in pair_keys)]
    for r in rows:
        extras = "".join(f",{r['per_pair_bleu'][k]!r}" for k in pair_keys)
        lines.append(f"{r['sigma']!r},{r['dev_loss']!r},{r['dev_bleu']!r}" + extras)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


DEFAULT_SIGMAS = [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]


def run_perturbation_from_benchmark(
    bench_dir: str | Path,
    sigmas: list[float] | None = None,
    seed: int = 123,
) -> dict[str, list[dict]]:
    """Noise-robustness probe over a finished benchmark's two student models.

    Emits probe_multi_baseline.csv and probe_multi_distill.csv in the
    benchmark directory and returns the rows per model.
    """
    bench = Path(bench_dir)
    summary = json.loads((bench / "summary.json").read_text(encoding="utf-8"))
    config = RunConfig.from_dict(summary["config"])
    bpe = load_bpe(config.bpe_path())
    dev_c = load_corpora(config, bpe, "dev")
    plan = plan_from(config, config.train.dropout_multilingual, total_steps=1)
    sigmas = DEFAULT_SIGMAS if sigmas is None else sigmas
    out: dict[str, list[dict]] = {}
    for name in ("multi_baseline", "multi_distill"):
        model = load_checkpoint(bench / name / "model.ckpt")
        log.info("perturbation probe on %s", name)
        rows = perturbation_probe(
            model, dev_c, bpe, plan, sigmas, derive_seed(seed, f"probe:{name}")
        )
        write_probe_csv(rows, bench / f"probe_{name}.csv")
        out[name] = rows
    _write_json(bench / "probe_report.json", {"seed": seed, "models": out})
    return out
