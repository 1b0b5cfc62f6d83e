"""Training loops: single-pair teachers and the selective-distillation student.

Each global step draws one mini-batch per language pair, accumulates the
per-pair token-mean gradients in pair-id order, and applies exactly one Adam
update. Every check_every steps the student's dev BLEU is measured per pair
and the distillation flag is re-evaluated: a pair keeps distilling while the
student is still below its teacher's dev BLEU plus the threshold tau, and a
pair that later falls behind again is distilled again.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .bpe import BpeModel
from .corpus import LanguagePair, MultiDataset, PairSampler, ParallelCorpus, upsample
from .evaluation import bleu, translate_corpus
from .losses import LossError, combined_loss, kd_loss, nll_loss
from .model import ModelConfig, TranslationModel, backward, build_model
from .seeding import derive_seed
from .traces import TeacherTrace, batch_records

log = logging.getLogger("polydistill")


class TrainingError(RuntimeError):
    pass


class TrainingDivergedError(TrainingError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"training diverged at step {step}: {detail}")
        self.step = step




def lr_schedule(step: int, d_model: int, warmup_steps: int) -> float:
    """Inverse-sqrt schedule with linear warmup; peaks at step == warmup_steps."""
    if step < 1:
        raise TrainingError(f"step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup_steps ** -1.5)


class AdamOptimizer:
    """Adam with bias correction over explicit gradient dicts.

    Wraps torch.optim.Adam (beta1=0.9, beta2=0.98, eps=1e-9, the transformer
    recipe) so moments live in its state; steps with any non-finite gradient
    are skipped with a warning rather than poisoning the parameters.
    """

    def __init__(self, model: TranslationModel, betas=(0.9, 0.98), eps=1e-9):
        self.model = model
        self.opt = torch.optim.Adam(model.parameters(), lr=0.0, betas=betas, eps=eps)
        self.skipped_steps = 0

    def step(self, grads: dict[str, torch.Tensor], lr: float) -> bool:
        for name, g in grads.items():
            if not bool(torch.isfinite(g).all()):
                self.skipped_steps += 1
                log.warning("skipping optimizer step: non-finite gradient in %s", name)
                return False
        for group in self.opt.param_groups:
            group["lr"] = lr
        for name, p in self.model.named_parameters():
            p.grad = grads[name]
        self.opt.step()
        self.opt.zero_grad(set_to_none=True)
        return True


@dataclass
class TrainPlan:
    total_steps: int
    check_every: int
    tau: float = 1.0
    lam: float = 0.5
    topk: int = 8
    token_budget: int = 8192
    dropout: float = 0.1
    warmup_steps: int = 4000
    beam: int = 4
    alpha: float = 1.0
    decode_max_len: int = 128
    dev_cap: int = 500
    seed: int = 1

    def __post_init__(self):
        if self.check_every < 1:
            raise TrainingError("check_every must be >= 1")
        if self.tau < 0:
            raise TrainingError("tau must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise TrainingError(f"lambda must be in [0, 1], got {self.lam}")


@dataclass
class DistillState:
    flags: list[bool]
    step: int
    teacher_dev_bleu: list[float]
    history: list[dict] = field(default_factory=list)


def update_distill_flags(state: DistillState, student_dev_bleu: Sequence[float], tau: float) -> DistillState:
    """Re-evaluate every pair's flag: distill while student < teacher + tau.

    The inequality is strict, so a student sitting exactly at teacher + tau
    stops distilling.
    """
    if len(student_dev_bleu) != len(state.flags):
        raise TrainingError(
            f"got {len(student_dev_bleu)} BLEU values for {len(state.flags)} pairs"
        )
    for l, student in enumerate(student_dev_bleu):
        state.flags[l] = student < state.teacher_dev_bleu[l] + tau
        state.history.append(
            {"step": state.step, "pair": l, "bleu": student, "flag_after": state.flags[l]}
        )
    return state


def dev_bleu(
    model: TranslationModel,
    corpus: ParallelCorpus,
    bpe: BpeModel,
    plan: TrainPlan,
    cap: int | None = None,
) -> float:
    """BLEU of beam-decoded hypotheses against references, both in word-level
    text recovered by BPE reversal. cap limits evaluation to the first N
    examples (used for the cheap in-training checks)."""
    examples = corpus.examples[: cap] if cap else corpus.examples
    sources = [src for src, _ in examples]
    hyps = translate_corpus(model, sources, plan.beam, plan.alpha, plan.decode_max_len)
    hyp_text = [bpe.decode(h.tokens) for h in hyps]
    ref_text = [bpe.decode(tgt) for _, tgt in examples]
    return bleu(hyp_text, ref_text).bleu


def dev_loss(
    model: TranslationModel,
    corpus: ParallelCorpus,
    cap: int | None = None,
    chunk_size: int = 64,
    float64: bool = False,
) -> tuple[float, int]:
    """Token-mean forced-decoding NLL over a corpus; returns (loss, token_count).

    float64 evaluates a double-precision copy, resolving differences far below
    float32 noise (used by the perturbation probe).
    """
    from .corpus import collate

    eval_model = copy.deepcopy(model).double() if float64 else model
    examples = corpus.examples[:cap] if cap else corpus.examples
    total = 0.0
    count = 0
    for start in range(0, len(examples), chunk_size):
        chunk = examples[start : start + chunk_size]
        batch = collate(chunk, corpus.pair.id, range(start, start + len(chunk)))
        logprobs = eval_model.forward_batch(batch, train=False)
        value, _ = nll_loss(logprobs, batch.tgt_out, batch.tgt_mask)
        total += value.total
        count += value.token_count
    return total / max(count, 1), count


@dataclass
class TrainResult:
    model: TranslationModel
    best_step: int
    best_avg_bleu: float
    dev_bleus: list[float]
    report: dict


def train_multilingual(
    model_config: ModelConfig,
    plan: TrainPlan,
    dataset: MultiDataset,
    dev_corpora: dict[int, ParallelCorpus],
    bpe: BpeModel,
    mode: str = "baseline",
    traces: dict[int, TeacherTrace] | None = None,
    teacher_dev_bleus: dict[int, float] | None = None,
    init_model: TranslationModel | None = None,
    force_flags_off: bool = False,
) -> TrainResult:
    """Run the full distillation loop (or its no-teacher baseline).

    mode "baseline" ignores teachers entirely; mode "distill" needs a trace
    and a teacher dev BLEU per pair. force_flags_off keeps every flag False
    throughout, which must reproduce the baseline run bit for bit.
    """
    if mode not in ("baseline", "distill"):
        raise TrainingError(f"unknown mode {mode!r}")
    pair_ids = dataset.pair_ids()
    distill = mode == "distill"
    if distill:
        if traces is None or teacher_dev_bleus is None:
            raise TrainingError("distill mode needs traces and teacher_dev_bleus")
        missing = [l for l in pair_ids if l not in traces or l not in teacher_dev_bleus]
        if missing:
            raise TrainingError(f"missing traces or teacher BLEU for pairs {missing}")
        for l in pair_ids:
            traces[l].validate_against(dataset.corpora[l])
            if traces[l].k != plan.topk:
                raise TrainingError(
                    f"pair {l}: trace has K={traces[l].k}, plan expects K={plan.topk}"
                )

    cfg = dataclasses.replace(model_config, dropout=plan.dropout)
    model = build_model(cfg, derive_seed(plan.seed, "init"))
    if init_model is not None:
        model.load_state_dict(copy.deepcopy(init_model.state_dict()))
    opt = AdamOptimizer(model)
    dropout_rng = torch.Generator().manual_seed(derive_seed(plan.seed, "dropout"))
    samplers = {
        l: PairSampler(dataset, l, plan.token_budget, derive_seed(plan.seed, f"sampler:{l}"))
        for l in pair_ids
    }

    state = DistillState(
        flags=[distill and not force_flags_off] * len(pair_ids),
        step=0,
        teacher_dev_bleu=[teacher_dev_bleus[l] if distill else 0.0 for l in pair_ids],
    )
    checks: list[dict] = []
    loss_log: list[dict] = []
    best_state: dict | None = None
    best_step = 0
    best_avg = float("-inf")
    last_bleus = [0.0] * len(pair_ids)

    check_steps = set(range(plan.check_every, plan.total_steps + 1, plan.check_every))
    if plan.total_steps > 0:
        check_steps.add(plan.total_steps)

    for step in range(1, plan.total_steps + 1):
        state.step = step
        grads: dict[str, torch.Tensor] | None = None
        step_nll = 0.0
        step_tokens = 0
        for l in pair_ids:
            batch = samplers[l].next_batch()
            logprobs = model.forward_batch(batch, train=True, rng=dropout_rng)
            try:
                nll_value, nll_weights = nll_loss(logprobs, batch.tgt_out, batch.tgt_mask)
                if distill and state.flags[l]:
                    rec_ids, rec_probs = batch_records(traces[l], batch)
                    kd_value, kd_weights = kd_loss(logprobs, rec_ids, rec_probs, batch.tgt_mask)
                    _, weights = combined_loss(
                        nll_value, kd_value, plan.lam, nll_weights, kd_weights
                    )
                else:
                    weights = nll_weights
            except LossError as e:
                raise TrainingDivergedError(step, str(e)) from e
            count = max(nll_value.token_count, 1)
            pair_grads = backward(model, logprobs, weights / count)
            if grads is None:
                grads = pair_grads
            else:
                for name in grads:
                    grads[name] += pair_grads[name]
            step_nll += nll_value.total
            step_tokens += nll_value.token_count
        opt.step(grads, lr_schedule(step, cfg.d_model, plan.warmup_steps))

        if step % 50 == 0 or step == 1:
            loss_log.append({"step": step, "nll_per_token": step_nll / max(step_tokens, 1)})

        if step in check_steps:
            bleus = [
                dev_bleu(model, dev_corpora[l], bpe, plan, cap=plan.dev_cap)
                for l in pair_ids
            ]
            last_bleus = bleus
            avg = sum(bleus) / len(bleus)
            for l, b in zip(pair_ids, bleus):
                checks.append({"step": step, "pair": l, "bleu": b, "flag": state.flags[l]})
            if avg > best_avg:
                best_avg = avg
                best_step = step
                best_state = copy.deepcopy(model.state_dict())
            if distill and not force_flags_off:
                update_distill_flags(state, bleus, plan.tau)
            log.info(
                "step %d: dev BLEU %s (avg %.2f), flags %s",
                step, [f"{b:.2f}" for b in bleus], avg, state.flags,
            )

    if plan.total_steps == 0:
        last_bleus = [
            dev_bleu(model, dev_corpora[l], bpe, plan, cap=plan.dev_cap) for l in pair_ids
        ]
        best_avg = sum(last_bleus) / len(last_bleus)
    if best_state is not None:
        model.load_state_dict(best_state)
    report = {
        "mode": mode,
        "force_flags_off": force_flags_off,
        "pairs": [dataset.corpora[l].pair.key for l in pair_ids],
        "checks": checks,
        "flag_history": state.history,
        "loss_log": loss_log,
        "best_step": best_step,
        "best_avg_dev_bleu": best_avg,
        "final_dev_bleu": {dataset.corpora[l].pair.key: b for l, b in zip(pair_ids, last_bleus)},
        "skipped_steps": opt.skipped_steps,
    }
    return TrainResult(model, best_step, best_avg, last_bleus, report)


def train_teacher(
    model_config: ModelConfig,
    plan: TrainPlan,
    train_corpus: ParallelCorpus,
    dev_corpus: ParallelCorpus,
    bpe: BpeModel,
) -> TrainResult:
    """NLL-only training of one individual model; returns the best-dev checkpoint."""
    if not train_corpus.examples or not dev_corpus.examples:
        raise TrainingError(f"pair {train_corpus.pair.key}: empty corpus")
    solo = ParallelCorpus(
        pair=LanguagePair(0, train_corpus.pair.src_code, train_corpus.pair.tgt_code),
        examples=train_corpus.examples,
    )
    dataset = upsample([solo], derive_seed(plan.seed, "upsample"))
    result = train_multilingual(
        model_config, plan, dataset, {0: dev_corpus}, bpe, mode="baseline"
    )
    result.report["pairs"] = [train_corpus.pair.key]
    return result


def back_distill(
    multilingual: TranslationModel,
    train_corpus: ParallelCorpus,
    dev_corpus: ParallelCorpus,
    bpe: BpeModel,
    model_config: ModelConfig,
    plan: TrainPlan,
    init_model: TranslationModel | None = None,
) -> tuple[TrainResult, TeacherTrace]:
    """Use the trained multilingual model as the teacher for one pair.

    Exports a fresh top-K trace from the multilingual model and runs the
    single-pair distillation loop, optionally starting from the existing
    individual model's parameters.
    """
    from .traces import compute_topk_trace

    solo = ParallelCorpus(
        pair=LanguagePair(0, train_corpus.pair.src_code, train_corpus.pair.tgt_code),
        examples=train_corpus.examples,
    )
    trace = compute_topk_trace(multilingual, solo, plan.topk)
    teacher_bleu = dev_bleu(multilingual, dev_corpus, bpe, plan, cap=plan.dev_cap)
    dataset = upsample([solo], derive_seed(plan.seed, "upsample"))
    result = train_multilingual(
        model_config,
        plan,
        dataset,
        {0: dev_corpus},
        bpe,
        mode="distill",
        traces={0: trace},
        teacher_dev_bleus={0: teacher_bleu},
        init_model=init_model,
    )
    result.report["pairs"] = [train_corpus.pair.key]
    result.report["back_distill_teacher_bleu"] = teacher_bleu
    return result, trace
