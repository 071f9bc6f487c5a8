"""Two-phase inference orchestration and the baseline allocation policies.

Phase 1 gives every question K samples (K=1 except for vote entropy) and
extracts a difficulty signal from them at no extra cost. An allocation policy
then spends the remaining budget, Phase 2 draws the extra samples, and the
final answer is a majority vote over everything generated, first round
included.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from . import signals
from .allocation import ThresholdExitConfig, apply_threshold_exits, greedy_allocate
from .backends import BackendError, BackendRequest, JudgeLabel, VCS_INSTRUCTION, judge_classify
from .core import (
    AllocationVector,
    BudgetSpec,
    DifficultyEstimate,
    ExperimentResult,
    FinishReason,
    GenerationRecord,
    LOGPROB_SIGNALS,
    Phase,
    QuestionRecord,
    SignalKind,
    TaskKind,
    ValidationError,
)

logger = logging.getLogger(__name__)


class Policy(str, Enum):
    UAB = "uab"
    UNIFORM = "uniform"
    RANDOM = "random"
    LENGTH = "length"
    LLM_JUDGE = "llm_judge"


class NoVotesError(ValueError):
    """Every sample abstained, leaving nothing to vote over."""


@dataclass(frozen=True)
class PipelineConfig:
    budget: BudgetSpec
    signal_kind: SignalKind = SignalKind.ANLL
    threshold_exit: ThresholdExitConfig = field(default_factory=ThresholdExitConfig)
    policy: Policy = Policy.UAB
    phase1_samples_k: int = 1
    rng_seed: int = 0
    sampling_temperature: float = 0.9
    max_tokens: int = 1024

    def __post_init__(self):
        if not 1 <= self.phase1_samples_k <= self.budget.n_per_question:
            raise ValidationError(
                f"phase1_samples_k={self.phase1_samples_k} must be in "
                f"[1, N={self.budget.n_per_question}]"
            )
        if self.signal_kind == SignalKind.VOTE_ENTROPY and self.phase1_samples_k < 2:
            raise ValidationError("vote entropy needs at least K=2 Phase-1 samples")
        if self.phase1_samples_k > 1 and self.signal_kind != SignalKind.VOTE_ENTROPY:
            raise ValidationError("K > 1 Phase-1 samples is only used with vote entropy")
        if self.phase1_samples_k > 1 and self.policy != Policy.UAB:
            # baseline allocation rules assume a single first-round sample
            raise ValidationError(f"policy {self.policy.value} requires K = 1")

    @property
    def phase2_budget(self) -> int:
        """Units left once every question received its K Phase-1 samples."""
        return self.budget.total - self.phase1_samples_k * self.budget.m_questions


@dataclass(frozen=True)
class VoteTally:
    counts: Mapping[str, int]
    winner: str


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------

_BOXED_MARK = "\\boxed{"
_NUMBER_RE = re.compile(r"-?\d+(?:,\d{3})*(?:\.\d+)?")
_INT_RE = re.compile(r"-?\d+")
_DECIMAL_RE = re.compile(r"-?\d+(?:,\d{3})*\.\d+")
_OPTION_RE = re.compile(r"\b([A-Ja-j])\b")
_TRAILING_PUNCT = ".,;:!?"


def canonicalize_answer(raw: str) -> str:
    """Trim whitespace and trailing punctuation; normalize numeric forms."""
    s = raw.strip().rstrip(_TRAILING_PUNCT).strip()
    compact = s.replace(",", "")
    if _INT_RE.fullmatch(compact):
        return str(int(compact))
    if _DECIMAL_RE.fullmatch(s):
        value = float(compact)
        if value.is_integer():
            return str(int(value))
        return repr(value)
    return s


def _last_boxed(text: str) -> Optional[str]:
    start = text.rfind(_BOXED_MARK)
    if start < 0:
        return None
    depth = 1
    begin = start + len(_BOXED_MARK)
    for j in range(begin, len(text)):
        ch = text[j]
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return text[begin:j]
    return None


def parse_answer(text: str, task_kind: TaskKind) -> Optional[str]:
    """Extract a canonical answer from raw model output, or None to abstain.

    Open-math answers come from the last ``\\boxed{...}``, else the last
    number-like token; multiple choice takes the last standalone option letter
    A-J, case-normalized.
    """
    if not text:
        return None
    if task_kind == TaskKind.MULTIPLE_CHOICE:
        letters = _OPTION_RE.findall(text)
        return letters[-1].upper() if letters else None
    boxed = _last_boxed(text)
    if boxed is not None:
        canonical = canonicalize_answer(boxed)
        return canonical or None
    numbers = _NUMBER_RE.findall(text)
    if numbers:
        return canonicalize_answer(numbers[-1])
    return None


def majority_vote(parsed_answers: Sequence[Optional[str]]) -> VoteTally:
    """Most frequent answer; ties break to the byte-order earliest string.

    Abstentions (None) do not vote. Raises :class:`NoVotesError` when every
    sample abstained.
    """
    votes = [a for a in parsed_answers if a is not None]
    if not votes:
        raise NoVotesError("no votes")
    counts = Counter(votes)
    top = max(counts.values())
    winner = min(a for a, c in counts.items() if c == top)
    return VoteTally(counts=dict(counts), winner=winner)


# ---------------------------------------------------------------------------
# Difficulty estimation from Phase-1 records
# ---------------------------------------------------------------------------


def _fallback_estimate(qid: str, kind: SignalKind, temperature: float, why: str) -> DifficultyEstimate:
    logger.info("question %s: %s; using maximum-uncertainty fallback p=%.2f", qid, why,
                signals.VCS_FALLBACK_PROB)
    prob = signals.VCS_FALLBACK_PROB
    return DifficultyEstimate(qid, signals.prob_to_score(prob, temperature), prob, kind)


def estimate_difficulties(
    questions: Sequence[QuestionRecord],
    phase1_records: Mapping[str, Sequence[GenerationRecord]],
    signal_kind: SignalKind,
    temperature: float,
    external_probs: Optional[Mapping[str, float]] = None,
) -> Dict[str, DifficultyEstimate]:
    """Turn Phase-1 outputs into per-question success-probability estimates."""
    estimates: Dict[str, DifficultyEstimate] = {}
    if signal_kind == SignalKind.EXTERNAL:
        if external_probs is None:
            raise ValidationError("external signal requires externally supplied probabilities")
        for q in questions:
            if q.id not in external_probs:
                raise ValidationError(f"no external probability for question {q.id!r}")
            p = float(external_probs[q.id])
            # keep the score finite even for p=0 by flooring before the log
            score = signals.prob_to_score(max(p, 1e-300), temperature)
            estimates[q.id] = DifficultyEstimate(q.id, score, p, signal_kind)
        return estimates

    if signal_kind == SignalKind.LENGTH:
        lengths = [q.length_chars for q in questions]
        lo, hi = min(lengths), max(lengths)
        span = hi - lo
        for q in questions:
            score = (q.length_chars - lo) / span if span > 0 else 0.0
            prob = signals.score_to_prob(score, temperature)
            estimates[q.id] = DifficultyEstimate(q.id, score, prob, signal_kind)
        return estimates

    for q in questions:
        records = [r for r in phase1_records.get(q.id, []) if r.finish_reason != FinishReason.ERROR]
        if signal_kind in LOGPROB_SIGNALS:
            scored = [r for r in records if r.token_logprobs]
            if not scored:
                estimates[q.id] = _fallback_estimate(q.id, signal_kind, temperature,
                                                     "no usable logprobs in Phase 1")
                continue
            score = sum(signals.logprob_score(signal_kind, r.token_logprobs) for r in scored) / len(scored)
            prob = signals.score_to_prob(score, temperature)
            estimates[q.id] = DifficultyEstimate(q.id, score, prob, signal_kind)
        elif signal_kind == SignalKind.VCS:
            if not records:
                estimates[q.id] = _fallback_estimate(q.id, signal_kind, temperature,
                                                     "no Phase-1 generation")
                continue
            try:
                prob = signals.parse_vcs(records[0].text)
            except signals.VcsUnparsableError as exc:
                estimates[q.id] = _fallback_estimate(q.id, signal_kind, temperature, str(exc))
                continue
            estimates[q.id] = DifficultyEstimate(
                q.id, signals.prob_to_score(prob, temperature), prob, signal_kind
            )
        elif signal_kind == SignalKind.VOTE_ENTROPY:
            answers = [r.parsed_answer for r in records if r.parsed_answer is not None]
            if not answers:
                estimates[q.id] = _fallback_estimate(q.id, signal_kind, temperature,
                                                     "all Phase-1 samples abstained")
                continue
            entropy = signals.vote_entropy(answers)
            prob = signals.score_to_prob(entropy, temperature)
            estimates[q.id] = DifficultyEstimate(q.id, entropy, prob, signal_kind)
        else:
            raise ValidationError(f"cannot estimate difficulty for signal {signal_kind}")
    return estimates


# ---------------------------------------------------------------------------
# Baseline allocation policies
# ---------------------------------------------------------------------------


def allocate_baseline(
    policy: Policy,
    questions: Sequence[QuestionRecord],
    judge_labels: Optional[Mapping[str, JudgeLabel]],
    budget: BudgetSpec,
    rng: np.random.Generator,
) -> AllocationVector:
    """Budget split for the non-adaptive comparison policies.

    Uniform gives every question N-1 extras; random scatters the budget
    i.i.d.; length routes the score-to-probability machinery through a
    min-max-normalized prompt length; the judge policy gives easy questions
    nothing and splits the whole remaining budget equally over hard ones.
    """
    ids = [q.id for q in questions]
    b_eff = budget.effective
    if policy == Policy.UNIFORM:
        extras = {qid: budget.n_per_question - 1 for qid in ids}
        return AllocationVector(extras, b_eff)
    if policy == Policy.RANDOM:
        counts = np.bincount(rng.integers(0, len(ids), size=b_eff), minlength=len(ids))
        return AllocationVector({qid: int(c) for qid, c in zip(ids, counts)}, b_eff)
    if policy == Policy.LENGTH:
        lengths = [q.length_chars for q in questions]
        lo, hi = min(lengths), max(lengths)
        span = hi - lo
        probs = {
            q.id: signals.score_to_prob((q.length_chars - lo) / span if span > 0 else 0.0,
                                        budget.temperature)
            for q in questions
        }
        return greedy_allocate(probs, b_eff)
    if policy == Policy.LLM_JUDGE:
        if judge_labels is None:
            raise ValidationError("llm_judge policy requires judge labels")
        hard = [qid for qid in ids if judge_labels.get(qid, JudgeLabel.HARD) == JudgeLabel.HARD]
        extras = {qid: 0 for qid in ids}
        if not hard:
            # nothing is hard: keep the budget conserved round-robin
            for t in range(b_eff):
                extras[ids[t % len(ids)]] += 1
            return AllocationVector(extras, b_eff)
        base, rem = divmod(b_eff, len(hard))
        for i, qid in enumerate(hard):
            extras[qid] = base + (1 if i < rem else 0)
        return AllocationVector(extras, b_eff)
    raise ValidationError(f"policy {policy} has no baseline allocation rule")


# ---------------------------------------------------------------------------
# Two-phase run
# ---------------------------------------------------------------------------


def _request_records(
    backend,
    question: QuestionRecord,
    prompt: str,
    n: int,
    first_index: int,
    phase: Phase,
    config: PipelineConfig,
    want_logprobs: bool,
) -> List[GenerationRecord]:
    request = BackendRequest(
        question_id=question.id,
        prompt=prompt,
        sample_count=n,
        sampling_temperature=config.sampling_temperature,
        max_tokens=config.max_tokens,
        want_logprobs=want_logprobs,
        first_sample_index=first_index,
    )
    try:
        response = backend.generate(request)
    except BackendError as exc:
        logger.warning("generation failed for %s (%s); recording error samples", question.id, exc)
        return [
            GenerationRecord(question.id, phase, first_index + i, "", None, (), FinishReason.ERROR)
            for i in range(n)
        ]
    records = []
    for i, sample in enumerate(response.samples):
        parsed = None
        if sample.finish_reason != FinishReason.ERROR:
            parsed = parse_answer(sample.text, question.task_kind)
        records.append(
            GenerationRecord(
                question_id=question.id,
                phase=phase,
                sample_index=first_index + i,
                text=sample.text,
                parsed_answer=parsed,
                token_logprobs=sample.token_logprobs,
                finish_reason=sample.finish_reason,
            )
        )
    return records


def run_two_phase(
    questions: Sequence[QuestionRecord],
    backend,
    config: PipelineConfig,
    external_probs: Optional[Mapping[str, float]] = None,
) -> List[ExperimentResult]:
    """Run the full two-phase pipeline and return one result per question.

    Every question gets K Phase-1 samples; the difficulty estimate uses those
    samples only. The configured policy then allocates the remaining budget,
    Phase 2 draws the extras, and the majority vote runs over all samples of
    both phases. Samples that errored abstain from the vote; a question whose
    samples all abstained gets the empty-string sentinel and counts incorrect.
    """
    if not questions:
        raise ValidationError("need at least one question")
    if len(questions) != config.budget.m_questions:
        raise ValidationError(
            f"budget covers {config.budget.m_questions} questions, got {len(questions)}"
        )
    seen = set()
    for q in questions:
        if q.id in seen:
            raise ValidationError(f"duplicate question id {q.id!r}")
        seen.add(q.id)

    k = config.phase1_samples_k
    want_logprobs = config.signal_kind in LOGPROB_SIGNALS
    vcs_mode = config.signal_kind == SignalKind.VCS

    records: Dict[str, List[GenerationRecord]] = {}
    prompts: Dict[str, str] = {}
    for q in questions:
        prompt = (q.prompt + "\n\n" + VCS_INSTRUCTION) if vcs_mode else q.prompt
        prompts[q.id] = prompt
        records[q.id] = _request_records(
            backend, q, prompt, k, 0, Phase.PHASE1, config, want_logprobs
        )

    estimates = estimate_difficulties(
        questions, records, config.signal_kind, config.budget.temperature, external_probs
    )
    probs = {qid: est.prob for qid, est in estimates.items()}

    if config.policy == Policy.UAB:
        _, alloc, _saved = apply_threshold_exits(probs, config.phase2_budget, config.threshold_exit)
    else:
        judge_labels = None
        if config.policy == Policy.LLM_JUDGE:
            judge_labels = {q.id: judge_classify(q, backend) for q in questions}
        rng = np.random.default_rng(config.rng_seed)
        alloc = allocate_baseline(config.policy, questions, judge_labels, config.budget, rng)

    for q in questions:
        extra = alloc.extras.get(q.id, 0)
        if extra > 0:
            records[q.id].extend(
                _request_records(
                    backend, q, prompts[q.id], extra, k, Phase.PHASE2, config, want_logprobs
                )
            )

    results = []
    for q in questions:
        parsed = [r.parsed_answer for r in records[q.id]]
        try:
            final = majority_vote(parsed).winner
        except NoVotesError:
            final = ""
        correct = None
        if q.gold_answer is not None:
            correct = bool(final) and final == canonicalize_answer(q.gold_answer)
        results.append(
            ExperimentResult(
                question_id=q.id,
                final_answer=final,
                correct=correct,
                samples_used=k + alloc.extras.get(q.id, 0),
                difficulty=estimates[q.id],
                policy=config.policy.value,
            )
        )
    return results
