"""Generation backends: a deterministic simulated world, an OpenAI-compatible
HTTP client with retries and caching, and the judge/confidence prompt plumbing.

The simulated world draws per-question success probabilities from a chosen
law and emits samples whose token logprobs invert exactly back to those
probabilities through the score-to-probability map, so the whole pipeline can
be verified at desk scale without a served model.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import re
import threading
import time
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Tuple, Union

import numpy as np

from .core import (
    FinishReason,
    GenerationRecord,
    Phase,
    QuestionRecord,
    TaskKind,
    ValidationError,
)

logger = logging.getLogger(__name__)

#: Default sampling parameters for generation requests.
DEFAULT_SAMPLING_TEMPERATURE = 0.9
DEFAULT_MAX_TOKENS = 1024

JUDGE_PROMPT_TEMPLATE = (
    "Is the following question easy or hard for a language model to answer "
    "correctly? Respond with a single word: easy or hard.\n\n{question}"
)
_JUDGE_PREFIX = JUDGE_PROMPT_TEMPLATE.split("{question}")[0]

VCS_INSTRUCTION = (
    "After giving your answer, rate how confident you are that it is correct "
    "on a scale from 1 (not confident at all) to 10 (completely certain). "
    "End your response with: Confidence: <integer>."
)

#: Synthesized generations carry this many tokens, each at a constant logprob,
#: so every logprob-derived signal stays well defined and mutually consistent.
SIM_TOKEN_COUNT = 8

#: Floor applied before taking logs of a success probability.
SIM_PROB_FLOOR = 1e-9


class UnknownQuestionError(ValidationError):
    def __init__(self, question_id: str):
        super().__init__(f"question {question_id!r} is not registered in the simulated world")
        self.question_id = question_id


class BackendError(RuntimeError):
    """A generation request failed after exhausting retries."""


class JudgeLabel(str, Enum):
    EASY = "easy"
    HARD = "hard"


@dataclass(frozen=True)
class BetaLaw:
    a: float = 2.0
    b: float = 2.0


@dataclass(frozen=True)
class FixedProbs:
    probs: Tuple[float, ...]


@dataclass(frozen=True)
class TwoPointLaw:
    p_lo: float
    p_hi: float
    frac_lo: float


ProbLaw = Union[BetaLaw, FixedProbs, TwoPointLaw]


@dataclass(frozen=True)
class WorldConfig:
    m_questions: int
    prob_law: ProbLaw = BetaLaw(2.0, 2.0)
    n_distractors: int = 4
    signal_noise_sigma: float = 0.0
    correlation_rho: float = 0.0
    world_temperature: float = 0.2
    rng_seed: int = 0

    def __post_init__(self):
        if self.m_questions < 1:
            raise ValidationError("m_questions must be >= 1")
        if self.n_distractors < 1:
            raise ValidationError("n_distractors must be >= 1")
        if self.signal_noise_sigma < 0:
            raise ValidationError("signal_noise_sigma must be >= 0")
        if not 0.0 <= self.correlation_rho <= 1.0:
            raise ValidationError("correlation_rho must be in [0, 1]")
        if not self.world_temperature > 0:
            raise ValidationError("world_temperature must be > 0")
        if self.rng_seed < 0:
            raise ValidationError("rng_seed must be >= 0")


class SimulatedWorld:
    """A batch of questions with known gold answers and success probabilities."""

    def __init__(self, config: WorldConfig):
        self.config = config
        rng = np.random.default_rng(config.rng_seed)
        p_star = self._draw_probs(config, rng)

        self.questions: List[QuestionRecord] = []
        self.p_star: Dict[str, float] = {}
        self.gold: Dict[str, str] = {}
        self.index: Dict[str, int] = {}
        for i in range(config.m_questions):
            qid = f"q{i:05d}"
            # prompt lengths vary with index only, so prompt length is an
            # uninformative difficulty proxy, like real benchmarks mostly are
            prompt = (
                f"Problem {i}: evaluate the expression and give the final answer."
                + " Show work." * (i % 5)
            )
            gold = str(100 + i)
            self.questions.append(
                QuestionRecord(id=qid, prompt=prompt, gold_answer=gold, task_kind=TaskKind.OPEN_MATH)
            )
            self.p_star[qid] = float(p_star[i])
            self.gold[qid] = gold
            self.index[qid] = i

    @staticmethod
    def _draw_probs(config: WorldConfig, rng: np.random.Generator) -> np.ndarray:
        law = config.prob_law
        m = config.m_questions
        if isinstance(law, BetaLaw):
            return np.clip(rng.beta(law.a, law.b, size=m), 0.0, 1.0)
        if isinstance(law, FixedProbs):
            if len(law.probs) != m:
                raise ValidationError(
                    f"fixed probability list has {len(law.probs)} entries for {m} questions"
                )
            arr = np.asarray(law.probs, dtype=float)
            if np.any(arr < 0) or np.any(arr > 1):
                raise ValidationError("fixed probabilities must lie in [0, 1]")
            return arr
        if isinstance(law, TwoPointLaw):
            for p in (law.p_lo, law.p_hi):
                if not 0.0 <= p <= 1.0:
                    raise ValidationError("two-point probabilities must lie in [0, 1]")
            if not 0.0 <= law.frac_lo <= 1.0:
                raise ValidationError("frac_lo must be in [0, 1]")
            lows = rng.random(m) < law.frac_lo
            return np.where(lows, law.p_lo, law.p_hi)
        raise ValidationError(f"unknown probability law {law!r}")


@dataclass(frozen=True)
class BackendRequest:
    """One generation request for one question."""

    question_id: str
    prompt: str
    sample_count: int
    sampling_temperature: float = DEFAULT_SAMPLING_TEMPERATURE
    max_tokens: int = DEFAULT_MAX_TOKENS
    want_logprobs: bool = True
    #: Index of the first sample in this request within the question's overall
    #: sample numbering; keeps cache keys and simulator streams per-sample.
    first_sample_index: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ValidationError("sample_count must be >= 1")
        if self.first_sample_index < 0:
            raise ValidationError("first_sample_index must be >= 0")


@dataclass(frozen=True)
class SampleOutput:
    text: str
    token_logprobs: Tuple[float, ...]
    finish_reason: FinishReason


@dataclass
class BackendResponse:
    samples: List[SampleOutput]
    logprobs_missing: bool = False


# RNG stream lanes within one question. Streams are keyed by Philox counters,
# so any (question, sample) outcome is independent of request order.
_LANE_QUESTION = 0
_LANE_SAMPLE = 1
_LANE_JUDGE = 2

_MASK64 = (1 << 64) - 1


class SimulatedBackend:
    """Deterministic Bernoulli world behind the generation protocol.

    Correct samples emit the gold answer, incorrect ones a uniformly chosen
    distractor; synthesized token logprobs encode the (optionally noised)
    success probability through the world's temperature. With probability rho
    all samples of a question reuse one shared correctness draw.
    """

    def __init__(self, world: SimulatedWorld, run_seed: int = 0):
        if run_seed < 0:
            raise ValidationError("run_seed must be >= 0")
        self.world = world
        self.run_seed = run_seed
        self.generation_samples = 0
        self.judge_calls = 0
        self._mode_cache: Dict[str, Tuple[bool, bool]] = {}

    def _rng(self, question_index: int, lane: int, index: int) -> np.random.Generator:
        key = ((self.world.config.rng_seed & _MASK64) << 64) | (self.run_seed & _MASK64)
        bits = np.random.Philox(key=key, counter=[question_index, lane, index, 0])
        return np.random.Generator(bits)

    def _question_mode(self, qid: str) -> Tuple[bool, bool]:
        """(shared-draw mode active, shared correctness outcome)."""
        cached = self._mode_cache.get(qid)
        if cached is not None:
            return cached
        idx = self.world.index[qid]
        rng = self._rng(idx, _LANE_QUESTION, 0)
        u_mode = rng.random()
        u_shared = rng.random()
        shared = u_mode < self.world.config.correlation_rho
        mode = (shared, bool(u_shared < self.world.p_star[qid]))
        self._mode_cache[qid] = mode
        return mode

    def sample_outcome(self, qid: str, sample_index: int) -> SampleOutput:
        cfg = self.world.config
        if qid not in self.world.index:
            raise UnknownQuestionError(qid)
        idx = self.world.index[qid]
        p_star = self.world.p_star[qid]
        rng = self._rng(idx, _LANE_SAMPLE, sample_index)
        u_correct = rng.random()
        u_distractor = rng.random()
        eps = float(rng.normal(0.0, cfg.signal_noise_sigma)) if cfg.signal_noise_sigma > 0 else 0.0

        shared_mode, shared_outcome = self._question_mode(qid)
        correct = shared_outcome if shared_mode else (u_correct < p_star)

        if correct:
            answer = self.world.gold[qid]
        else:
            answer = f"wrong_{int(u_distractor * cfg.n_distractors)}"

        noisy_p = min(max(p_star + eps, SIM_PROB_FLOOR), 1.0)
        anll_value = -cfg.world_temperature * math.log(noisy_p)
        confidence = int(round(10 * min(max(p_star + eps, 0.0), 1.0)))
        confidence = min(10, max(1, confidence))
        text = f"The final answer is \\boxed{{{answer}}}. Confidence: {confidence}"
        return SampleOutput(
            text=text,
            token_logprobs=(-anll_value,) * SIM_TOKEN_COUNT,
            finish_reason=FinishReason.STOP,
        )

    def _judge_response(self, qid: str) -> str:
        cfg = self.world.config
        idx = self.world.index[qid]
        rng = self._rng(idx, _LANE_JUDGE, 0)
        eps = float(rng.normal(0.0, cfg.signal_noise_sigma)) if cfg.signal_noise_sigma > 0 else 0.0
        perceived = min(max(self.world.p_star[qid] + eps, 0.0), 1.0)
        return "easy" if perceived > 0.5 else "hard"

    def generate(self, request: BackendRequest) -> BackendResponse:
        if request.prompt.startswith(_JUDGE_PREFIX):
            if request.question_id not in self.world.index:
                raise UnknownQuestionError(request.question_id)
            self.judge_calls += 1
            samples = [
                SampleOutput(self._judge_response(request.question_id), (), FinishReason.STOP)
                for _ in range(request.sample_count)
            ]
            return BackendResponse(samples=samples, logprobs_missing=request.want_logprobs)
        samples = [
            self.sample_outcome(request.question_id, request.first_sample_index + i)
            for i in range(request.sample_count)
        ]
        self.generation_samples += request.sample_count
        return BackendResponse(samples=samples)


def simulated_generate(
    backend: SimulatedBackend,
    question_id: str,
    n: int,
    first_sample_index: int = 0,
    phase: Phase = Phase.PHASE1,
) -> List[GenerationRecord]:
    """Draw ``n`` samples for one question as GenerationRecords.

    Replaying with the same world, run seed, and sample indices reproduces the
    exact records a pipeline run saw, which is how tests audit realized
    outcomes without instrumenting the pipeline.
    """
    records = []
    for i in range(n):
        out = backend.sample_outcome(question_id, first_sample_index + i)
        backend.generation_samples += 1
        records.append(
            GenerationRecord(
                question_id=question_id,
                phase=phase,
                sample_index=first_sample_index + i,
                text=out.text,
                parsed_answer=None,
                token_logprobs=out.token_logprobs,
                finish_reason=out.finish_reason,
            )
        )
    return records


class ResponseCache:
    """Content-addressed on-disk store of per-sample generation payloads."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.hits = 0
        self.misses = 0

    @staticmethod
    def make_key(
        endpoint: str,
        model: str,
        prompt: str,
        sampling_params: Mapping[str, object],
        sample_index: int,
    ) -> str:
        canonical = json.dumps(
            [endpoint, model, prompt, dict(sorted(sampling_params.items())), sample_index],
            sort_keys=True,
            ensure_ascii=True,
            separators=(",", ":"),
        )
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> Optional[dict]:
        path = self._path(key)
        if not path.exists():
            self.misses += 1
            return None
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            logger.warning("cache entry %s unreadable (%s); treating as miss", key, exc)
            self.misses += 1
            return None
        self.hits += 1
        return payload

    def put(self, key: str, payload: dict) -> Path:
        path = self._path(key)
        if path.exists():
            logger.info("cache entry %s overwritten (last write wins)", key)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(payload, ensure_ascii=True), encoding="utf-8")
        tmp.replace(path)
        return path


@dataclass
class HttpBackendConfig:
    """Connection settings for an OpenAI-compatible chat-completions endpoint.

    Credentials come from the environment only (UAB_API_KEY); they are never
    read from config files.
    """

    base_url: str
    model: str
    api_key: str = ""
    max_retries: int = 5
    backoff_seconds: float = 0.5
    timeout_seconds: float = 120.0
    max_in_flight: int = 8

    @classmethod
    def from_env(cls, environ: Mapping[str, str]) -> "HttpBackendConfig":
        base_url = environ.get("UAB_API_BASE", "")
        model = environ.get("UAB_MODEL", "")
        if not base_url or not model:
            raise ValidationError("UAB_API_BASE and UAB_MODEL must be set for the http backend")
        return cls(base_url=base_url, model=model, api_key=environ.get("UAB_API_KEY", ""))


_FINISH_MAP = {"stop": FinishReason.STOP, "length": FinishReason.LENGTH}


class HttpBackend:
    """Client for ``POST /v1/chat/completions`` with retries and replay cache.

    Safe for concurrent use; a bounded semaphore caps in-flight requests.
    """

    def __init__(self, config: HttpBackendConfig, cache: Optional[ResponseCache] = None):
        import requests

        self.config = config
        self.cache = cache
        self._session = requests.Session()
        self._semaphore = threading.BoundedSemaphore(config.max_in_flight)

    # -- request plumbing ---------------------------------------------------

    def _sampling_params(self, request: BackendRequest) -> Dict[str, object]:
        return {
            "temperature": request.sampling_temperature,
            "max_tokens": request.max_tokens,
            "logprobs": request.want_logprobs,
        }

    def _cache_key(self, request: BackendRequest, sample_index: int) -> str:
        return ResponseCache.make_key(
            self.config.base_url,
            self.config.model,
            request.prompt,
            self._sampling_params(request),
            sample_index,
        )

    def _post_once(self, payload: dict):
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        url = self.config.base_url.rstrip("/") + "/v1/chat/completions"
        with self._semaphore:
            return self._session.post(
                url, json=payload, headers=headers, timeout=self.config.timeout_seconds
            )

    def _post_with_retries(self, payload: dict) -> dict:
        import requests

        last_error = "no attempt made"
        for attempt in range(self.config.max_retries + 1):
            try:
                resp = self._post_once(payload)
            except requests.RequestException as exc:
                last_error = f"transport error: {exc}"
            else:
                if resp.status_code == 200:
                    if attempt:
                        logger.info("request succeeded after %d retries", attempt)
                    return resp.json()
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]}"
                if resp.status_code not in (429,) and resp.status_code < 500:
                    raise BackendError(last_error)
                retry_after = resp.headers.get("Retry-After")
                if retry_after is not None:
                    try:
                        delay = float(retry_after)
                    except ValueError:
                        delay = self.config.backoff_seconds * (2**attempt)
                    logger.warning("rate limited; honoring Retry-After=%s", retry_after)
                    if attempt < self.config.max_retries:
                        time.sleep(delay)
                    continue
            if attempt < self.config.max_retries:
                delay = self.config.backoff_seconds * (2**attempt)
                logger.warning("retry %d/%d after %s", attempt + 1, self.config.max_retries, last_error)
                time.sleep(delay)
        raise BackendError(f"request failed after {self.config.max_retries} retries ({last_error})")

    @staticmethod
    def _parse_choice(choice: dict) -> Tuple[str, Tuple[float, ...], FinishReason]:
        message = choice.get("message") or {}
        text = message.get("content") or ""
        logprobs = ()
        lp_block = choice.get("logprobs")
        if lp_block and isinstance(lp_block.get("content"), list):
            try:
                logprobs = tuple(float(tok["logprob"]) for tok in lp_block["content"])
            except (KeyError, TypeError, ValueError):
                logprobs = ()
        finish = _FINISH_MAP.get(choice.get("finish_reason"), FinishReason.ERROR)
        if choice.get("finish_reason") is None:
            finish = FinishReason.STOP
        return text, logprobs, finish

    # -- public API ----------------------------------------------------------

    def generate(self, request: BackendRequest) -> BackendResponse:
        n = request.sample_count
        keys = [self._cache_key(request, request.first_sample_index + i) for i in range(n)]
        outputs: List[Optional[SampleOutput]] = [None] * n
        if self.cache is not None:
            for i, key in enumerate(keys):
                payload = self.cache.get(key)
                if payload is not None:
                    outputs[i] = SampleOutput(
                        text=payload["text"],
                        token_logprobs=tuple(payload.get("token_logprobs") or ()),
                        finish_reason=FinishReason(payload.get("finish_reason", "stop")),
                    )
        missing = [i for i, out in enumerate(outputs) if out is None]

        logprobs_missing = False
        if missing:
            payload = {
                "model": self.config.model,
                "messages": [{"role": "user", "content": request.prompt}],
                "n": len(missing),
                "temperature": request.sampling_temperature,
                "max_tokens": request.max_tokens,
            }
            if request.want_logprobs:
                payload["logprobs"] = True
            data = self._post_with_retries(payload)
            choices = data.get("choices") or []
            if len(choices) != len(missing):
                raise BackendError(
                    f"endpoint returned {len(choices)} choices for n={len(missing)}"
                )
            for slot, choice in zip(missing, choices):
                text, logprobs, finish = self._parse_choice(choice)
                if request.want_logprobs and not logprobs and finish != FinishReason.ERROR:
                    logprobs_missing = True
                outputs[slot] = SampleOutput(text, logprobs, finish)
                if self.cache is not None:
                    self.cache.put(
                        keys[slot],
                        {
                            "text": text,
                            "token_logprobs": list(logprobs),
                            "finish_reason": finish.value,
                        },
                    )
            if logprobs_missing:
                logger.warning(
                    "endpoint omitted token logprobs for %s; falling back to empty logprobs",
                    request.question_id,
                )
        return BackendResponse(samples=list(outputs), logprobs_missing=logprobs_missing)


def judge_classify(question: QuestionRecord, backend) -> JudgeLabel:
    """Ask the backend to rate one question easy or hard.

    Parses the first easy/hard token in the reply; anything else conservatively
    counts as hard, which routes more budget toward the question.
    """
    prompt = JUDGE_PROMPT_TEMPLATE.format(question=question.prompt)
    request = BackendRequest(
        question_id=question.id,
        prompt=prompt,
        sample_count=1,
        max_tokens=16,
        want_logprobs=False,
    )
    response = backend.generate(request)
    text = response.samples[0].text if response.samples else ""
    match = re.search(r"\b(easy|hard)\b", text.lower())
    if match is None:
        logger.info("judge reply %r unparsable; defaulting to hard", text[:80])
        return JudgeLabel.HARD
    return JudgeLabel(match.group(1))
