"""Difficulty signals extracted from first-round generations.

All scores are "higher means harder". Log-probability signals cost nothing
beyond the generation itself; verbalized confidence and vote entropy cover
black-box endpoints that expose no logprobs.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from typing import Sequence

from .core import SignalKind, ValidationError

#: Probability substituted when a verbalized confidence rating cannot be
#: parsed: the maximum-uncertainty midpoint.
VCS_FALLBACK_PROB = 0.5


class VcsUnparsableError(ValidationError):
    """No usable ``Confidence: <1-10>`` rating in the model output."""

    def __init__(self, detail: str = ""):
        msg = "vcs_unparsable"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


def _checked_nlls(token_logprobs: Sequence[float]) -> list[float]:
    if len(token_logprobs) == 0:
        raise ValidationError("no tokens")
    out = []
    for lp in token_logprobs:
        if not math.isfinite(lp) or lp > 0:
            raise ValidationError(f"token logprobs must be finite and <= 0, got {lp!r}")
        out.append(-float(lp))
    return out


def anll(token_logprobs: Sequence[float]) -> float:
    """Average negative log-likelihood of a generation (per-token mean)."""
    nlls = _checked_nlls(token_logprobs)
    return sum(nlls) / len(nlls)


def total_nll(token_logprobs: Sequence[float]) -> float:
    """Sum of per-token negative log-likelihoods (length-sensitive)."""
    return sum(_checked_nlls(token_logprobs))


def token_var(token_logprobs: Sequence[float]) -> float:
    """Population variance of per-token NLLs (divides by L, defined for L=1)."""
    nlls = _checked_nlls(token_logprobs)
    mean = sum(nlls) / len(nlls)
    return sum((x - mean) ** 2 for x in nlls) / len(nlls)


def max_token_nll(token_logprobs: Sequence[float]) -> float:
    """Largest per-token negative log-likelihood."""
    return max(_checked_nlls(token_logprobs))


_LOGPROB_SCORERS = {
    SignalKind.ANLL: anll,
    SignalKind.TOTAL_NLL: total_nll,
    SignalKind.TOKEN_VAR: token_var,
    SignalKind.MAX_TOKEN_NLL: max_token_nll,
}


def logprob_score(kind: SignalKind, token_logprobs: Sequence[float]) -> float:
    """Dispatch to one of the logprob-derived scorers."""
    try:
        scorer = _LOGPROB_SCORERS[kind]
    except KeyError:
        raise ValidationError(f"{kind} is not a logprob-derived signal") from None
    return scorer(token_logprobs)


def score_to_prob(score: float, temperature: float) -> float:
    """Map a difficulty score to a success probability, p = exp(-score/T).

    Small T concentrates the budget sharply on high-score questions; large T
    flattens the map toward uniform allocation.
    """
    if not (math.isfinite(score) and score >= 0):
        raise ValidationError(f"score must be finite and >= 0, got {score!r}")
    if not (math.isfinite(temperature) and temperature > 0):
        raise ValidationError(f"temperature must be > 0, got {temperature!r}")
    return math.exp(-score / temperature)


def prob_to_score(prob: float, temperature: float) -> float:
    """Inverse of :func:`score_to_prob` for signals that yield p directly."""
    if not 0.0 < prob <= 1.0:
        raise ValidationError(f"prob must be in (0, 1], got {prob!r}")
    if not temperature > 0:
        raise ValidationError("temperature must be > 0")
    return -temperature * math.log(prob)


_VCS_RE = re.compile(r"[Cc]onfidence\s*:\s*(\d+)")


def parse_vcs(text: str) -> float:
    """Extract the last ``Confidence: <n>`` self-rating and scale it to [0, 1].

    The integer must be on the 1..10 scale; surrounding whitespace and trailing
    punctuation are tolerated. Raises :class:`VcsUnparsableError` otherwise.
    """
    matches = _VCS_RE.findall(text or "")
    if not matches:
        raise VcsUnparsableError("no confidence rating found")
    value = int(matches[-1])
    if not 1 <= value <= 10:
        raise VcsUnparsableError(f"rating {value} outside 1-10")
    return value / 10.0


def vote_entropy(parsed_answers: Sequence[str]) -> float:
    """Shannon entropy (natural log) of the empirical answer distribution."""
    if len(parsed_answers) == 0:
        raise ValidationError("vote entropy needs at least one answer")
    counts = Counter(parsed_answers)
    n = len(parsed_answers)
    h = 0.0
    for c in counts.values():
        q = c / n
        h -= q * math.log(q)
    # guard tiny negative rounding when all answers agree
    return max(h, 0.0)
