"""Terminal similarity rewards in [0, 1] and the thresholded binary click reward.

Scorers compare a generated response against the pair's target over surface
tokens (PAD/EOS/SEP and reward-bin tokens excluded). An empty generated
response scores 0 under every scorer. BERTScore-style learned scorers are not
implemented natively; plug them in through :class:`ExternalScorer`.
"""

from __future__ import annotations

import json
import math
import subprocess
import threading
import warnings
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

from .corpus import ContextResponsePair, Vocab

SCORERS = ("exact_match", "token_f1", "bleu", "paraphrase_class", "external")

RewardFn = Callable[[Sequence[int], ContextResponsePair], float]


class RewardError(ValueError):
    """Raised on invalid reward configuration or scorer protocol violations."""


@dataclass(frozen=True)
class RewardSpec:
    """Scorer choice plus the click threshold; binarize=True yields the click reward."""

    scorer: str = "paraphrase_class"
    click_threshold: float = 0.6
    binarize: bool = True
    max_n: int = 4  # bleu only
    scorer_cmd: str | None = None  # external only

    def __post_init__(self):
        if self.scorer not in SCORERS:
            raise RewardError(f"unknown scorer {self.scorer!r}; expected one of {SCORERS}")
        if not 0.0 < self.click_threshold < 1.0:
            raise RewardError("click_threshold must lie in (0, 1)")
        if self.scorer == "external" and not self.scorer_cmd:
            raise RewardError("external scorer requires scorer_cmd")

    def to_dict(self) -> dict:
        return {
            "scorer": self.scorer,
            "click_threshold": self.click_threshold,
            "binarize": self.binarize,
            "max_n": self.max_n,
            "scorer_cmd": self.scorer_cmd,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RewardSpec":
        return cls(**{k: d[k] for k in ("scorer", "click_threshold", "binarize", "max_n", "scorer_cmd") if k in d})


def token_f1(generated: Sequence, target: Sequence) -> float:
    """Harmonic mean of multiset-overlap precision and recall; empty side scores 0."""
    if not generated or not target:
        return 0.0
    gc, tc = Counter(generated), Counter(target)
    overlap = sum((gc & tc).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(generated)
    recall = overlap / len(target)
    return 2 * precision * recall / (precision + recall)


def _ngram_counts(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(generated: Sequence, target: Sequence, max_n: int = 4) -> float:
    """Sentence BLEU in [0, 1]: geometric mean of clipped n-gram precisions times
    the brevity penalty, no smoothing.

    The n-gram order is capped at the reference length so that a verbatim match
    of a short reference still scores 1; any zero precision yields 0.
    """
    if max_n < 1:
        raise RewardError("max_n must be >= 1")
    if not generated or not target:
        return 0.0
    orders = min(max_n, len(target))
    log_sum = 0.0
    for n in range(1, orders + 1):
        cand = _ngram_counts(generated, n)
        total = sum(cand.values())
        if total == 0:
            return 0.0
        ref = _ngram_counts(target, n)
        clipped = sum(min(c, ref[g]) for g, c in cand.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total) / orders
    c, r = len(generated), len(target)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * math.exp(log_sum)


def exact_match(generated: Sequence, target: Sequence) -> float:
    if not generated or not target:
        return 0.0
    return 1.0 if tuple(generated) == tuple(target) else 0.0


def click(score: float, threshold: float) -> float:
    """Binary reward: 1 iff score clears the threshold (boundary inclusive)."""
    if not 0.0 < threshold < 1.0:
        raise RewardError("click threshold must lie in (0, 1)")
    return 1.0 if score >= threshold else 0.0


def paraphrase_class_reward(
    generated_surface: tuple[str, ...],
    pair: ContextResponsePair,
    registry: dict[int, frozenset[tuple[str, ...]]],
) -> float:
    """1 iff the generated surface form is a member realization of the pair's class."""
    if pair.paraphrase_class is None:
        raise RewardError(f"pair {pair.pair_id} carries no paraphrase class")
    members = registry.get(pair.paraphrase_class)
    if members is None:
        raise RewardError(f"paraphrase class {pair.paraphrase_class} not in registry")
    return 1.0 if tuple(generated_surface) in members else 0.0


def make_similarity_fn(
    spec: RewardSpec,
    vocab: Vocab,
    registry: dict[int, frozenset[tuple[str, ...]]] | None = None,
) -> RewardFn:
    """Continuous scorer (pre-threshold) taking (generated token ids, pair)."""
    if spec.scorer == "external":
        raise RewardError("external scorer is batch-only; use ExternalScorer directly")

    def fn(generated_ids: Sequence[int], pair: ContextResponsePair) -> float:
        gen = vocab.strip_special(generated_ids)
        tgt = vocab.strip_special(pair.response)
        if spec.scorer == "exact_match":
            return exact_match(gen, tgt)
        if spec.scorer == "token_f1":
            return token_f1(gen, tgt)
        if spec.scorer == "bleu":
            return bleu(gen, tgt, max_n=spec.max_n)
        if registry is None:
            raise RewardError("paraphrase_class scorer needs a registry")
        surface = tuple(vocab.decode(gen))
        return paraphrase_class_reward(surface, pair, registry)

    return fn


def make_reward_fn(
    spec: RewardSpec,
    vocab: Vocab,
    registry: dict[int, frozenset[tuple[str, ...]]] | None = None,
) -> RewardFn:
    """Terminal reward: the similarity scorer, thresholded when spec.binarize."""
    sim = make_similarity_fn(spec, vocab, registry)
    if not spec.binarize:
        return sim

    def fn(generated_ids: Sequence[int], pair: ContextResponsePair) -> float:
        return click(sim(generated_ids, pair), spec.click_threshold)

    return fn


class ExternalScorer:
    """Bridge to a child-process scorer speaking a line-based JSON protocol.

    Per batch the parent writes one ``{"id": int, "generated": str, "target":
    str}`` object per line followed by a blank line; the child replies one
    ``{"id": int, "score": float}`` per line, any order, ids matching exactly.
    One handle serializes access to one child; pool handles for parallelism.
    """

    def __init__(self, scorer_cmd: str):
        self._cmd = scorer_cmd
        self._lock = threading.Lock()
        self._proc = subprocess.Popen(
            scorer_cmd, shell=True, text=True, encoding="utf-8",
            stdin=subprocess.PIPE, stdout=subprocess.PIPE,
        )

    def score_batch(self, batch: list[tuple[str, str]]) -> list[float]:
        """One score per (generated, target) string pair, order preserved, clamped to [0, 1]."""
        with self._lock:
            self._check_alive()
            try:
                for i, (gen, tgt) in enumerate(batch):
                    line = json.dumps({"id": i, "generated": gen, "target": tgt})
                    self._proc.stdin.write(line + "\n")
                self._proc.stdin.write("\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError):
                self._proc.wait(timeout=10)
                self._check_alive()
                raise RewardError("external scorer closed its input stream") from None

            scores: dict[int, float] = {}
            for k in range(len(batch)):
                reply = self._proc.stdout.readline()
                if reply == "":
                    self._check_alive()
                    raise RewardError(
                        f"external scorer closed stream after {k} of {len(batch)} replies")
                try:
                    obj = json.loads(reply)
                    rid, score = int(obj["id"]), float(obj["score"])
                except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                    raise RewardError(
                        f"external scorer: malformed reply for batch item {k}: {reply!r}") from None
                if rid in scores or not 0 <= rid < len(batch):
                    raise RewardError(f"external scorer: bad or duplicate id {rid} at reply {k}")
                scores[rid] = score
        out = []
        for i in range(len(batch)):
            s = scores[i]
            if not 0.0 <= s <= 1.0:
                warnings.warn(f"external scorer returned {s} for item {i}; clamping to [0, 1]")
                s = min(1.0, max(0.0, s))
            out.append(s)
        return out

    def _check_alive(self) -> None:
        code = self._proc.poll()
        if code is not None and code != 0:
            raise RewardError(f"external scorer exited with status {code}")

    def close(self) -> None:
        if self._proc.poll() is None:
            self._proc.stdin.close()
            self._proc.wait(timeout=10)

    def __enter__(self) -> "ExternalScorer":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def external_score(batch: list[tuple[str, str]], scorer_cmd: str) -> list[float]:
    """One-shot convenience wrapper around :class:`ExternalScorer`."""
    with ExternalScorer(scorer_cmd) as scorer:
        return scorer.score_batch(batch)
