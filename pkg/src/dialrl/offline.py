"""Reward-annotated offline datasets, return-bin quantization, and top-return
filtering."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .corpus import Vocab

SOURCES = ("human", "model")


class OfflineError(ValueError):
    pass


@dataclass(frozen=True)
class OfflineRecord:
    context: tuple[int, ...]
    response: tuple[int, ...]
    reward: float
    source: str  # "human" | "model"
    context_id: str
    sample_index: int = -1  # -1 for the human record
    truncated: bool = False  # response hit the horizon without EOS

    def __post_init__(self):
        if self.source not in SOURCES:
            raise OfflineError(f"unknown source {self.source!r}")
        if not 0.0 <= self.reward <= 1.0:
            raise OfflineError(f"reward {self.reward} outside [0, 1]")
        if not self.response:
            raise OfflineError("empty response")

    def sort_key(self) -> tuple:
        return (self.context_id, 0 if self.source == "human" else 1, self.sample_index)


@dataclass
class OfflineDataset:
    """Records grouped by context, human record first per context.

    ``validate_stage2`` enforces the generation-time invariant (>=1 human
    record per context); filtered subsets may legitimately violate it.
    """

    records: list[OfflineRecord]
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def sorted(self) -> "OfflineDataset":
        return OfflineDataset(records=sorted(self.records, key=OfflineRecord.sort_key),
                              provenance=dict(self.provenance))

    def returns(self) -> np.ndarray:
        return np.asarray([r.reward for r in self.records], dtype=np.float64)

    def group_by_context(self) -> dict[str, list[OfflineRecord]]:
        groups: dict[str, list[OfflineRecord]] = {}
        for r in self.records:
            groups.setdefault(r.context_id, []).append(r)
        return groups

    def validate_stage2(self) -> None:
        for cid, group in self.group_by_context().items():
            if not any(r.source == "human" for r in group):
                raise OfflineError(f"context {cid} has no human record")

    def subsample_contexts(self, fraction: float, seed: int) -> "OfflineDataset":
        """Keep a context-group subsample (never splits a group)."""
        if not 0.0 < fraction <= 1.0:
            raise OfflineError("fraction must lie in (0, 1]")
        ids = sorted(self.group_by_context())
        if fraction == 1.0:
            return self
        rng = np.random.default_rng(seed)
        keep_n = max(1, int(round(fraction * len(ids))))
        keep = set(np.array(ids, dtype=object)[rng.permutation(len(ids))[:keep_n]])
        return OfflineDataset(
            records=[r for r in self.records if r.context_id in keep],
            provenance={**self.provenance, "fraction": fraction, "fraction_seed": seed},
        )

    def save_jsonl(self, path: str | Path) -> None:
        """Header line with provenance, then one record per line in stable order."""
        path = Path(path)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write(json.dumps({"provenance": self.provenance}, sort_keys=True,
                                separators=(",", ":")) + "\n")
            for r in sorted(self.records, key=OfflineRecord.sort_key):
                fh.write(json.dumps({
                    "context": list(r.context), "response": list(r.response),
                    "reward": r.reward, "source": r.source, "context_id": r.context_id,
                    "sample_index": r.sample_index, "truncated": r.truncated,
                }, sort_keys=True, separators=(",", ":")) + "\n")

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "OfflineDataset":
        path = Path(path)
        records = []
        provenance: dict = {}
        with path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise OfflineError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
                if lineno == 1 and "provenance" in obj:
                    provenance = obj["provenance"]
                    continue
                records.append(OfflineRecord(
                    context=tuple(obj["context"]), response=tuple(obj["response"]),
                    reward=float(obj["reward"]), source=obj["source"],
                    context_id=obj["context_id"], sample_index=int(obj["sample_index"]),
                    truncated=bool(obj["truncated"]),
                ))
        return cls(records=records, provenance=provenance)


@dataclass(frozen=True)
class BinQuantizer:
    """K return bins over [0, 1] with their vocabulary tokens; top bin is
    right-inclusive so r = 1 always lands in R_{K-1}."""

    edges: tuple[float, ...]  # K+1 strictly increasing, edges[0]=0, edges[-1]=1
    bin_token_ids: tuple[int, ...]

    def __post_init__(self):
        K = len(self.bin_token_ids)
        if K < 2:
            raise OfflineError("need at least 2 bins")
        if len(self.edges) != K + 1:
            raise OfflineError(f"need {K + 1} edges for {K} bins, got {len(self.edges)}")
        if self.edges[0] != 0.0 or self.edges[-1] != 1.0:
            raise OfflineError("edges must start at 0 and end at 1")
        if any(a >= b for a, b in zip(self.edges, self.edges[1:])):
            raise OfflineError("edges must be strictly increasing")

    @property
    def n_bins(self) -> int:
        return len(self.bin_token_ids)

    @classmethod
    def uniform(cls, vocab: Vocab) -> "BinQuantizer":
        K = vocab.n_bins
        return cls(edges=tuple(k / K for k in range(K + 1)), bin_token_ids=vocab.bin_ids)

    def bin_index(self, r: float) -> int:
        if not 0.0 <= r <= 1.0:
            raise OfflineError(f"return {r} outside [0, 1]")
        if r == 1.0:
            return self.n_bins - 1
        idx = int(np.searchsorted(np.asarray(self.edges), r, side="right")) - 1
        return min(max(idx, 0), self.n_bins - 1)

    def token_for(self, r: float) -> int:
        return self.bin_token_ids[self.bin_index(r)]

    @property
    def top_bin_token(self) -> int:
        return self.bin_token_ids[-1]


def quantize_return(r: float, quantizer: BinQuantizer) -> int:
    """Deterministic bin token for a return in [0, 1]."""
    return quantizer.token_for(r)


@dataclass(frozen=True)
class TopFilterConfig:
    """Keep records with return >= 1 - delta (boundary inclusive). ``quantile``
    derives the threshold from the q-th percentile of the return distribution."""

    delta: float | None = None
    quantile: float | None = None

    def __post_init__(self):
        if (self.delta is None) == (self.quantile is None):
            raise OfflineError("specify exactly one of delta or quantile")
        if self.delta is not None and not 0.0 <= self.delta <= 1.0:
            raise OfflineError("delta must lie in [0, 1]")
        if self.quantile is not None and not 0.0 <= self.quantile <= 1.0:
            raise OfflineError("quantile must lie in [0, 1]")

    def threshold(self, returns: np.ndarray) -> float:
        if self.delta is not None:
            return 1.0 - self.delta
        return float(np.percentile(returns, 100.0 * self.quantile))


def filter_top(dataset: OfflineDataset, cfg: TopFilterConfig) -> OfflineDataset:
    """D_top: exactly the records whose return clears the threshold; for binary
    rewards this is exactly the reward-1 set."""
    if not dataset.records:
        raise OfflineError("cannot filter an empty dataset")
    thr = cfg.threshold(dataset.returns())
    kept = [r for r in dataset.records if r.reward >= thr]
    if not kept:
        raise OfflineError(
            f"top-return filter at threshold {thr} kept nothing; lower the threshold")
    return OfflineDataset(records=kept,
                          provenance={**dataset.provenance, "filter_threshold": thr})


def filter_human_only(dataset: OfflineDataset) -> OfflineDataset:
    """The quantile-1 ablation endpoint: train on the human responses only."""
    kept = [r for r in dataset.records if r.source == "human"]
    if not kept:
        raise OfflineError("dataset has no human records")
    return OfflineDataset(records=kept,
                          provenance={**dataset.provenance, "filter_threshold": "human_only"})
