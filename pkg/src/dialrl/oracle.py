"""Exact ground truth at desk scale: backward-induction DP on tree MDPs,
counting-based conditional distributions, scalar expectile solving, and exact
best-of-n expectations.

These oracles are deliberately independent of the training stack (no shared
numerical code) so they can cross-check it.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence


class OracleError(ValueError):
    pass


Prefix = tuple[int, ...]


@dataclass(frozen=True)
class TreeMDP:
    """Enumerable sequence MDP whose transition graph is a tree of token prefixes.

    ``leaves`` maps complete responses to terminal rewards; the leaf set must
    be prefix-free so every node has a unique role. ``behavior`` optionally
    gives a next-token distribution per internal node.
    """

    leaves: dict[Prefix, float]
    behavior: dict[Prefix, dict[int, float]] | None = None
    max_vocab: int = 8
    max_depth: int = 6

    def __post_init__(self):
        if not self.leaves:
            raise OracleError("tree has no leaves")
        tokens = {t for leaf in self.leaves for t in leaf}
        if len(tokens) > self.max_vocab:
            raise OracleError(f"tree vocab {len(tokens)} exceeds cap {self.max_vocab}")
        for leaf, r in self.leaves.items():
            if not leaf:
                raise OracleError("empty response cannot be a leaf")
            if len(leaf) > self.max_depth:
                raise OracleError(f"leaf {leaf} deeper than cap {self.max_depth}")
            if not 0.0 <= r <= 1.0:
                raise OracleError(f"leaf {leaf} reward {r} outside [0, 1]")
        ordered = sorted(self.leaves)
        for a, b in zip(ordered, ordered[1:]):
            if b[:len(a)] == a:
                raise OracleError(f"leaf {a} is a prefix of leaf {b}; not a tree")

    def children(self, node: Prefix) -> list[int]:
        """Actions available at an internal node."""
        seen = []
        for leaf in sorted(self.leaves):
            if leaf[:len(node)] == node and len(leaf) > len(node):
                a = leaf[len(node)]
                if a not in seen:
                    seen.append(a)
        return seen

    def internal_nodes(self) -> list[Prefix]:
        nodes = {()}
        for leaf in self.leaves:
            for i in range(1, len(leaf)):
                nodes.add(leaf[:i])
        return sorted(nodes, key=lambda p: (len(p), p))

    def to_json(self) -> str:
        obj: dict = {"leaves": {",".join(map(str, k)): v for k, v in sorted(self.leaves.items())}}
        if self.behavior is not None:
            obj["behavior"] = {
                ",".join(map(str, k)): {str(a): p for a, p in sorted(dist.items())}
                for k, dist in sorted(self.behavior.items())
            }
        return json.dumps(obj, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "TreeMDP":
        obj = json.loads(text)

        def parse_key(k: str) -> Prefix:
            return tuple(int(x) for x in k.split(",")) if k else ()

        leaves = {parse_key(k): float(v) for k, v in obj["leaves"].items()}
        behavior = None
        if "behavior" in obj:
            behavior = {parse_key(k): {int(a): float(p) for a, p in d.items()}
                        for k, d in obj["behavior"].items()}
        return cls(leaves=leaves, behavior=behavior)

    @classmethod
    def load(cls, path: str | Path) -> "TreeMDP":
        return cls.from_json(Path(path).read_text())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def tree_dp(mdp: TreeMDP, gamma: float = 1.0) -> tuple[dict[tuple[Prefix, int], float], dict[Prefix, float]]:
    """Backward induction: Q*(s,a) = r(s+a) + gamma * V*(s+a), V* = max_a Q*, terminal V* = 0."""
    if not 0.0 < gamma <= 1.0:
        raise OracleError("gamma must lie in (0, 1]")
    v_star: dict[Prefix, float] = {leaf: 0.0 for leaf in mdp.leaves}
    q_star: dict[tuple[Prefix, int], float] = {}
    for node in reversed(mdp.internal_nodes()):
        best = None
        for a in mdp.children(node):
            child = node + (a,)
            reward = mdp.leaves.get(child, 0.0)
            q = reward + gamma * v_star[child]
            q_star[(node, a)] = q
            best = q if best is None else max(best, q)
        if best is None:
            raise OracleError(f"internal node {node} has no children")
        v_star[node] = best
    return q_star, v_star


def expectile_bellman_fixed_point(
    mdp: TreeMDP, tau: float, gamma: float = 1.0,
    weights: Mapping[Prefix, float] | None = None,
) -> tuple[dict[tuple[Prefix, int], float], dict[Prefix, float]]:
    """Like tree_dp but V(s) is the tau-expectile of in-data Q(s, a) samples,
    weighted by trajectory counts. This is the exact target of expectile-based
    offline Q-learning on full-coverage tree data."""
    weights = weights or {leaf: 1.0 for leaf in mdp.leaves}
    subtree_w: dict[Prefix, float] = {}
    for leaf, w in weights.items():
        for i in range(len(leaf) + 1):
            subtree_w[leaf[:i]] = subtree_w.get(leaf[:i], 0.0) + w
    v_fix: dict[Prefix, float] = {leaf: 0.0 for leaf in mdp.leaves}
    q_fix: dict[tuple[Prefix, int], float] = {}
    for node in reversed(mdp.internal_nodes()):
        samples, counts = [], []
        for a in mdp.children(node):
            child = node + (a,)
            q = mdp.leaves.get(child, 0.0) + gamma * v_fix[child]
            q_fix[(node, a)] = q
            samples.append(q)
            counts.append(subtree_w.get(child, 0.0))
        expanded = [q for q, c in zip(samples, counts) for _ in range(max(1, round(c)))]
        v_fix[node] = expectile(expanded, tau)
    return q_fix, v_fix


def expectile(samples: Sequence[float], tau: float, tol: float = 1e-9) -> float:
    """The unique v with tau * sum((x - v)+) = (1 - tau) * sum((v - x)+), by bisection."""
    if not samples:
        raise OracleError("expectile of empty sample set")
    if not 0.0 < tau < 1.0:
        raise OracleError("tau must lie in (0, 1)")
    lo, hi = min(samples), max(samples)
    if lo == hi:
        return float(lo)

    def balance(v: float) -> float:
        above = sum(x - v for x in samples if x > v)
        below = sum(v - x for x in samples if x < v)
        return tau * above - (1.0 - tau) * below

    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if hi - lo <= tol:
            return mid
        if balance(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class EmpiricalConditional:
    """Exact next-token distributions per (context, reward bin, prefix) state.

    States absent from a bin raise rather than silently reporting zeros.
    """

    table: dict[tuple[Prefix, int, Prefix], dict[int, float]] = field(default_factory=dict)

    def states(self) -> list[tuple[Prefix, int, Prefix]]:
        return sorted(self.table)

    def distribution(self, context: Sequence[int], bin_index: int,
                     prefix: Sequence[int]) -> dict[int, float]:
        key = (tuple(context), int(bin_index), tuple(prefix))
        if key not in self.table:
            raise OracleError(f"state {key} absent from bin {bin_index} in the data")
        return self.table[key]


def empirical_conditional(
    records: Iterable[tuple[Sequence[int], Sequence[int], int]],
) -> EmpiricalConditional:
    """Count-based conditionals from (context, response, bin_index) records.

    This is what a return-conditioned model should converge to on enumerable
    data: at every in-data state, the normalized next-token counts.
    """
    counts: dict[tuple[Prefix, int, Prefix], dict[int, int]] = {}
    for context, response, bin_index in records:
        ctx = tuple(int(t) for t in context)
        resp = tuple(int(t) for t in response)
        for t, tok in enumerate(resp):
            key = (ctx, int(bin_index), resp[:t])
            counts.setdefault(key, {}).setdefault(tok, 0)
            counts[key][tok] += 1
    table = {}
    for key, c in counts.items():
        total = sum(c.values())
        table[key] = {tok: n / total for tok, n in sorted(c.items())}
    return EmpiricalConditional(table=table)


def total_variation(p: Mapping[int, float], q: Mapping[int, float]) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def best_of_n_expectation(
    policy: Mapping, rewards: Mapping, n: int, max_outcomes: int = 10_000,
) -> float:
    """Exact E[max reward over n i.i.d. draws] via the order-statistics sum
    over distinct reward levels."""
    if n < 1:
        raise OracleError("n must be >= 1")
    if set(policy) != set(rewards):
        raise OracleError("policy and reward tables must share the same outcome set")
    if len(policy) > max_outcomes:
        raise OracleError(f"{len(policy)} outcomes exceed cap {max_outcomes}")
    total_p = sum(policy.values())
    if abs(total_p - 1.0) > 1e-9:
        raise OracleError(f"policy probabilities sum to {total_p}, not 1")
    mass_by_reward: dict[float, float] = {}
    for outcome, p in policy.items():
        mass_by_reward[float(rewards[outcome])] = mass_by_reward.get(float(rewards[outcome]), 0.0) + p
    levels = sorted(mass_by_reward)
    cdf = 0.0
    expected = 0.0
    prev_pow = 0.0
    for r in levels:
        cdf += mass_by_reward[r]
        cur_pow = cdf ** n
        expected += r * (cur_pow - prev_pow)
        prev_pow = cur_pow
    return expected
