"""Generator and ranker evaluation, ablation sweeps, and CSV/plot emission.

Every ranker scores the same candidate sets (hash-checked); top-k curves are
prefix maxima and therefore nondecreasing by construction; all emitted files
are byte-deterministic given identical inputs.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import ContextResponsePair, Vocab
from .model import (
    DecodeConfig,
    PolicyModel,
    forward_hidden,
    forward_logits_batch,
    perplexity,
    q_head,
    sample_for_contexts,
)
from .autodiff import no_grad
from .offline import BinQuantizer, OfflineDataset, TopFilterConfig, filter_human_only, filter_top
from .rewards import RewardFn, RewardSpec, bleu, make_reward_fn, make_similarity_fn, token_f1
from .trainers import ILQLConfig, TrainConfig, train_ilql, train_tf_all, train_tf_top

N_HISTOGRAM_BINS = 10


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    method: str
    seed: int
    data_fraction: float
    mean_click: float
    mean_similarity: float
    mean_token_f1: float
    mean_bleu: float
    perplexity: float | None
    histogram: tuple[float, ...]  # masses over 10 uniform similarity bins
    top_k: tuple[float, ...]  # mean best click reward over k=1..K samples
    n_pairs: int

    def __post_init__(self):
        if abs(sum(self.histogram) - 1.0) > 1e-9:
            raise EvalError("histogram masses must sum to 1")
        if any(b < a - 1e-12 for a, b in zip(self.top_k, self.top_k[1:])):
            raise EvalError("top-k curve must be nondecreasing")


def _histogram(scores: Sequence[float]) -> tuple[float, ...]:
    counts, _ = np.histogram(np.asarray(scores, dtype=np.float64),
                             bins=N_HISTOGRAM_BINS, range=(0.0, 1.0))
    return tuple((counts / counts.sum()).tolist())


def eval_generation(
    model: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    vocab: Vocab,
    reward_spec: RewardSpec,
    registry: dict | None = None,
    decode: DecodeConfig | None = None,
    condition: int | None = None,
    use_implicit_policy: bool = False,
    reference_model: PolicyModel | None = None,
    k_max: int = 5,
    seed: int = 0,
    data_fraction: float = 1.0,
    method: str = "model",
) -> EvalReport:
    """Greedy metrics, a 10-bin similarity histogram, and a seeded top-k curve."""
    if not pairs:
        raise EvalError("eval_generation: no pairs")
    decode = decode or DecodeConfig(mode="sample", temperature=1.0, top_k=0, max_len=16)
    sim_fn = make_similarity_fn(reward_spec, vocab, registry)
    click_fn = make_reward_fn(reward_spec, vocab, registry)

    greedy_cfg = DecodeConfig(mode="greedy", max_len=decode.max_len)
    contexts = [p.context for p in pairs]
    greedy = [r[0] for r in sample_for_contexts(
        model, contexts, 1, greedy_cfg, condition=condition,
        use_implicit_policy=use_implicit_policy)]

    sims, clicks, f1s, bleus = [], [], [], []
    for resp, pair in zip(greedy, pairs):
        sims.append(sim_fn(resp, pair))
        clicks.append(click_fn(resp, pair))
        gen = vocab.strip_special(resp)
        tgt = vocab.strip_special(pair.response)
        f1s.append(token_f1(gen, tgt))
        bleus.append(bleu(gen, tgt))

    rng = np.random.default_rng([seed, 7000])
    sampled = sample_for_contexts(model, contexts, k_max, decode, condition=condition,
                                  rng=rng, use_implicit_policy=use_implicit_policy)
    rewards = np.asarray([[click_fn(r, pair) for r in resp_list]
                          for pair, resp_list in zip(pairs, sampled)])
    top_k = tuple(float(np.maximum.accumulate(rewards, axis=1)[:, k].mean())
                  for k in range(k_max))

    ppl = None
    if reference_model is not None:
        pseudo = [ContextResponsePair(context=p.context, response=tuple(resp),
                                      pair_id=f"{p.pair_id}:gen")
                  for p, resp in zip(pairs, greedy)]
        ppl = perplexity(reference_model, pseudo)

    return EvalReport(
        method=method, seed=seed, data_fraction=data_fraction,
        mean_click=float(np.mean(clicks)), mean_similarity=float(np.mean(sims)),
        mean_token_f1=float(np.mean(f1s)), mean_bleu=float(np.mean(bleus)),
        perplexity=ppl, histogram=_histogram(sims), top_k=top_k, n_pairs=len(pairs),
    )


# ---------------------------------------------------------------------------
# ranker mode
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankerEntry:
    """How one method scores candidates: 'logprob' (optionally conditioned on
    the top return bin) or the ILQL critic's mean in-sequence Q."""

    kind: str  # logprob | logprob_top_bin | ilql_critic | oracle | random
    model: PolicyModel | None = None


@dataclass
class RankerResult:
    mean_rewards: dict[str, float]
    candidate_hash: str
    n_candidates: int
    picked_rewards: dict[str, list[float]] = field(default_factory=dict)


def _batched_logprob_scores(model: PolicyModel, pair: ContextResponsePair,
                            candidates: list[tuple[int, ...]],
                            condition: int | None) -> np.ndarray:
    prompt = list(pair.context) + ([condition] if condition is not None else [])
    C = len(prompt)
    tmax = C + max(len(c) for c in candidates)
    ids = np.full((len(candidates), tmax), model.specials.pad, dtype=np.int64)
    for b, cand in enumerate(candidates):
        ids[b, :C] = prompt
        ids[b, C:C + len(cand)] = cand
    with no_grad():
        logits = forward_logits_batch(model, ids).data
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    scores = np.zeros(len(candidates))
    for b, cand in enumerate(candidates):
        pos = np.arange(C - 1, C - 1 + len(cand))
        scores[b] = logp[b, pos, list(cand)].sum()
    return scores


def _critic_scores(model: PolicyModel, pair: ContextResponsePair,
                   candidates: list[tuple[int, ...]]) -> np.ndarray:
    C = len(pair.context)
    tmax = C + max(len(c) for c in candidates)
    ids = np.full((len(candidates), tmax), model.specials.pad, dtype=np.int64)
    for b, cand in enumerate(candidates):
        ids[b, :C] = pair.context
        ids[b, C:C + len(cand)] = cand
    with no_grad():
        q = q_head(model, forward_hidden(model, ids)).data
    scores = np.zeros(len(candidates))
    for b, cand in enumerate(candidates):
        pos = np.arange(C - 1, C - 1 + len(cand))
        scores[b] = q[b, pos, list(cand)].mean()
    return scores


def eval_ranker(
    methods: dict[str, RankerEntry],
    pi_beta: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    reward_fn: RewardFn,
    quantizer: BinQuantizer,
    n_candidates: int = 5,
    decode: DecodeConfig | None = None,
    seed: int = 0,
) -> RankerResult:
    """Score shared behavior-policy candidate sets and pick the argmax
    (ties to the lowest candidate index); report mean reward of the picks."""
    if not pairs:
        raise EvalError("eval_ranker: no pairs")
    decode = decode or DecodeConfig(mode="sample", temperature=1.0, top_k=0, max_len=16)
    rng = np.random.default_rng([seed, 7100])
    candidate_sets = sample_for_contexts(pi_beta, [p.context for p in pairs],
                                         n_candidates, decode, rng=rng)
    h = hashlib.sha256()
    for cands in candidate_sets:
        for c in cands:
            h.update(bytes(str(c), "utf-8"))
    cand_hash = h.hexdigest()

    reward_table = [np.asarray([reward_fn(c, pair) for c in cands])
                    for pair, cands in zip(pairs, candidate_sets)]

    random_rng = np.random.default_rng([seed, 7200])
    result = RankerResult(mean_rewards={}, candidate_hash=cand_hash, n_candidates=n_candidates)
    for name, entry in methods.items():
        picked: list[float] = []
        for pair, cands, rewards in zip(pairs, candidate_sets, reward_table):
            if entry.kind == "logprob":
                scores = _batched_logprob_scores(entry.model, pair, cands, None)
            elif entry.kind == "logprob_top_bin":
                scores = _batched_logprob_scores(entry.model, pair, cands,
                                                 quantizer.top_bin_token)
            elif entry.kind == "ilql_critic":
                scores = _critic_scores(entry.model, pair, cands)
            elif entry.kind == "oracle":
                scores = rewards
            elif entry.kind == "random":
                scores = random_rng.random(len(cands))
            else:
                raise EvalError(f"unknown ranker kind {entry.kind!r}")
            picked.append(float(rewards[int(np.argmax(scores))]))
        result.picked_rewards[name] = picked
        result.mean_rewards[name] = float(np.mean(picked))
    return result


# ---------------------------------------------------------------------------
# ablation sweeps
# ---------------------------------------------------------------------------

def ablate_threshold(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    quantiles: Sequence[float],
    train_cfg: TrainConfig,
    eval_fn: Callable[[PolicyModel], float],
) -> list[tuple[float, float]]:
    """TF-Top per return quantile. q=0 keeps everything (TF-All behavior);
    q=1 trains on the human records only (continued-TF endpoint)."""
    if 0.0 not in quantiles or 1.0 not in quantiles:
        raise EvalError("quantiles must include both endpoints 0 and 1")
    curve = []
    for q in quantiles:
        if q >= 1.0:
            filtered = filter_human_only(dataset)
        elif q <= 0.0:
            filtered = dataset
        else:
            filtered = filter_top(dataset, TopFilterConfig(quantile=q))
        model, _ = train_tf_all(pi_beta, filtered, train_cfg)
        curve.append((float(q), float(eval_fn(model))))
    return curve


def ablate_alpha(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    alphas: Sequence[float],
    base_cfg: ILQLConfig,
    eval_fn: Callable[[PolicyModel], float],
) -> list[tuple[float, float]]:
    """ILQL KL-regularization sweep; the implicit policy is evaluated per alpha."""
    from dataclasses import replace
    curve = []
    for alpha in alphas:
        model, _ = train_ilql(pi_beta, dataset, replace(base_cfg, alpha=float(alpha)))
        curve.append((float(alpha), float(eval_fn(model))))
    return curve


def data_fraction_sweep(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    fractions: Sequence[float],
    quantizer: BinQuantizer,
    dt_cfg: TrainConfig,
    tf_top_cfg: TrainConfig,
    top_filter: TopFilterConfig,
    eval_fn: Callable[[PolicyModel], float],
    subsample_seed: int = 0,
) -> dict[float, dict[str, float]]:
    """DT vs TF-Top at context-group subsamples of the offline dataset."""
    from .trainers import train_dt
    out: dict[float, dict[str, float]] = {}
    for frac in fractions:
        sub = dataset.subsample_contexts(float(frac), subsample_seed)
        dt_model, _ = train_dt(pi_beta, sub, quantizer, dt_cfg)
        top_model, _ = train_tf_top(pi_beta, sub, tf_top_cfg, top_filter)
        out[float(frac)] = {"dt": float(eval_fn(dt_model)), "tf_top": float(eval_fn(top_model))}
    return out


# ---------------------------------------------------------------------------
# report emission
# ---------------------------------------------------------------------------

def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".10g")
    return str(x)


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def emit_report(
    reports: Sequence[EvalReport],
    out_dir: str | Path,
    ranker: RankerResult | None = None,
    threshold_curve: Sequence[tuple[float, float]] | None = None,
    alpha_curve: Sequence[tuple[float, float]] | None = None,
    fraction_table: dict[float, dict[str, float]] | None = None,
    plots: bool = True,
) -> list[Path]:
    """Write one CSV per table-analog and one plot per figure-analog.

    Byte-deterministic: stable row order and fixed float formatting.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise EvalError(f"cannot write to {out_dir}: {exc}") from None

    written: list[Path] = []
    reports = sorted(reports, key=lambda r: (r.method, r.seed, r.data_fraction))

    metrics = out_dir / "metrics.csv"
    _write_csv(metrics,
               ["method", "seed", "data_fraction", "mean_click", "mean_similarity",
                "mean_token_f1", "mean_bleu", "perplexity", "n_pairs"],
               [[r.method, r.seed, r.data_fraction, r.mean_click, r.mean_similarity,
                 r.mean_token_f1, r.mean_bleu, r.perplexity, r.n_pairs] for r in reports])
    written.append(metrics)

    hist = out_dir / "histogram.csv"
    rows = []
    for r in reports:
        for i, mass in enumerate(r.histogram):
            rows.append([r.method, r.seed, i / N_HISTOGRAM_BINS, (i + 1) / N_HISTOGRAM_BINS, mass])
    _write_csv(hist, ["method", "seed", "bin_lo", "bin_hi", "mass"], rows)
    written.append(hist)

    topk = out_dir / "topk.csv"
    rows = []
    for r in reports:
        for k, value in enumerate(r.top_k, start=1):
            rows.append([r.method, r.seed, k, value])
    _write_csv(topk, ["method", "seed", "k", "mean_best_reward"], rows)
    written.append(topk)

    if ranker is not None:
        rk = out_dir / "ranker.csv"
        rows = [[name, ranker.mean_rewards[name], ranker.n_candidates, ranker.candidate_hash]
                for name in sorted(ranker.mean_rewards)]
        _write_csv(rk, ["method", "mean_reward", "n_candidates", "candidate_hash"], rows)
        written.append(rk)

    if threshold_curve is not None:
        p = out_dir / "ablation_threshold.csv"
        _write_csv(p, ["quantile", "mean_similarity"], [list(x) for x in threshold_curve])
        written.append(p)

    if alpha_curve is not None:
        p = out_dir / "ablation_alpha.csv"
        _write_csv(p, ["alpha", "mean_reward"], [list(x) for x in alpha_curve])
        written.append(p)

    if fraction_table is not None:
        p = out_dir / "data_fraction.csv"
        rows = []
        for frac in sorted(fraction_table):
            for method in sorted(fraction_table[frac]):
                rows.append([frac, method, fraction_table[frac][method]])
        _write_csv(p, ["fraction", "method", "mean_reward"], rows)
        written.append(p)

    if plots:
        written.extend(_emit_plots(reports, out_dir, threshold_curve, alpha_curve,
                                   fraction_table))
    return written


def _emit_plots(reports, out_dir: Path, threshold_curve, alpha_curve,
                fraction_table) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    methods = sorted({r.method for r in reports})
    by_method = {m: [r for r in reports if r.method == m] for m in methods}

    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / max(len(methods), 1)
    centers = np.arange(N_HISTOGRAM_BINS) / N_HISTOGRAM_BINS + 0.05
    for i, m in enumerate(methods):
        masses = np.mean([r.histogram for r in by_method[m]], axis=0)
        ax.bar(centers + (i - len(methods) / 2) * width * 0.1, masses, width=width * 0.1,
               label=m)
    ax.set_xlabel("similarity score")
    ax.set_ylabel("mass")
    ax.legend()
    path = out_dir / "histogram.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(path)

    fig, ax = plt.subplots(figsize=(6, 4))
    for m in methods:
        curve = np.mean([r.top_k for r in by_method[m]], axis=0)
        ax.plot(range(1, len(curve) + 1), curve, marker="o", label=m)
    ax.set_xlabel("k")
    ax.set_ylabel("mean best reward")
    ax.legend()
    path = out_dir / "topk.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(path)

    for name, curve in (("ablation_threshold", threshold_curve), ("ablation_alpha", alpha_curve)):
        if curve is None:
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = [x for x, _ in curve]
        ys = [y for _, y in curve]
        if name == "ablation_alpha":
            ax.set_xscale("log")
        ax.plot(xs, ys, marker="o")
        ax.set_xlabel(name.split("_")[1])
        ax.set_ylabel("mean reward")
        path = out_dir / f"{name}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    if fraction_table is not None:
        fig, ax = plt.subplots(figsize=(6, 4))
        fracs = sorted(fraction_table)
        for method in sorted(fraction_table[fracs[0]]):
            ax.plot(fracs, [fraction_table[f][method] for f in fracs], marker="o", label=method)
        ax.set_xlabel("data fraction")
        ax.set_ylabel("mean reward")
        ax.legend()
        path = out_dir / "data_fraction.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    return written
