"""The learning procedures: teacher forcing (TF), TF-All, TF-Top, return-token
conditioning (DT), implicit Q-learning over frozen behavior logits (ILQL),
PPO, the Quark-style collect-and-retrain outer loop, and Stage-2 offline
dataset generation.

All offline trainers share one LM training loop, so degenerate configurations
coincide exactly (TF-Top on the full dataset reproduces TF-All's loss
trajectory; the outer loop with zero collection reproduces DT's).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import ContextResponsePair
from .model import (
    DecodeConfig,
    ILQLHeadSpec,
    PolicyModel,
    attach_ilql_heads,
    attach_value_head,
    forward_hidden,
    forward_logits_batch,
    lm_logits,
    polyak_update_target_v,
    q_head,
    sample_for_contexts,
    v_head,
    value_head,
)
from .offline import BinQuantizer, OfflineDataset, OfflineRecord, TopFilterConfig, filter_top
from .optim import adam_step, schedule_lr
from .rewards import RewardFn


class TrainerError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """LM training loop settings (TF and the offline fine-tuners)."""

    epochs: int = 5
    batch_size: int = 32
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    lr_schedule: str = "cosine"
    seed: int = 0
    shuffle: bool = True


@dataclass(frozen=True)
class ILQLConfig:
    """Q/V head training; alpha weighs the KL pull toward the behavior logits."""

    alpha: float = 0.05
    tau: float = 0.7
    gamma: float = 1.0  # 0.99 preset available via config files
    eta: float = 1.0
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    lr_schedule: str = "cosine"
    seed: int = 0
    finetune_backbone: bool = False
    polyak: float = 0.0  # target-V copy rate; 0 keeps Eq.-as-printed V(s')
    head_hidden: int | None = None

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise TrainerError("tau must lie in (0, 1)")
        if self.alpha < 0:
            raise TrainerError("alpha must be >= 0")
        if not 0.0 < self.gamma <= 1.0:
            raise TrainerError("gamma must lie in (0, 1]")


@dataclass(frozen=True)
class PPOConfig:
    kl_coef: float = 0.2  # initial; adapted toward kl_target when adaptive_kl
    value_coef: float = 2.3
    rollout_batch: int = 16
    epochs_per_batch: int = 4
    n_batches: int = 8
    clip_ratio: float | None = 0.2
    kl_target: float = 0.05
    adaptive_kl: bool = True
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kl_coef < 0 or self.value_coef < 0:
            raise TrainerError("PPO coefficients must be >= 0")


@dataclass
class TrainHistory:
    step_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int | None = None


# ---------------------------------------------------------------------------
# shared LM loop
# ---------------------------------------------------------------------------

Example = tuple[tuple[int, ...], int]  # (token ids, index of first loss target)


def pair_examples(pairs: Sequence[ContextResponsePair]) -> list[Example]:
    return [(tuple(p.context) + tuple(p.response), len(p.context)) for p in pairs]


def record_examples(records: Sequence[OfflineRecord]) -> list[Example]:
    return [(r.context + r.response, len(r.context)) for r in records]


def dt_examples(records: Sequence[OfflineRecord], quantizer: BinQuantizer) -> list[Example]:
    """(context, bin token, response); the bin token is conditioning, not a target."""
    out = []
    for r in records:
        ids = r.context + (quantizer.token_for(r.reward),) + r.response
        out.append((ids, len(r.context) + 1))
    return out


def _assemble_batch(model: PolicyModel, examples: Sequence[Example]):
    pad = model.specials.pad
    tmax = max(len(ids) for ids, _ in examples)
    B = len(examples)
    ids = np.full((B, tmax), pad, dtype=np.int64)
    targets = np.zeros((B, tmax), dtype=np.int64)
    mask = np.zeros((B, tmax), dtype=model.cfg.np_dtype)
    for b, (seq, first_target) in enumerate(examples):
        L = len(seq)
        ids[b, :L] = seq
        targets[b, :L - 1] = seq[1:]
        mask[b, first_target - 1:L - 1] = 1.0
    return ids, targets, mask


def _mean_nll(model: PolicyModel, examples: Sequence[Example], batch_size: int) -> float:
    """Pooled per-token NLL over the loss positions (validation metric)."""
    total, count = 0.0, 0
    for lo in range(0, len(examples), batch_size):
        ids, targets, mask = _assemble_batch(model, examples[lo:lo + batch_size])
        with no_grad():
            logits = forward_logits_batch(model, ids).data
        z = logits - logits.max(axis=-1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        total += float(-(picked * mask).sum())
        count += int(mask.sum())
    return total / max(count, 1)


def _lm_epoch(
    model: PolicyModel,
    examples: Sequence[Example],
    cfg: TrainConfig,
    epoch: int,
    lr_fn: Callable[[int], float],
    global_step: int,
    history: TrainHistory,
) -> int:
    """One pass over the examples; returns the updated global step counter."""
    n = len(examples)
    order = (np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n)
             if cfg.shuffle else np.arange(n))
    for lo in range(0, n, cfg.batch_size):
        batch = [examples[i] for i in order[lo:lo + cfg.batch_size]]
        ids, targets, mask = _assemble_batch(model, batch)
        model.store.zero_grad()
        loss = ad.cross_entropy_masked(forward_logits_batch(model, ids), targets, mask)
        loss.backward()
        adam_step(model.store, lr=lr_fn(global_step), beta1=cfg.beta1, beta2=cfg.beta2,
                  eps=cfg.eps, weight_decay=cfg.weight_decay,
                  names=model.backbone_param_names())
        history.step_losses.append(loss.item())
        global_step += 1
    return global_step


def _train_lm(
    model: PolicyModel,
    examples: Sequence[Example],
    cfg: TrainConfig,
    val_examples: Sequence[Example] | None = None,
) -> TrainHistory:
    """The shared loop: masked next-token cross-entropy, Adam, LR schedule,
    best-epoch checkpoint by validation loss when a validation set is given."""
    if not examples:
        raise TrainerError("no training examples")
    history = TrainHistory()
    steps_per_epoch = math.ceil(len(examples) / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch

    def lr_fn(step: int) -> float:
        return schedule_lr(cfg.lr_schedule, cfg.lr, step, total_steps)

    best_val = math.inf
    best_params = None
    step = 0
    for epoch in range(cfg.epochs):
        step = _lm_epoch(model, examples, cfg, epoch, lr_fn, step, history)
        if val_examples:
            val = _mean_nll(model, val_examples, cfg.batch_size)
            history.val_losses.append(val)
            if val < best_val:
                best_val = val
                history.best_epoch = epoch
                best_params = {n: model.store[n].data.copy() for n in model.store.names()}
    if best_params is not None:
        for name, data in best_params.items():
            model.store[name].data[...] = data
    return history


def _reset_adam(model: PolicyModel) -> None:
    for name, st in model.store.state.items():
        st.m[...] = 0.0
        st.v[...] = 0.0
        st.step = 0


# ---------------------------------------------------------------------------
# stage 1: behavior policy
# ---------------------------------------------------------------------------

def train_tf(
    model: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    cfg: TrainConfig,
    val_pairs: Sequence[ContextResponsePair] | None = None,
) -> tuple[PolicyModel, TrainHistory]:
    """Teacher forcing on response tokens only; context positions are loss-masked."""
    if not pairs:
        raise TrainerError("train_tf: no pairs")
    history = _train_lm(model, pair_examples(pairs), cfg,
                        pair_examples(val_pairs) if val_pairs else None)
    model.role = "behavior"
    return model, history


# ---------------------------------------------------------------------------
# stage 2: offline dataset generation
# ---------------------------------------------------------------------------

def generate_offline_dataset(
    pi_beta: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    reward_fn: RewardFn,
    n_model: int = 5,
    decode: DecodeConfig | None = None,
    seed: int = 0,
    provenance: dict | None = None,
) -> OfflineDataset:
    """Per context: the human response plus n_model sampled responses, each
    scored by the same terminal reward. Duplicate samples are kept."""
    if not pairs:
        raise TrainerError("generate_offline_dataset: no pairs")
    decode = decode or DecodeConfig(mode="sample", temperature=1.0, top_k=0, max_len=16, n=1)
    rng = np.random.default_rng([seed, 2])
    sampled = sample_for_contexts(pi_beta, [p.context for p in pairs], n_model, decode, rng=rng)
    eos = pi_beta.specials.eos
    records: list[OfflineRecord] = []
    for pair, responses in zip(pairs, sampled):
        records.append(OfflineRecord(
            context=tuple(pair.context), response=tuple(pair.response),
            reward=float(reward_fn(pair.response, pair)), source="human",
            context_id=pair.pair_id, sample_index=-1, truncated=False,
        ))
        for j, resp in enumerate(responses):
            records.append(OfflineRecord(
                context=tuple(pair.context), response=tuple(resp),
                reward=float(reward_fn(resp, pair)), source="model",
                context_id=pair.pair_id, sample_index=j,
                truncated=(resp[-1] != eos),
            ))
    meta = {
        "behavior_hash": pi_beta.params_hash(),
        "n_model": n_model,
        "seed": seed,
        "decode": {"mode": decode.mode, "temperature": decode.temperature,
                   "top_k": decode.top_k, "max_len": decode.max_len},
    }
    if provenance:
        meta.update(provenance)
    dataset = OfflineDataset(records=records, provenance=meta)
    dataset.validate_stage2()
    return dataset


# ---------------------------------------------------------------------------
# stage 3: offline fine-tuners
# ---------------------------------------------------------------------------

def train_tf_all(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    cfg: TrainConfig,
    val_pairs: Sequence[ContextResponsePair] | None = None,
) -> tuple[PolicyModel, TrainHistory]:
    """Fine-tune on every offline record regardless of reward."""
    model = pi_beta.copy(role="learned")
    _reset_adam(model)
    history = _train_lm(model, record_examples(dataset.records), cfg,
                        pair_examples(val_pairs) if val_pairs else None)
    return model, history


def train_tf_top(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    cfg: TrainConfig,
    top_cfg: TopFilterConfig,
    val_pairs: Sequence[ContextResponsePair] | None = None,
) -> tuple[PolicyModel, TrainHistory]:
    """TF-All restricted to records whose return clears the top-return threshold."""
    filtered = filter_top(dataset, top_cfg)
    return train_tf_all(pi_beta, filtered, cfg, val_pairs)


def train_dt(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    quantizer: BinQuantizer,
    cfg: TrainConfig,
    val_pairs: Sequence[ContextResponsePair] | None = None,
) -> tuple[PolicyModel, TrainHistory]:
    """Return-conditioned fine-tuning: insert the reward-bin token after the
    context's SEP; inference conditions on the top bin."""
    if not dataset.records:
        raise TrainerError("train_dt: empty dataset")
    model = pi_beta.copy(role="learned")
    _reset_adam(model)
    val = None
    if val_pairs:
        # validate under top-bin conditioning, mirroring inference
        val = [
            (tuple(p.context) + (quantizer.top_bin_token,) + tuple(p.response), len(p.context) + 1)
            for p in val_pairs
        ]
    history = _train_lm(model, dt_examples(dataset.records, quantizer), cfg, val)
    return model, history


# ---------------------------------------------------------------------------
# ILQL
# ---------------------------------------------------------------------------

@dataclass
class ILQLBatchLosses:
    q_loss: Tensor  # TD term plus alpha * KL (the Q-head objective)
    v_loss: Tensor  # expectile regression of V toward Q
    kl_term: Tensor  # KL(pi_beta || pi_theta) over data states


def _ilql_arrays(model: PolicyModel, records: Sequence[OfflineRecord], dtype):
    """State-position bookkeeping for a padded record batch.

    Position C-1+t reads state s_t (context plus t response tokens); its action
    is response token t. The final state position is terminal: V(s_{t+1}) = 0.
    """
    pad = model.specials.pad
    tmax = max(len(r.context) + len(r.response) for r in records)
    B = len(records)
    ids = np.full((B, tmax), pad, dtype=np.int64)
    actions = np.zeros((B, tmax), dtype=np.int64)
    state_mask = np.zeros((B, tmax), dtype=dtype)
    terminal_mask = np.zeros((B, tmax), dtype=dtype)
    rewards = np.zeros((B, tmax), dtype=dtype)
    for b, r in enumerate(records):
        seq = r.context + r.response
        C, L = len(r.context), len(r.response)
        ids[b, :len(seq)] = seq
        actions[b, :len(seq) - 1] = seq[1:]
        state_mask[b, C - 1:C - 1 + L] = 1.0
        terminal_mask[b, C - 2 + L] = 1.0
        rewards[b, C - 2 + L] = r.reward
    return ids, actions, state_mask, terminal_mask, rewards


def _ilql_losses(
    model: PolicyModel,
    hidden: Tensor,
    logbeta: np.ndarray,
    actions: np.ndarray,
    state_mask: np.ndarray,
    terminal_mask: np.ndarray,
    rewards: np.ndarray,
    cfg: ILQLConfig,
) -> ILQLBatchLosses:
    q = q_head(model, hidden)  # (B, T, V)
    v = v_head(model, hidden)  # (B, T)
    q_sa = ad.take_along_last(q, actions)

    # TD target r + gamma * V(s_{t+1}), held constant; terminal V(s') = 0.
    v_for_target = v_head(model, hidden, target=True).data if cfg.polyak > 0 else v.data
    v_next = np.zeros_like(v_for_target)
    v_next[:, :-1] = v_for_target[:, 1:]
    td_target = rewards + cfg.gamma * v_next * (1.0 - terminal_mask)
    td_loss = ad.squared_error(q_sa, Tensor(td_target.astype(v.data.dtype)), mask=state_mask)

    # Expectile regression of V toward Q with Q held constant.
    u = Tensor(q_sa.data.copy()) - v
    v_loss = ad.expectile_squared_error(u, cfg.tau, mask=state_mask)

    # KL(pi_beta || pi_theta) over data states; pi_theta shifts the behavior
    # logits by eta * (Q - V) and is renormalized inside the KL.
    logbeta_t = Tensor(logbeta.astype(q.data.dtype))
    shifted = logbeta_t + ad.mul_const(q - v.reshape(v.shape + (1,)), cfg.eta)
    kl = ad.kl_divergence(logbeta_t, shifted, mask=state_mask)

    q_loss = td_loss + ad.mul_const(kl, cfg.alpha)
    return ILQLBatchLosses(q_loss=q_loss, v_loss=v_loss, kl_term=kl)


def ilql_loss(model: PolicyModel, records: Sequence[OfflineRecord],
              cfg: ILQLConfig) -> ILQLBatchLosses:
    """Loss triple on a record batch (graph through the backbone only when
    fine-tuning it is requested)."""
    if model.ilql is None:
        raise TrainerError("ilql_loss: model has no ILQL heads")
    dtype = model.cfg.np_dtype
    ids, actions, state_mask, terminal_mask, rewards = _ilql_arrays(model, records, dtype)
    if cfg.finetune_backbone:
        hidden = forward_hidden(model, ids)
        logbeta = _log_softmax_np(lm_logits(model, hidden.detach()).data)
    else:
        with no_grad():
            hidden_np = forward_hidden(model, ids).data
        hidden = Tensor(hidden_np)
        logbeta = _log_softmax_np(
            hidden_np @ model.store["lm_head.w"].data + model.store["lm_head.b"].data)
    return _ilql_losses(model, hidden, logbeta, actions, state_mask, terminal_mask, rewards, cfg)


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def train_ilql(
    pi_beta: PolicyModel,
    dataset: OfflineDataset,
    cfg: ILQLConfig,
) -> tuple[PolicyModel, list[tuple[float, float, float]]]:
    """Train Q/V heads on dataset transitions over a frozen behavior backbone
    (set finetune_backbone to unfreeze). Returns the model whose implicit
    policy and critic are usable, plus per-step (td+alpha*kl, v, kl) losses."""
    if not dataset.records:
        raise TrainerError("train_ilql: empty dataset")
    model = pi_beta.copy(role="learned")
    attach_ilql_heads(model, ILQLHeadSpec(eta=cfg.eta, head_hidden=cfg.head_hidden,
                                          polyak=cfg.polyak), seed=cfg.seed)
    _reset_adam(model)
    head_names = [n for n in model.store.names()
                  if n.startswith("ilql.") and not n.startswith("ilql.vt.")]
    train_names = head_names + (model.backbone_param_names() if cfg.finetune_backbone else [])

    records = list(dataset.records)
    dtype = model.cfg.np_dtype

    cache: list[tuple] | None = None
    if not cfg.finetune_backbone:
        # hidden states never change: precompute once, by length group for batching
        cache = [None] * len(records)
        by_len: dict[int, list[int]] = {}
        for i, r in enumerate(records):
            by_len.setdefault(len(r.context) + len(r.response), []).append(i)
        w = model.store["lm_head.w"].data
        b = model.store["lm_head.b"].data
        for length in sorted(by_len):
            idxs = by_len[length]
            for lo in range(0, len(idxs), 64):
                chunk = idxs[lo:lo + 64]
                ids, actions, state_mask, terminal_mask, rewards = _ilql_arrays(
                    model, [records[i] for i in chunk], dtype)
                with no_grad():
                    hidden = forward_hidden(model, ids).data
                logbeta = _log_softmax_np(hidden @ w + b)
                for j, i in enumerate(chunk):
                    cache[i] = (hidden[j], logbeta[j], actions[j], state_mask[j],
                                terminal_mask[j], rewards[j])

    n = len(records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    losses: list[tuple[float, float, float]] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, 3000 + epoch]).permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idxs = order[lo:lo + cfg.batch_size]
            model.store.zero_grad()
            if cache is not None:
                batch = [cache[i] for i in idxs]
                tmax = max(x[0].shape[0] for x in batch)
                B = len(batch)
                D, V = model.cfg.dim, model.cfg.vocab_size
                hidden = np.zeros((B, tmax, D), dtype=dtype)
                logbeta = np.zeros((B, tmax, V), dtype=dtype)
                actions = np.zeros((B, tmax), dtype=np.int64)
                state_mask = np.zeros((B, tmax), dtype=dtype)
                terminal_mask = np.zeros((B, tmax), dtype=dtype)
                rewards = np.zeros((B, tmax), dtype=dtype)
                for j, (h, lb, a, sm, tm, rw) in enumerate(batch):
                    L = h.shape[0]
                    hidden[j, :L] = h
                    logbeta[j, :L] = lb
                    actions[j, :L] = a
                    state_mask[j, :L] = sm
                    terminal_mask[j, :L] = tm
                    rewards[j, :L] = rw
                out = _ilql_losses(model, Tensor(hidden), logbeta, actions, state_mask,
                                   terminal_mask, rewards, cfg)
            else:
                out = ilql_loss(model, [records[i] for i in idxs], cfg)
            total = out.q_loss + out.v_loss
            total.backward()
            adam_step(model.store, lr=schedule_lr(cfg.lr_schedule, cfg.lr, step, total_steps),
                      beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, names=train_names)
            polyak_update_target_v(model)
            losses.append((out.q_loss.item(), out.v_loss.item(), out.kl_term.item()))
            step += 1
    return model, losses


# ---------------------------------------------------------------------------
# PPO
# ---------------------------------------------------------------------------

def _tmin(a: Tensor, b: Tensor) -> Tensor:
    # elementwise min via a - relu(a - b)
    return a - ad.relu(a - b)


@dataclass
class PPOStats:
    mean_reward: float
    kl: float
    kl_coef: float
    max_ratio_dev_first_epoch: float
    losses: list[float]


def ppo_step(
    model: PolicyModel,
    pi_beta: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    reward_fn: RewardFn,
    cfg: PPOConfig,
    rng: np.random.Generator,
    kl_coef: float,
    lr: float | None = None,
) -> PPOStats:
    """One rollout batch plus inner optimization epochs.

    Rolls out one response per context with the current policy, pays the
    terminal reward, estimates per-token advantages against the value head,
    and ascends the (optionally clipped) ratio-weighted advantage minus the
    KL(pi_theta || pi_beta) penalty and the value loss. kl_coef adapts toward
    kl_target between batches when enabled.
    """
    if not model.has_value_head:
        raise TrainerError("ppo_step: attach_value_head first")
    dtype = model.cfg.np_dtype
    decode = DecodeConfig(mode="sample", temperature=1.0, top_k=0, max_len=cfg.max_len, n=1)
    responses = [r[0] for r in sample_for_contexts(model, [p.context for p in pairs], 1,
                                                   decode, rng=rng)]
    rewards = np.asarray([reward_fn(resp, pair) for resp, pair in zip(responses, pairs)],
                         dtype=np.float64)

    records = [OfflineRecord(context=tuple(p.context), response=tuple(resp),
                             reward=float(rw), source="model", context_id=p.pair_id,
                             sample_index=0, truncated=(resp[-1] != model.specials.eos))
               for p, resp, rw in zip(pairs, responses, rewards)]
    ids, actions, state_mask, terminal_mask, reward_rows = _ilql_arrays(model, records, dtype)
    # terminal undiscounted return broadcast to every state of its episode
    returns = (reward_rows.sum(axis=1, keepdims=True) * state_mask).astype(dtype)

    with no_grad():
        old_logits = forward_logits_batch(model, ids).data
        beta_logits = forward_logits_batch(pi_beta, ids).data
    old_logp = np.take_along_axis(_log_softmax_np(old_logits), actions[..., None], -1)[..., 0]

    with no_grad():
        v0 = value_head(model, forward_hidden(model, ids)).data
    advantages = ((returns - v0) * state_mask).astype(dtype)

    losses: list[float] = []
    max_ratio_dev = 0.0
    for inner in range(cfg.epochs_per_batch):
        model.store.zero_grad()
        hidden = forward_hidden(model, ids)
        logits = lm_logits(model, hidden)
        logp = ad.log_softmax(logits)
        logp_act = ad.take_along_last(logp, actions)
        ratio = ad.exp(logp_act - Tensor(old_logp.astype(dtype)))
        if inner == 0:
            dev = np.abs(ratio.data - 1.0) * state_mask
            max_ratio_dev = float(dev.max())
        adv_t = Tensor(advantages)
        pg = ratio * adv_t
        if cfg.clip_ratio is not None:
            clipped = Tensor(np.clip(ratio.data, 1.0 - cfg.clip_ratio,
                                     1.0 + cfg.clip_ratio) * advantages)
            pg = _tmin(pg, clipped)
        pg_term = ad.masked_mean(pg, state_mask)
        kl = ad.kl_divergence(logp, Tensor(beta_logits.astype(dtype)), mask=state_mask)
        v = value_head(model, hidden)
        v_loss = ad.squared_error(v, Tensor(returns), mask=state_mask)
        objective = pg_term - ad.mul_const(kl, kl_coef) - ad.mul_const(v_loss, cfg.value_coef)
        loss = -objective
        loss.backward()
        adam_step(model.store, lr=lr if lr is not None else cfg.lr, beta1=cfg.beta1,
                  beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
        losses.append(loss.item())

    with no_grad():
        new_logits = forward_logits_batch(model, ids).data
    kl_now = _kl_np(new_logits, beta_logits, state_mask)
    new_coef = kl_coef
    if cfg.adaptive_kl:
        if kl_now > 1.5 * cfg.kl_target:
            new_coef = kl_coef * 2.0
        elif kl_now < cfg.kl_target / 1.5:
            new_coef = kl_coef * 0.5
    return PPOStats(mean_reward=float(rewards.mean()), kl=kl_now, kl_coef=new_coef,
                    max_ratio_dev_first_epoch=max_ratio_dev, losses=losses)


def _kl_np(p_logits: np.ndarray, q_logits: np.ndarray, mask: np.ndarray) -> float:
    logp = _log_softmax_np(p_logits)
    logq = _log_softmax_np(q_logits)
    per_pos = (np.exp(logp) * (logp - logq)).sum(axis=-1)
    return float((per_pos * mask).sum() / mask.sum())


def train_ppo(
    pi_beta: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    reward_fn: RewardFn,
    cfg: PPOConfig,
) -> tuple[PolicyModel, list[PPOStats]]:
    """Online fine-tuning from a copy of the behavior policy."""
    if not pairs:
        raise TrainerError("train_ppo: no pairs")
    model = pi_beta.copy(role="learned")
    attach_value_head(model, seed=cfg.seed)
    _reset_adam(model)
    rng = np.random.default_rng([cfg.seed, 4000])
    order_rng = np.random.default_rng([cfg.seed, 4001])
    stats: list[PPOStats] = []
    kl_coef = cfg.kl_coef
    idx = order_rng.permutation(len(pairs))
    cursor = 0
    for _ in range(cfg.n_batches):
        if cursor + cfg.rollout_batch > len(pairs):
            idx = order_rng.permutation(len(pairs))
            cursor = 0
        batch = [pairs[i] for i in idx[cursor:cursor + cfg.rollout_batch]]
        cursor += cfg.rollout_batch
        st = ppo_step(model, pi_beta, batch, reward_fn, cfg, rng, kl_coef)
        kl_coef = st.kl_coef
        stats.append(st)
    return model, stats


# ---------------------------------------------------------------------------
# Quark-style outer loop
# ---------------------------------------------------------------------------

@dataclass
class QuarkHistory:
    dataset_sizes: list[int] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    mean_collected_reward: list[float] = field(default_factory=list)


def quark_loop(
    model: PolicyModel,
    pairs: Sequence[ContextResponsePair],
    reward_fn: RewardFn,
    quantizer: BinQuantizer,
    epochs: int,
    collect_per_epoch: int,
    cfg: TrainConfig,
    initial_dataset: OfflineDataset,
    decode: DecodeConfig | None = None,
) -> tuple[PolicyModel, QuarkHistory]:
    """Per epoch: collect responses with the current policy conditioned on the
    top bin, reward-annotate and append them, then run one DT-style epoch over
    the grown dataset. With collect_per_epoch = 0 this is exactly continued DT
    training (same batches, same losses under the same seed)."""
    if epochs < 0 or collect_per_epoch < 0:
        raise TrainerError("epochs and collect_per_epoch must be >= 0")
    decode = decode or DecodeConfig(mode="sample", temperature=1.0, top_k=0, max_len=16, n=1)
    dataset = OfflineDataset(records=list(initial_dataset.records),
                             provenance=dict(initial_dataset.provenance))
    history = QuarkHistory()
    pair_by_idx = list(pairs)

    # LR schedule horizon precomputed from the known growth so that the
    # zero-collection loop matches plain DT exactly.
    total_steps = sum(
        math.ceil((len(dataset.records) + e * collect_per_epoch) / cfg.batch_size)
        for e in range(epochs)
    )

    def lr_fn(step: int) -> float:
        return schedule_lr(cfg.lr_schedule, cfg.lr, step, total_steps)

    global_step = 0
    cursor = 0
    for epoch in range(epochs):
        if collect_per_epoch > 0:
            rng = np.random.default_rng([cfg.seed, 5000 + epoch])
            chosen = [pair_by_idx[(cursor + j) % len(pair_by_idx)]
                      for j in range(collect_per_epoch)]
            cursor = (cursor + collect_per_epoch) % len(pair_by_idx)
            sampled = sample_for_contexts(
                model, [p.context for p in chosen], 1, decode,
                condition=quantizer.top_bin_token, rng=rng)
            collected_rewards = []
            for k, (pair, resp_list) in enumerate(zip(chosen, sampled)):
                resp = resp_list[0]
                rw = float(reward_fn(resp, pair))
                collected_rewards.append(rw)
                dataset.records.append(OfflineRecord(
                    context=tuple(pair.context), response=tuple(resp), reward=rw,
                    source="model", context_id=pair.pair_id,
                    sample_index=1000 * (epoch + 1) + k,
                    truncated=(resp[-1] != model.specials.eos),
                ))
            history.mean_collected_reward.append(float(np.mean(collected_rewards)))
        examples = dt_examples(dataset.records, quantizer)
        global_step = _lm_epoch(model, examples, cfg, epoch, lr_fn, global_step, history)  # type: ignore[arg-type]
        history.dataset_sizes.append(len(dataset.records))
    return model, history
