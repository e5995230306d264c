"""Causal LM policy: logits, scoring, sampling, return-token conditioning, and
the Q/V heads with the advantage-rescaled implicit policy.

The backbone is a small pre-LN causal self-attention network by default; a
gated-recurrent (GRU) backbone sits behind the same interface for
CPU-constrained runs. The LM head and all extra heads are zero-initialized at
their final layer, so a fresh model is exactly uniform and fresh heads output
exactly zero.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, no_grad
from .corpus import ContextResponsePair, Vocab
from .optim import AdamState, ParamStore

CHECKPOINT_MAGIC = b"DIALRL-CKPT-v1\n"

BACKBONES = ("attention", "gru")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class CausalLMConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    block_size: int = 128
    n_reward_bins: int = 2
    backbone: str = "attention"
    mlp_ratio: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ModelError(f"unknown backbone {self.backbone!r}")
        if self.dim % self.n_heads != 0:
            raise ModelError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 2 or self.block_size < 2:
            raise ModelError("vocab_size and block_size must be >= 2")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class SpecialIds:
    pad: int
    eos: int
    sep: int
    bins: tuple[int, ...]

    @classmethod
    def from_vocab(cls, vocab: Vocab) -> "SpecialIds":
        return cls(pad=vocab.pad_id, eos=vocab.eos_id, sep=vocab.sep_id, bins=vocab.bin_ids)

    @property
    def forbidden_during_decode(self) -> tuple[int, ...]:
        return (self.pad, self.sep) + self.bins


@dataclass
class ILQLHeadSpec:
    """Q/V head settings: advantage temperature eta and optional Polyak-averaged
    target V copy (rate 0 disables it, matching the TD target as printed)."""

    eta: float = 1.0
    head_hidden: int | None = None
    polyak: float = 0.0


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"  # greedy | sample
    temperature: float = 1.0
    top_k: int = 0
    max_len: int = 16
    n: int = 1

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ModelError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and self.temperature <= 0:
            raise ModelError("sampling needs temperature > 0")
        if self.n < 1 or self.max_len < 1:
            raise ModelError("need n >= 1 and max_len >= 1")


@dataclass
class PolicyModel:
    cfg: CausalLMConfig
    specials: SpecialIds
    store: ParamStore
    role: str = "behavior"  # behavior pi_beta | learned pi_theta
    ilql: ILQLHeadSpec | None = None
    has_value_head: bool = False

    def copy(self, role: str | None = None) -> "PolicyModel":
        return PolicyModel(
            cfg=self.cfg,
            specials=self.specials,
            store=self.store.copy(),
            role=role if role is not None else self.role,
            ilql=ILQLHeadSpec(**asdict(self.ilql)) if self.ilql else None,
            has_value_head=self.has_value_head,
        )

    def backbone_param_names(self) -> list[str]:
        return [n for n in self.store.names()
                if not n.startswith("ilql.") and not n.startswith("vhead.")]

    def params_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.store.names()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.store[name].data, dtype="<f8").tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

def init_policy(cfg: CausalLMConfig, specials: SpecialIds, seed: int,
                role: str = "behavior") -> PolicyModel:
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype=cfg.np_dtype)
    D, V = cfg.dim, cfg.vocab_size

    def normal(shape, scale=0.02):
        return rng.normal(0.0, scale, size=shape)

    store.add("tok_emb", normal((V, D)))
    if cfg.backbone == "attention":
        store.add("pos_emb", normal((cfg.block_size, D)))
        proj_scale = 0.02 / math.sqrt(2 * cfg.n_layers)
        for i in range(cfg.n_layers):
            p = f"l{i}"
            store.add(f"{p}.ln1.g", np.ones(D))
            store.add(f"{p}.ln1.b", np.zeros(D))
            store.add(f"{p}.attn.wqkv", normal((D, 3 * D)))
            store.add(f"{p}.attn.bqkv", np.zeros(3 * D))
            store.add(f"{p}.attn.wo", normal((D, D), proj_scale))
            store.add(f"{p}.attn.bo", np.zeros(D))
            store.add(f"{p}.ln2.g", np.ones(D))
            store.add(f"{p}.ln2.b", np.zeros(D))
            store.add(f"{p}.mlp.wf", normal((D, cfg.mlp_ratio * D)))
            store.add(f"{p}.mlp.bf", np.zeros(cfg.mlp_ratio * D))
            store.add(f"{p}.mlp.wp", normal((cfg.mlp_ratio * D, D), proj_scale))
            store.add(f"{p}.mlp.bp", np.zeros(D))
    else:
        scale = 1.0 / math.sqrt(D)
        for i in range(cfg.n_layers):
            p = f"l{i}"
            store.add(f"{p}.gru.wx", rng.uniform(-scale, scale, size=(D, 3 * D)))
            store.add(f"{p}.gru.wh", rng.uniform(-scale, scale, size=(D, 3 * D)))
            store.add(f"{p}.gru.bx", np.zeros(3 * D))
            store.add(f"{p}.gru.bh", np.zeros(3 * D))
    store.add("lnf.g", np.ones(D))
    store.add("lnf.b", np.zeros(D))
    store.add("lm_head.w", np.zeros((D, V)))
    store.add("lm_head.b", np.zeros(V))
    return PolicyModel(cfg=cfg, specials=specials, store=store, role=role)


def _init_mlp_head(store: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int,
                   rng: np.random.Generator) -> None:
    store.add(f"{prefix}.w1", rng.normal(0.0, 0.02, size=(d_in, d_hidden)))
    store.add(f"{prefix}.b1", np.zeros(d_hidden))
    store.add(f"{prefix}.w2", np.zeros((d_hidden, d_out)))  # zero final layer
    store.add(f"{prefix}.b2", np.zeros(d_out))


def attach_ilql_heads(model: PolicyModel, spec: ILQLHeadSpec | None = None,
                      seed: int = 0) -> PolicyModel:
    """Add Q (per action) and V (scalar) heads over the backbone hidden state."""
    spec = spec or ILQLHeadSpec()
    if model.ilql is not None:
        raise ModelError("model already has ILQL heads")
    hidden = spec.head_hidden or model.cfg.dim
    rng = np.random.default_rng(seed)
    _init_mlp_head(model.store, "ilql.q", model.cfg.dim, hidden, model.cfg.vocab_size, rng)
    _init_mlp_head(model.store, "ilql.v", model.cfg.dim, hidden, 1, rng)
    if spec.polyak > 0:
        for suffix in ("w1", "b1", "w2", "b2"):
            model.store.add(f"ilql.vt.{suffix}", model.store[f"ilql.v.{suffix}"].data.copy())
    model.ilql = ILQLHeadSpec(eta=spec.eta, head_hidden=hidden, polyak=spec.polyak)
    return model


def attach_value_head(model: PolicyModel, seed: int = 0) -> PolicyModel:
    if model.has_value_head:
        return model
    rng = np.random.default_rng(seed)
    _init_mlp_head(model.store, "vhead", model.cfg.dim, model.cfg.dim, 1, rng)
    model.has_value_head = True
    return model


def polyak_update_target_v(model: PolicyModel) -> None:
    rate = model.ilql.polyak if model.ilql else 0.0
    if rate <= 0:
        return
    for suffix in ("w1", "b1", "w2", "b2"):
        tgt = model.store[f"ilql.vt.{suffix}"].data
        src = model.store[f"ilql.v.{suffix}"].data
        tgt *= 1.0 - rate
        tgt += rate * src


# ---------------------------------------------------------------------------
# forward passes (graph-building; wrap in no_grad for inference)
# ---------------------------------------------------------------------------

def _causal_mask(T: int, dtype) -> Tensor:
    m = np.triu(np.full((T, T), -1e9, dtype=dtype), k=1)
    return Tensor(m[None, None, :, :])


def forward_hidden(model: PolicyModel, ids: np.ndarray) -> Tensor:
    """Backbone hidden states for a (B, T) id batch; causal by construction."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ModelError(f"expected (B, T) ids, got shape {ids.shape}")
    B, T = ids.shape
    if T > model.cfg.block_size:
        raise ModelError(f"sequence length {T} exceeds block size {model.cfg.block_size}")
    store, cfg = model.store, model.cfg
    h = ad.embedding(store["tok_emb"], ids)
    if cfg.backbone == "attention":
        h = h + store["pos_emb"][:T]
        mask = _causal_mask(T, cfg.np_dtype)
        D, H = cfg.dim, cfg.n_heads
        hd = D // H
        inv_sqrt = 1.0 / math.sqrt(hd)
        for i in range(cfg.n_layers):
            p = f"l{i}"
            x = ad.layer_norm(h, store[f"{p}.ln1.g"], store[f"{p}.ln1.b"])
            qkv = x @ store[f"{p}.attn.wqkv"] + store[f"{p}.attn.bqkv"]
            q = qkv[:, :, 0 * D:1 * D].reshape((B, T, H, hd)).transpose((0, 2, 1, 3))
            k = qkv[:, :, 1 * D:2 * D].reshape((B, T, H, hd)).transpose((0, 2, 1, 3))
            v = qkv[:, :, 2 * D:3 * D].reshape((B, T, H, hd)).transpose((0, 2, 1, 3))
            att = ad.mul_const(q @ k.transpose((0, 1, 3, 2)), inv_sqrt) + mask
            att = ad.softmax(att)
            y = (att @ v).transpose((0, 2, 1, 3)).reshape((B, T, D))
            h = h + (y @ store[f"{p}.attn.wo"] + store[f"{p}.attn.bo"])
            x2 = ad.layer_norm(h, store[f"{p}.ln2.g"], store[f"{p}.ln2.b"])
            m = ad.gelu(x2 @ store[f"{p}.mlp.wf"] + store[f"{p}.mlp.bf"])
            h = h + (m @ store[f"{p}.mlp.wp"] + store[f"{p}.mlp.bp"])
    else:
        D = cfg.dim
        for i in range(cfg.n_layers):
            p = f"l{i}"
            wx, wh = store[f"{p}.gru.wx"], store[f"{p}.gru.wh"]
            bx, bh = store[f"{p}.gru.bx"], store[f"{p}.gru.bh"]
            prev = Tensor(np.zeros((B, D), dtype=cfg.np_dtype))
            outs = []
            for t in range(T):
                xg = h[:, t, :] @ wx + bx
                hg = prev @ wh + bh
                r = ad.sigmoid(xg[:, 0 * D:1 * D] + hg[:, 0 * D:1 * D])
                z = ad.sigmoid(xg[:, 1 * D:2 * D] + hg[:, 1 * D:2 * D])
                n = ad.tanh(xg[:, 2 * D:3 * D] + r * hg[:, 2 * D:3 * D])
                prev = n + z * (prev - n)
                outs.append(prev)
            h = ad.stack(outs, axis=1)
    return ad.layer_norm(h, store["lnf.g"], store["lnf.b"])


def lm_logits(model: PolicyModel, hidden: Tensor) -> Tensor:
    return hidden @ model.store["lm_head.w"] + model.store["lm_head.b"]


def q_head(model: PolicyModel, hidden: Tensor) -> Tensor:
    if model.ilql is None:
        raise ModelError("model has no ILQL heads")
    s = model.store
    return ad.gelu(hidden @ s["ilql.q.w1"] + s["ilql.q.b1"]) @ s["ilql.q.w2"] + s["ilql.q.b2"]


def v_head(model: PolicyModel, hidden: Tensor, target: bool = False) -> Tensor:
    if model.ilql is None:
        raise ModelError("model has no ILQL heads")
    prefix = "ilql.vt" if target else "ilql.v"
    if target and f"{prefix}.w1" not in model.store:
        raise ModelError("target V head not attached (polyak disabled)")
    s = model.store
    out = ad.gelu(hidden @ s[f"{prefix}.w1"] + s[f"{prefix}.b1"]) @ s[f"{prefix}.w2"] + s[f"{prefix}.b2"]
    return out[..., 0]


def value_head(model: PolicyModel, hidden: Tensor) -> Tensor:
    if not model.has_value_head:
        raise ModelError("model has no value head")
    s = model.store
    out = ad.gelu(hidden @ s["vhead.w1"] + s["vhead.b1"]) @ s["vhead.w2"] + s["vhead.b2"]
    return out[..., 0]


def forward_logits_batch(model: PolicyModel, ids: np.ndarray) -> Tensor:
    return lm_logits(model, forward_hidden(model, ids))


def forward_logits(model: PolicyModel, context: Sequence[int],
                   prefix: Sequence[int] = ()) -> np.ndarray:
    """Per-position vocab logits for context + prefix (inference, no graph)."""
    ids = np.asarray([list(context) + list(prefix)], dtype=np.int64)
    with no_grad():
        return forward_logits_batch(model, ids).data[0]


def _log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_prob(model: PolicyModel, context: Sequence[int], response: Sequence[int],
             condition: int | None = None) -> float:
    """Total log-probability of the response tokens given the context (and an
    optional reward-bin token inserted after the context's SEP)."""
    context = list(context)
    if condition is not None:
        context = context + [int(condition)]
    response = list(response)
    if not response:
        raise ModelError("log_prob: empty response")
    C = len(context)
    logits = forward_logits(model, context, response)
    logp = _log_softmax_np(logits)
    total = 0.0
    for t, tok in enumerate(response):
        total += float(logp[C - 1 + t, tok])
    return total


def perplexity(model: PolicyModel, pairs: Sequence[ContextResponsePair]) -> float:
    """exp of mean per-token NLL over response tokens (pooled across pairs)."""
    if not pairs:
        raise ModelError("perplexity: no pairs")
    total_nll, total_tokens = 0.0, 0
    for group in _group_by_length(pairs):
        ids, mask, targets = _batch_pairs(model, group)
        with no_grad():
            logits = forward_logits_batch(model, ids).data
        logp = _log_softmax_np(logits)
        picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
        total_nll += float(-(picked * mask).sum())
        total_tokens += int(mask.sum())
    return float(np.exp(total_nll / total_tokens))


def _group_by_length(pairs: Sequence[ContextResponsePair]):
    groups: dict[tuple[int, int], list[ContextResponsePair]] = {}
    for p in pairs:
        groups.setdefault((len(p.context), len(p.response)), []).append(p)
    for key in sorted(groups):
        yield groups[key]


def _batch_pairs(model: PolicyModel, group: Sequence[ContextResponsePair]):
    C, L = len(group[0].context), len(group[0].response)
    ids = np.asarray([list(p.context) + list(p.response) for p in group], dtype=np.int64)
    mask = np.zeros((len(group), C + L), dtype=model.cfg.np_dtype)
    targets = np.zeros((len(group), C + L), dtype=np.int64)
    # position C-1+t emits the distribution of response token t
    targets[:, :-1] = ids[:, 1:]
    mask[:, C - 1:C + L - 1] = 1.0
    return ids, mask, targets


# ---------------------------------------------------------------------------
# ILQL values and the implicit policy
# ---------------------------------------------------------------------------

def ilql_values(model: PolicyModel, context: Sequence[int],
                response: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    """Q over (state positions, vocab) and V over state positions 0..L.

    Q[t] is read at the position emitting response token t's distribution;
    V[L], the value after the full response, is 0 by the terminal convention.
    """
    context, response = list(context), list(response)
    C, L = len(context), len(response)
    ids = np.asarray([context + response], dtype=np.int64)
    with no_grad():
        hidden = forward_hidden(model, ids)
        q = q_head(model, hidden).data[0]
        v = v_head(model, hidden).data[0]
    q_states = q[C - 1:C - 1 + L]
    v_states = np.concatenate([v[C - 1:C - 1 + L], [0.0]])
    return q_states, v_states


def implicit_policy_logits(model: PolicyModel, context: Sequence[int],
                           prefix: Sequence[int] = ()) -> np.ndarray:
    """log pi_beta(a|s) + eta * (Q(s,a) - V(s)), renormalized by log-softmax."""
    if model.ilql is None:
        raise ModelError("model has no ILQL heads")
    ids = np.asarray([list(context) + list(prefix)], dtype=np.int64)
    with no_grad():
        out = implicit_logits_batch(model, ids).data
    return out[0, -1]


def implicit_logits_batch(model: PolicyModel, ids: np.ndarray) -> Tensor:
    """Graph-building implicit-policy log-probs for every position."""
    if model.ilql is None:
        raise ModelError("model has no ILQL heads")
    hidden = forward_hidden(model, ids)
    logbeta = ad.log_softmax(lm_logits(model, hidden))
    q = q_head(model, hidden)
    v = v_head(model, hidden)
    shifted = logbeta + ad.mul_const(q - v.reshape(v.shape + (1,)), model.ilql.eta)
    return ad.log_softmax(shifted)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

LogitsFn = Callable[[np.ndarray], np.ndarray]


def _last_logits_lm(model: PolicyModel) -> LogitsFn:
    w, b = model.store["lm_head.w"].data, model.store["lm_head.b"].data

    def fn(ids: np.ndarray) -> np.ndarray:
        with no_grad():
            hidden = forward_hidden(model, ids).data[:, -1, :]
        return hidden @ w + b
    return fn


def _last_logits_implicit(model: PolicyModel) -> LogitsFn:
    if model.ilql is None:
        raise ModelError("model has no ILQL heads")

    def fn(ids: np.ndarray) -> np.ndarray:
        with no_grad():
            hidden = forward_hidden(model, ids)
            last = Tensor(hidden.data[:, -1:, :])
            logits = lm_logits(model, last).data
            q = q_head(model, last).data
            v = v_head(model, last).data
        logbeta = _log_softmax_np(logits)
        shifted = logbeta + model.ilql.eta * (q - v[..., None])
        return _log_softmax_np(shifted)[:, -1, :]
    return fn


def decode_batch(
    model: PolicyModel,
    prompts: np.ndarray,
    decode: DecodeConfig,
    rng: np.random.Generator | None = None,
    logits_fn: LogitsFn | None = None,
) -> list[tuple[int, ...]]:
    """Decode one response per prompt row (rows share a length).

    PAD/SEP and reward-bin tokens are never emitted, so returned surface forms
    contain no conditioning tokens. Each response ends with EOS or runs to the
    horizon (truncated).
    """
    prompts = np.asarray(prompts, dtype=np.int64)
    B, L0 = prompts.shape
    if L0 + decode.max_len > model.cfg.block_size:
        raise ModelError(
            f"prompt {L0} + horizon {decode.max_len} exceeds block {model.cfg.block_size}")
    if decode.mode == "sample" and rng is None:
        raise ModelError("sampling requires an rng")
    logits_fn = logits_fn or _last_logits_lm(model)
    forbid = list(model.specials.forbidden_during_decode)

    ids = prompts
    done = np.zeros(B, dtype=bool)
    collected: list[list[int]] = [[] for _ in range(B)]
    for _ in range(decode.max_len):
        logits = logits_fn(ids).astype(np.float64, copy=True)
        logits[:, forbid] = -np.inf
        if decode.mode == "greedy":
            nxt = logits.argmax(axis=-1)
        else:
            logits /= decode.temperature
            if decode.top_k > 0 and decode.top_k < logits.shape[1]:
                kth = np.partition(logits, -decode.top_k, axis=1)[:, -decode.top_k][:, None]
                logits = np.where(logits < kth, -np.inf, logits)
            z = logits - logits.max(axis=1, keepdims=True)
            probs = np.exp(z)
            probs /= probs.sum(axis=1, keepdims=True)
            u = rng.random((B, 1))
            nxt = (probs.cumsum(axis=1) < u).sum(axis=1)
            nxt = np.minimum(nxt, logits.shape[1] - 1)
        for b in range(B):
            if not done[b]:
                collected[b].append(int(nxt[b]))
                if int(nxt[b]) == model.specials.eos:
                    done[b] = True
        if done.all():
            break
        ids = np.concatenate([ids, nxt[:, None]], axis=1)
    return [tuple(toks) for toks in collected]


def sample_responses(
    model: PolicyModel,
    context: Sequence[int],
    decode: DecodeConfig,
    condition: int | None = None,
    rng: np.random.Generator | None = None,
    use_implicit_policy: bool = False,
) -> list[tuple[int, ...]]:
    """n responses for one context; the optional bin token is inserted between
    the context's SEP and the first response position and never returned."""
    prompt = list(context) + ([int(condition)] if condition is not None else [])
    prompts = np.asarray([prompt] * decode.n, dtype=np.int64)
    logits_fn = _last_logits_implicit(model) if use_implicit_policy else None
    return decode_batch(model, prompts, decode, rng=rng, logits_fn=logits_fn)


def sample_for_contexts(
    model: PolicyModel,
    contexts: Sequence[Sequence[int]],
    n: int,
    decode: DecodeConfig,
    condition: int | None = None,
    rng: np.random.Generator | None = None,
    use_implicit_policy: bool = False,
) -> list[list[tuple[int, ...]]]:
    """n responses per context, batching same-length prompts together."""
    prompts = [list(c) + ([int(condition)] if condition is not None else []) for c in contexts]
    by_len: dict[int, list[int]] = {}
    for idx, p in enumerate(prompts):
        by_len.setdefault(len(p), []).append(idx)
    out: list[list[tuple[int, ...]] | None] = [None] * len(contexts)
    logits_fn = _last_logits_implicit(model) if use_implicit_policy else None
    cfg = DecodeConfig(mode=decode.mode, temperature=decode.temperature,
                       top_k=decode.top_k, max_len=decode.max_len, n=1)
    for length in sorted(by_len):
        idxs = by_len[length]
        batch = np.asarray([prompts[i] for i in idxs for _ in range(n)], dtype=np.int64)
        responses = decode_batch(model, batch, cfg, rng=rng, logits_fn=logits_fn)
        for j, i in enumerate(idxs):
            out[i] = responses[j * n:(j + 1) * n]
    return out  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: PolicyModel, path: str | Path, meta: dict | None = None) -> None:
    """Deterministic binary checkpoint: magic, JSON header, raw LE buffers."""
    path = Path(path)
    arrays: list[tuple[str, np.ndarray]] = []
    steps: dict[str, int] = {}
    for name in sorted(model.store.names()):
        arrays.append((f"param:{name}", model.store[name].data))
        st = model.store.state[name]
        arrays.append((f"adam_m:{name}", st.m))
        arrays.append((f"adam_v:{name}", st.v))
        steps[name] = st.step
    header = {
        "version": 1,
        "config": asdict(model.cfg),
        "specials": {"pad": model.specials.pad, "eos": model.specials.eos,
                     "sep": model.specials.sep, "bins": list(model.specials.bins)},
        "role": model.role,
        "ilql": asdict(model.ilql) if model.ilql else None,
        "has_value_head": model.has_value_head,
        "adam_steps": steps,
        "meta": meta or {},
        "arrays": [{"name": n, "dtype": a.dtype.str, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path: str | Path) -> tuple[PolicyModel, dict]:
    path = Path(path)
    with path.open("rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ModelError(f"{path}: not a dialrl checkpoint (bad magic)")
        n = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("version") != 1:
            raise ModelError(f"{path}: unsupported checkpoint version {header.get('version')}")
        buffers = {}
        for spec in header["arrays"]:
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = fh.read(count * dtype.itemsize)
            buffers[spec["name"]] = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"]).copy()
    cfg = CausalLMConfig(**header["config"])
    specials = SpecialIds(pad=header["specials"]["pad"], eos=header["specials"]["eos"],
                          sep=header["specials"]["sep"], bins=tuple(header["specials"]["bins"]))
    store = ParamStore(dtype=cfg.np_dtype)
    for spec in header["arrays"]:
        name = spec["name"]
        if name.startswith("param:"):
            pname = name[len("param:"):]
            store.add(pname, buffers[name])
            store.state[pname] = AdamState(
                m=buffers[f"adam_m:{pname}"].astype(cfg.np_dtype),
                v=buffers[f"adam_v:{pname}"].astype(cfg.np_dtype),
                step=header["adam_steps"][pname],
            )
    ilql = ILQLHeadSpec(**header["ilql"]) if header["ilql"] else None
    model = PolicyModel(cfg=cfg, specials=specials, store=store, role=header["role"],
                        ilql=ilql, has_value_head=header["has_value_head"])
    return model, header["meta"]
