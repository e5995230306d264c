"""Conversation corpora: vocabulary, synthetic task generation, pair extraction, JSONL IO.

A corpus is a list of :class:`Conversation` objects. Turn texts carry their
speaker tag as the first token ("[CUS]" / "[REP]" by convention), so speaker
tags are ordinary vocabulary tokens and count toward context length.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PAD_TOKEN = "<pad>"
EOS_TOKEN = "<eos>"
SEP_TOKEN = "<sep>"
USER_TAG = "[CUS]"
SYSTEM_TAG = "[REP]"

SPEAKERS = ("user", "system")
_TAG_BY_SPEAKER = {"user": USER_TAG, "system": SYSTEM_TAG}


class CorpusError(ValueError):
    """Raised on malformed corpora or corpus files."""


def bin_token(k: int) -> str:
    """Surface form of the k-th reward-bin token."""
    return f"<r{k}>"


@dataclass(frozen=True)
class Vocab:
    """Dense bijective token<->id map with PAD/EOS/SEP and K reward-bin tokens."""

    id_to_token: tuple[str, ...]
    n_bins: int

    def __post_init__(self):
        if len(set(self.id_to_token)) != len(self.id_to_token):
            raise CorpusError("vocab tokens must be unique")

    @property
    def token_to_id(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def eos_id(self) -> int:
        return 1

    @property
    def sep_id(self) -> int:
        return 2

    @property
    def bin_ids(self) -> tuple[int, ...]:
        return tuple(range(3, 3 + self.n_bins))

    @property
    def special_ids(self) -> frozenset[int]:
        return frozenset((self.pad_id, self.eos_id, self.sep_id) + self.bin_ids)

    def encode(self, tokens: list[str] | tuple[str, ...]) -> list[int]:
        table = self.token_to_id
        try:
            return [table[t] for t in tokens]
        except KeyError as exc:
            raise CorpusError(f"token not in vocab: {exc.args[0]!r}") from None

    def decode(self, ids) -> list[str]:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_token):
                raise CorpusError(f"id not in vocab: {i}")
            out.append(self.id_to_token[i])
        return out

    def strip_special(self, ids) -> tuple[int, ...]:
        """Drop PAD/EOS/SEP/bin tokens, keeping surface tokens only."""
        special = self.special_ids
        return tuple(int(i) for i in ids if int(i) not in special)

    def vocab_hash(self) -> str:
        h = hashlib.sha256("\x00".join(self.id_to_token).encode("utf-8"))
        h.update(f"|bins={self.n_bins}".encode("utf-8"))
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {"tokens": list(self.id_to_token), "n_bins": self.n_bins}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(id_to_token=tuple(d["tokens"]), n_bins=int(d["n_bins"]))


@dataclass(frozen=True)
class Turn:
    speaker: str  # "user" | "system"
    text: tuple[str, ...]  # first token is the speaker tag by convention
    paraphrase_class: int | None = None


@dataclass(frozen=True)
class Conversation:
    id: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        for t in self.turns:
            if t.speaker not in SPEAKERS:
                raise CorpusError(f"unknown speaker {t.speaker!r} in conversation {self.id}")
        if not any(t.speaker == "system" for t in self.turns):
            raise CorpusError(f"conversation {self.id} has no system turn")


@dataclass(frozen=True)
class ContextResponsePair:
    """One training/eval point: SEP-terminated context ids, EOS-terminated response ids."""

    context: tuple[int, ...]
    response: tuple[int, ...]
    pair_id: str
    paraphrase_class: int | None = None

    def __post_init__(self):
        if not self.response:
            raise CorpusError(f"pair {self.pair_id}: empty response")
        if not self.context:
            raise CorpusError(f"pair {self.pair_id}: empty context")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Knobs for the synthetic task-oriented dialogue generator.

    Every system act has exactly ``paraphrases_per_act`` surface realizations
    sharing one paraphrase class, so "close enough but not verbatim" responses
    are exercised. The act for each exchange is selected by a request word in
    the user turn ("check" vs "change"), skewed so the rarer request is harder
    to learn from imitation alone.
    """

    num_intents: int = 6
    slots_per_intent: tuple[int, ...] | None = None  # defaults to 3 per intent
    paraphrases_per_act: int = 3
    min_len: int = 3
    max_len: int = 6
    seed: int = 0
    num_conversations: int = 600
    exchanges_per_conversation: int = 2
    majority_rate: float = 0.75  # probability of the majority request word

    def resolved_slots(self) -> tuple[int, ...]:
        if self.slots_per_intent is None:
            return tuple(3 for _ in range(self.num_intents))
        if len(self.slots_per_intent) != self.num_intents:
            raise CorpusError("slots_per_intent length must equal num_intents")
        return tuple(self.slots_per_intent)

    def validate(self) -> None:
        if self.paraphrases_per_act < 2:
            raise CorpusError("paraphrases_per_act must be >= 2")
        if self.num_intents < 1:
            raise CorpusError("num_intents must be >= 1")
        if not (3 <= self.min_len <= self.max_len):
            raise CorpusError("need 3 <= min_len <= max_len (act word + topic word + tail)")
        if self.num_conversations < 1:
            raise CorpusError("num_conversations must be >= 1")
        if not 0.5 <= self.majority_rate < 1.0:
            raise CorpusError("majority_rate must be in [0.5, 1)")
        self.resolved_slots()


def build_vocab(corpus: list[Conversation], n_bins: int) -> Vocab:
    """Collect every surface token plus PAD, EOS, SEP and R_0..R_{K-1} bin tokens."""
    if not corpus:
        raise CorpusError("empty corpus")
    if n_bins < 2:
        raise CorpusError("need at least 2 reward bins")
    surface = sorted({tok for conv in corpus for turn in conv.turns for tok in turn.text})
    specials = [PAD_TOKEN, EOS_TOKEN, SEP_TOKEN] + [bin_token(k) for k in range(n_bins)]
    clash = set(surface) & set(specials)
    if clash:
        raise CorpusError(f"surface tokens collide with special tokens: {sorted(clash)}")
    return Vocab(id_to_token=tuple(specials + surface), n_bins=n_bins)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

# request synonyms: the act is selected by the request TYPE, which surfaces as
# one of several words, so imitation must group synonyms to pick the right act
_REQUEST_SYNONYMS = (
    ("check", "status", "lookup", "view"),
    ("change", "update", "modify", "fix"),
)
_FOLLOWUP_WORDS = ("also", "next")
_GREETINGS = ("hello", "hi")


def _act_word(exchange: int, request: int) -> str:
    return f"act{exchange}{'ab'[request]}"


def _class_id(spec: SyntheticTaskSpec, intent: int, exchange: int, request: int) -> int:
    return (intent * spec.exchanges_per_conversation + exchange) * 2 + request


def _build_realizations(spec: SyntheticTaskSpec, rng: np.random.Generator) -> dict[int, tuple[tuple[str, ...], ...]]:
    """P surface realizations per class, globally unique across classes.

    Realizations of one class share the act word and topic word; the tail
    tokens distinguish paraphrases. Classes of the same intent/exchange with
    different request words therefore diverge at the first token.
    """
    pool = [f"w{k:02d}" for k in range(40)]
    seen: set[tuple[str, ...]] = set()
    table: dict[int, tuple[tuple[str, ...], ...]] = {}
    for intent in range(spec.num_intents):
        for exchange in range(spec.exchanges_per_conversation):
            for request in range(2):
                cid = _class_id(spec, intent, exchange, request)
                members = []
                while len(members) < spec.paraphrases_per_act:
                    tail_len = int(rng.integers(spec.min_len - 2, spec.max_len - 2 + 1))
                    tail = tuple(str(w) for w in rng.choice(pool, size=tail_len, replace=False))
                    cand = (_act_word(exchange, request), f"topic{intent}") + tail
                    if cand in seen:
                        continue
                    seen.add(cand)
                    members.append(cand)
                table[cid] = tuple(members)
    return table


def generate_synthetic_corpus(spec: SyntheticTaskSpec) -> list[Conversation]:
    """Deterministic synthetic corpus; every system turn carries a paraphrase class."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    realizations = _build_realizations(spec, rng)
    slots = spec.resolved_slots()
    # Cycle realizations per class so all P members appear once counts allow.
    use_count = {cid: 0 for cid in realizations}

    conversations = []
    for c in range(spec.num_conversations):
        intent = int(rng.integers(spec.num_intents))
        turns: list[Turn] = []
        for exchange in range(spec.exchanges_per_conversation):
            request = 0 if rng.random() < spec.majority_rate else 1
            req_word = _REQUEST_SYNONYMS[request][int(rng.integers(len(_REQUEST_SYNONYMS[request])))]
            slot = f"slot{intent}_{int(rng.integers(slots[intent]))}"
            if exchange == 0:
                greet = _GREETINGS[int(rng.integers(len(_GREETINGS)))]
                user_text = (USER_TAG, greet, req_word, f"topic{intent}", slot)
            else:
                user_text = (USER_TAG, _FOLLOWUP_WORDS[int(rng.integers(2))], req_word, slot)
            cid = _class_id(spec, intent, exchange, request)
            members = realizations[cid]
            sys_text = (SYSTEM_TAG,) + members[use_count[cid] % len(members)]
            use_count[cid] += 1
            turns.append(Turn("user", user_text))
            turns.append(Turn("system", sys_text, paraphrase_class=cid))
        conversations.append(Conversation(id=f"conv{c:05d}", turns=tuple(turns)))
    return conversations


def paraphrase_registry(corpus: list[Conversation]) -> dict[int, frozenset[tuple[str, ...]]]:
    """Class id -> set of member realizations (surface tokens, speaker tag stripped)."""
    acc: dict[int, set[tuple[str, ...]]] = {}
    for conv in corpus:
        for turn in conv.turns:
            if turn.speaker == "system" and turn.paraphrase_class is not None:
                acc.setdefault(turn.paraphrase_class, set()).add(tuple(turn.text[1:]))
    return {cid: frozenset(members) for cid, members in acc.items()}


# ---------------------------------------------------------------------------
# Pair extraction and splits
# ---------------------------------------------------------------------------

def pairs_from_conversations(
    corpus: list[Conversation], vocab: Vocab, max_context_len: int
) -> list[ContextResponsePair]:
    """One pair per system turn.

    The context is the concatenated prior turn texts followed by the
    responding turn's speaker tag and SEP; it is left-truncated (oldest tokens
    dropped) so the emitted context, including SEP, is at most
    ``max_context_len`` tokens. The response is the system text without its
    tag, terminated by EOS.
    """
    if max_context_len < 2:
        raise CorpusError("max_context_len must be >= 2 (speaker tag + SEP)")
    pairs = []
    for conv in corpus:
        history: list[str] = []
        for idx, turn in enumerate(conv.turns):
            if turn.speaker == "system":
                tag = turn.text[0] if turn.text else SYSTEM_TAG
                ctx_tokens = history + [tag]
                ctx_tokens = ctx_tokens[-(max_context_len - 1):]
                context = tuple(vocab.encode(ctx_tokens)) + (vocab.sep_id,)
                response = tuple(vocab.encode(list(turn.text[1:]))) + (vocab.eos_id,)
                pairs.append(ContextResponsePair(
                    context=context,
                    response=response,
                    pair_id=f"{conv.id}:{idx}",
                    paraphrase_class=turn.paraphrase_class,
                ))
            history.extend(turn.text)
    return pairs


def split_conversations(
    corpus: list[Conversation],
    seed: int,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[list[Conversation], list[Conversation], list[Conversation]]:
    """Seed-stable train/val/test split by conversation id hash (partition, no leaks)."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise CorpusError("split fractions must sum to 1")
    buckets: tuple[list[Conversation], list[Conversation], list[Conversation]] = ([], [], [])
    lo_train = fractions[0]
    lo_val = fractions[0] + fractions[1]
    for conv in corpus:
        digest = hashlib.sha256(f"{seed}:{conv.id}".encode("utf-8")).digest()
        u = int.from_bytes(digest[:8], "big") / 2**64
        if u < lo_train:
            buckets[0].append(conv)
        elif u < lo_val:
            buckets[1].append(conv)
        else:
            buckets[2].append(conv)
    return buckets


# ---------------------------------------------------------------------------
# JSON Lines IO
# ---------------------------------------------------------------------------

def save_jsonl(corpus: list[Conversation], path: str | Path) -> None:
    """One conversation per line: {id, turns: [{speaker, text, paraphrase_class?}]}."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for conv in corpus:
            obj = {
                "id": conv.id,
                "turns": [
                    {"speaker": t.speaker, "text": list(t.text)}
                    | ({"paraphrase_class": t.paraphrase_class} if t.paraphrase_class is not None else {})
                    for t in conv.turns
                ],
            }
            fh.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def load_jsonl(path: str | Path) -> list[Conversation]:
    """Inverse of :func:`save_jsonl`; errors name the offending line."""
    path = Path(path)
    conversations = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON: {exc.msg}") from None
            try:
                turns = []
                for t in obj["turns"]:
                    speaker = t["speaker"]
                    if speaker not in SPEAKERS:
                        raise CorpusError(
                            f"{path}:{lineno}: unknown speaker {speaker!r} (expected user|system)")
                    turns.append(Turn(
                        speaker=speaker,
                        text=tuple(t["text"]),
                        paraphrase_class=t.get("paraphrase_class"),
                    ))
                conversations.append(Conversation(id=obj["id"], turns=tuple(turns)))
            except KeyError as exc:
                raise CorpusError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
    return conversations


def import_stub(path: str | Path) -> list[Conversation]:
    """Importer placeholder for external archives.

    Real ABCD/MultiWoz/TaskMaster loading is out of scope; convert such data
    to the JSONL shape consumed by :func:`load_jsonl` first::

        {"id": "...", "turns": [{"speaker": "user|system", "text": ["[CUS]", ...]}]}

    Turn texts must start with their speaker-tag token.
    """
    raise NotImplementedError(
        "convert external archives to the documented JSONL shape and use load_jsonl")
