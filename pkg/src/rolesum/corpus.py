"""Dialogue data model, JSONL ingestion, role tagging, vocabulary and batching."""
from __future__ import annotations

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS, ROLE_USER, ROLE_AGENT = range(6)
RESERVED = ("<pad>", "<unk>", "<s>", "</s>", "<user>", "<agent>")
ROLES = ("user", "agent")
ROLE_TAG = {"user": "<user>", "agent": "<agent>"}

# per-position role labels
USER, AGENT, PADDED = 0, 1, -1
LABEL = {"user": USER, "agent": AGENT}


class CorpusError(ValueError):
    pass


@dataclass
class Utterance:
    role: str
    text: list[str]


@dataclass
class Dialogue:
    id: str
    utterances: list[Utterance]
    user_summary: list[str]
    agent_summary: list[str]
    needs_integration: bool | None = None

    def to_json(self) -> dict:
        out = {
            "id": self.id,
            "utterances": [{"role": u.role, "text": " ".join(u.text)} for u in self.utterances],
            "user_summary": " ".join(self.user_summary),
            "agent_summary": " ".join(self.agent_summary),
        }
        if self.needs_integration is not None:
            out["needs_integration"] = self.needs_integration
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Dialogue":
        for key in ("id", "utterances", "user_summary", "agent_summary"):
            if key not in obj:
                raise CorpusError(f"missing field {key!r}")
        utts = []
        for j, u in enumerate(obj["utterances"]):
            if "role" not in u or "text" not in u:
                raise CorpusError(f"utterance {j} missing 'role' or 'text'")
            if u["role"] not in ROLES:
                raise CorpusError(f"utterance {j} has unknown role {u['role']!r}")
            utts.append(Utterance(u["role"], u["text"].split()))
        d = cls(str(obj["id"]), utts, obj["user_summary"].split(), obj["agent_summary"].split(),
                obj.get("needs_integration"))
        roles = {u.role for u in d.utterances if u.text}
        if roles != set(ROLES):
            raise CorpusError(f"dialogue {d.id!r} needs at least one utterance from each role, has {sorted(roles)}")
        if not d.user_summary or not d.agent_summary:
            raise CorpusError(f"dialogue {d.id!r} has an empty summary")
        return d


def load_corpus(path, split: str | None = None) -> list[Dialogue]:
    """Read one JSON dialogue per line.  ``path`` is a file, or a directory holding ``{split}.jsonl``."""
    path = Path(path)
    if path.is_dir():
        if split is None:
            raise CorpusError(f"{path} is a directory; a split name is required")
        path = path / f"{split}.jsonl"
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({e.msg})") from None
            try:
                out.append(Dialogue.from_json(obj))
            except CorpusError as e:
                raise CorpusError(f"{path}:{lineno}: {e}") from None
    log.info("loaded %d dialogues from %s", len(out), path)
    return out


def save_corpus(dialogues, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            fh.write(json.dumps(d.to_json(), ensure_ascii=False) + "\n")


def serialize_dialogue(d: Dialogue, max_input: int = 500):
    """Flatten to ``[<role>, tokens..., <role>, tokens...]`` with a role label per position."""
    tokens, roles = [], []
    for j, u in enumerate(d.utterances):
        if not u.text:
            log.warning("dialogue %s: skipping empty utterance %d", d.id, j)
            continue
        tokens.append(ROLE_TAG[u.role])
        tokens.extend(u.text)
        roles.extend([LABEL[u.role]] * (len(u.text) + 1))
    return tokens[:max_input], roles[:max_input]


class Vocabulary:
    def __init__(self, tokens=()):
        self.itos = list(RESERVED)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t not in self.stoi:
                self.stoi[t] = len(self.itos)
                self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token) -> int:
        return self.stoi.get(token, UNK)

    def token(self, i: int) -> str:
        return self.itos[i]

    def encode(self, tokens):
        return [self.id(t) for t in tokens]


def build_vocabulary(dialogues, cap: int = 10000) -> Vocabulary:
    """Top ``cap`` tokens by frequency (ties lexicographic); reserved entries do not count."""
    if not dialogues:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for d in dialogues:
        for u in d.utterances:
            counts.update(u.text)
        counts.update(d.user_summary)
        counts.update(d.agent_summary)
    for t in RESERVED:
        counts.pop(t, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocabulary(t for t, _ in ranked[:cap])


@dataclass
class RoleMasks:
    user: np.ndarray
    agent: np.ndarray

    def of(self, role: str) -> np.ndarray:
        return self.user if role == "user" else self.agent


def build_role_masks(labels) -> RoleMasks:
    labels = np.asarray(labels)
    return RoleMasks((labels == USER).astype(np.float64), (labels == AGENT).astype(np.float64))


@dataclass
class EncodedExample:
    id: str
    input_ids: list[int]      # in-vocabulary ids, OOV -> UNK
    ext_ids: list[int]        # source OOVs get ids len(vocab) + j
    oovs: list[str]
    role_ids: list[int]
    user_target_ids: list[int]   # extended ids, ending in EOS
    agent_target_ids: list[int]
    needs_integration: bool | None = None
    tokens: list[str] = field(default_factory=list)

    def target(self, role):
        return self.user_target_ids if role == "user" else self.agent_target_ids


def encode_example(d: Dialogue, vocab: Vocabulary, max_input=500, max_output=100) -> EncodedExample:
    tokens, roles = serialize_dialogue(d, max_input)
    ids, ext, oovs = [], [], []
    for t in tokens:
        i = vocab.id(t)
        ids.append(i)
        if i == UNK and t not in vocab:
            if t not in oovs:
                oovs.append(t)
            ext.append(len(vocab) + oovs.index(t))
        else:
            ext.append(i)

    def target(summary):
        out = []
        for t in summary[: max(max_output - 1, 0)]:
            i = vocab.id(t)
            if i == UNK and t in oovs:
                i = len(vocab) + oovs.index(t)
            out.append(i)
        return out + [EOS]

    return EncodedExample(d.id, ids, ext, oovs, roles, target(d.user_summary), target(d.agent_summary),
                          d.needs_integration, tokens)


def decode_ids(ids, vocab: Vocabulary, oovs) -> list[str]:
    out = []
    for i in ids:
        if i == EOS:
            break
        out.append(vocab.token(i) if i < len(vocab) else oovs[i - len(vocab)])
    return out


@dataclass
class Batch:
    ids: list[str]
    input_ids: np.ndarray    # [B, n]
    ext_ids: np.ndarray
    pad_mask: np.ndarray     # 1 on real positions
    user_mask: np.ndarray
    agent_mask: np.ndarray
    n_oov: int
    oovs: list[list[str]]
    targets: dict            # role -> (inputs, outputs, step mask), each [B, T_role]
    examples: list[EncodedExample]

    @property
    def size(self):
        return len(self.ids)

    def lengths(self, role):
        return self.targets[role][2].sum(axis=1).astype(int)

    def role_mask(self, role):
        return self.user_mask if role == "user" else self.agent_mask


def _pad(seqs, value=PAD, length=None):
    n = length or max(len(s) for s in seqs)
    out = np.full((len(seqs), n), value, dtype=np.int64)
    mask = np.zeros((len(seqs), n))
    for b, s in enumerate(seqs):
        out[b, : len(s)] = s
        mask[b, : len(s)] = 1
    return out, mask


def make_batch(examples, vocab_size: int, pad_id: int = PAD, target_pad: dict | None = None) -> Batch:
    """Pad a group of examples.  ``target_pad`` optionally forces per-role target lengths."""
    input_ids, pad_mask = _pad([e.input_ids for e in examples], pad_id)
    ext_ids, _ = _pad([e.ext_ids for e in examples], pad_id)
    roles, _ = _pad([e.role_ids for e in examples], PADDED)
    masks = build_role_masks(roles)
    targets = {}
    for role in ROLES:
        outs = [e.target(role) for e in examples]
        ins = [[BOS] + [t if t < vocab_size else UNK for t in o[:-1]] for o in outs]
        length = (target_pad or {}).get(role)
        tin, _ = _pad(ins, pad_id, length)
        tout, tmask = _pad(outs, pad_id, length)
        targets[role] = (tin, tout, tmask)
    return Batch([e.id for e in examples], input_ids, ext_ids, pad_mask, masks.user, masks.agent,
                 max(len(e.oovs) for e in examples), [e.oovs for e in examples], targets, list(examples))


def batch_iterator(examples, batch_size: int, vocab_size: int, pad_id: int = PAD, shuffle=False, seed=0):
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(examples)))
    if shuffle:
        random.Random(seed).shuffle(order)
    for start in range(0, len(order), batch_size):
        yield make_batch([examples[i] for i in order[start:start + batch_size]], vocab_size, pad_id)


# -- synthetic corpus -------------------------------------------------------------

TOPICS = ["payment", "delivery", "refund", "invoice", "warranty", "coupon", "exchange", "installation"]
ADJECTIVES = ["new", "old", "large", "small", "cheap", "premium", "spare", "wireless"]
COLORS = ["red", "blue", "black", "white", "green", "silver", "golden", "pink"]
NOUNS = ["phone", "laptop", "charger", "headset", "camera", "kettle", "blender", "monitor", "printer", "router"]

QUESTIONS = [
    "can i use {topic} for the {obj} ?",
    "is {topic} available for the {obj} ?",
    "i want to ask about {topic} for my {obj}",
    "hi , what about {topic} for this {obj} ?",
]
ANSWERS = {
    True: "yes , {topic} is available for the {obj} .",
    False: "sorry , {topic} is not available for the {obj} .",
}
VAGUE_ANSWERS = {
    True: ["yes , it is ok normally .", "sure , no problem ."],
    False: ["sorry , that is not possible .", "no , we can not do that ."],
}
GREETINGS = [("hello", "hello , how can i help you ?"), ("hi there", "welcome , what can i do ?")]
CLOSINGS = [("thanks", "you are welcome ."), ("ok thank you", "my pleasure .")]


def generate_synthetic_corpus(n: int, seed: int = 0, integration_fraction: float = 0.5) -> list[Dialogue]:
    """Templated multi-topic question/answer dialogues.

    The user summary is read off the user's questions.  The agent summary
    restates the agent's answers; in integration samples the agent answers
    vaguely, so the topic and the 3-token object span only occur in user turns.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if not 0 <= integration_fraction <= 1:
        raise ValueError("integration_fraction must lie in [0, 1]")
    rng = random.Random(seed)
    out = []
    for k in range(n):
        integrate = rng.random() < integration_fraction
        utts, user_sum, agent_sum = [], [], []
        if rng.random() < 0.5:
            u, a = rng.choice(GREETINGS)
            utts += [Utterance("user", u.split()), Utterance("agent", a.split())]
        for topic in rng.sample(TOPICS, rng.randint(1, 3)):
            obj = f"{rng.choice(ADJECTIVES)} {rng.choice(COLORS)} {rng.choice(NOUNS)}"
            ok = rng.random() < 0.6
            utts.append(Utterance("user", rng.choice(QUESTIONS).format(topic=topic, obj=obj).split()))
            if integrate:
                answer = rng.choice(VAGUE_ANSWERS[ok])
            else:
                answer = ANSWERS[ok].format(topic=topic, obj=obj)
            utts.append(Utterance("agent", answer.split()))
            user_sum += f"user asks {topic} for {obj} .".split()
            agent_sum += f"agent {'confirms' if ok else 'denies'} {topic} for {obj} .".split()
        if rng.random() < 0.5:
            u, a = rng.choice(CLOSINGS)
            utts += [Utterance("user", u.split()), Utterance("agent", a.split())]
        out.append(Dialogue(f"syn-{seed}-{k}", utts, user_sum, agent_sum, integrate))
    return out


def split_corpus(dialogues, fractions=(0.8, 0.1, 0.1)):
    n = len(dialogues)
    a = int(round(n * fractions[0]))
    b = a + int(round(n * fractions[1]))
    return {"train": dialogues[:a], "val": dialogues[a:b], "test": dialogues[b:]}
