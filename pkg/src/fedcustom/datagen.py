"""Synthetic E2E-style restaurant corpus, word-level tokenizer, and partitioners.

Two realisation styles share one slot/clause bank:

* ``"task"``: the downstream corpus.  Clause variants are chosen with a
  cuisine-dependent preference (a fixed, seeded map from (slot, food) to a
  preferred phrasing), slots follow a canonical order, and the opening
  template family is likewise preferred per food.
* ``"general"``: the pretraining corpus for the frozen backbone.  Same
  vocabulary and clauses, but every choice is uniform and non-name slots
  are emitted in shuffled order.

Text is stored already tokenised (single spaces between tokens, punctuation
as separate tokens), so ``detokenize(tokenize(x)) == x``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigurationError, GenerationError, InputError, PartitionError

SLOTS = ("name", "eat_type", "food", "price_range", "customer_rating",
         "area", "family_friendly", "near")

# E2E attribute spelling used in linearised MRs.
SLOT_KEYS = {
    "name": "name", "eat_type": "eatType", "food": "food", "price_range": "priceRange",
    "customer_rating": "customerRating", "area": "area",
    "family_friendly": "familyFriendly", "near": "near",
}
KEY_TO_SLOT = {v: k for k, v in SLOT_KEYS.items()}

NAMES = (
    "Alimentum", "Aromi", "Bibimbap House", "Blue Spice", "Browns Cambridge", "Clowns",
    "Cocum", "Cotto", "Fitzbillies", "Giraffe", "Green Man", "Loch Fyne", "Midsummer House",
    "Strada", "Taste of Cambridge", "The Cambridge Blue", "The Cricketers", "The Dumpling Tree",
    "The Eagle", "The Golden Curry", "The Golden Palace", "The Mill", "The Olive Grove",
    "The Phoenix", "The Plough", "The Punter", "The Rice Boat", "The Twenty Two",
    "The Vaults", "The Wrestlers", "Wildwood", "Zizzi",
)
NEAR = (
    "All Bar One", "Avalon", "Burger King", "Café Adriatic", "Café Brazil", "Café Rouge",
    "Café Sicilia", "Crowne Plaza Hotel", "Express by Holiday Inn", "Raja Indian Cuisine",
    "Rainbow Vegetarian Café", "The Bakers", "The Portland Arms", "The Sorrento", "Yippee Noodle Bar",
)

VOCABULARIES: dict[str, tuple[str, ...]] = {
    "name": NAMES,
    "eat_type": ("restaurant", "coffee shop", "pub"),
    "food": ("Italian", "French", "Chinese", "Indian", "English"),
    "price_range": ("cheap", "moderate", "high", "less than £20", "£20-25", "more than £30"),
    "customer_rating": ("low", "average", "high", "1 out of 5", "3 out of 5", "5 out of 5"),
    "area": ("city centre", "riverside"),
    "family_friendly": ("yes", "no"),
    "near": NEAR,
}

# probability that an optional slot is present
DEFAULT_PRESENCE = {
    "eat_type": 0.8, "price_range": 0.7, "customer_rating": 0.65, "area": 0.7,
    "family_friendly": 0.6, "near": 0.5,
}

PAD, BOS, SEP, EOS, UNK = "<pad>", "<bos>", "<sep>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, SEP, EOS, UNK)


def surface(slot: str, value: str) -> str:
    """Form in which a slot value must appear in realised text."""
    if slot == "family_friendly":
        return "family friendly" if value == "yes" else "not family friendly"
    return value


@dataclass(frozen=True)
class MeaningRepresentation:
    name: str | None = None
    eat_type: str | None = None
    food: str | None = None
    price_range: str | None = None
    customer_rating: str | None = None
    area: str | None = None
    family_friendly: str | None = None
    near: str | None = None

    def __post_init__(self):
        if self.name is None or self.food is None:
            raise InputError("meaning representation needs at least name and food")

    def present(self) -> list[tuple[str, str]]:
        return [(s, getattr(self, s)) for s in SLOTS if getattr(self, s) is not None]

    def validate(self, vocabularies=VOCABULARIES) -> None:
        for slot, value in self.present():
            if value not in vocabularies[slot]:
                raise InputError(f"{slot} value {value!r} not in declared vocabulary")

    def linearize(self) -> str:
        return " ".join(f"{SLOT_KEYS[s]}[ {v} ]" for s, v in self.present())

    @classmethod
    def from_linearized(cls, text: str) -> "MeaningRepresentation":
        kwargs = {}
        for key, val in re.findall(r"(\w+)\[\s*([^\]]*?)\s*\]", text):
            if key not in KEY_TO_SLOT:
                raise InputError(f"unknown slot key {key!r}")
            kwargs[KEY_TO_SLOT[key]] = val
        return cls(**kwargs)


@dataclass(frozen=True)
class Example:
    mr: MeaningRepresentation
    text: str
    source_tag: int = 0

    def attribute(self, name: str):
        if name == "source_tag":
            return self.source_tag
        return getattr(self.mr, name)


@dataclass
class Shard:
    client_id: int
    examples: list[Example]
    histogram: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.examples)


@dataclass
class Corpus:
    train: list[Example]
    val: list[Example]
    test: list[Example]

    def all(self) -> list[Example]:
        return self.train + self.val + self.test

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in (self.train, self.val, self.test):
            for ex in part:
                h.update(ex.mr.linearize().encode())
                h.update(b"\t")
                h.update(ex.text.encode())
                h.update(b"\n")
            h.update(b"|")
        return h.hexdigest()[:16]


# --- template bank ---------------------------------------------------------

def _a(word: str) -> str:
    return "an" if word[0].lower() in "aeiou" else "a"


def _opening(family: int, name: str, food: str, eat: str | None) -> str:
    kind = eat if eat is not None else "place"
    if family == 0:
        return f"{name} is {_a(food)} {food} {kind}"
    if family == 1:
        return f"{name} is {_a(kind)} {kind} that serves {food} food"
    if family == 2:
        return f"there is {_a(food)} {food} {kind} called {name}"
    if family == 3:
        return f"{name} , {_a(kind)} {kind} , offers {food} cuisine"
    if family == 4:
        return f"for {food} food , visit the {kind} {name}"
    raise GenerationError(f"no opening template for family {family}")


N_FAMILIES = 5

CLAUSES: dict[str, tuple[str, ...]] = {
    "price_range": ("with {v} prices", "in the {v} price range", "with a price range of {v}",
                    "costing {v}", "where prices are {v}"),
    "customer_rating": ("rated {v}", "with a {v} customer rating", "with a rating of {v}",
                        "which customers rate {v}", "holding a {v} rating"),
    "area": ("in the {v}", "located in the {v}", "in the {v} area", "found in the {v}"),
    "family_friendly": ("that is {v}", "and it is {v}", "being {v}", "which is {v}"),
    "near": ("near {v}", "close to {v}", "not far from {v}", "next to {v}", "by {v}"),
}
CLAUSE_ORDER = ("price_range", "customer_rating", "area", "family_friendly", "near")


def template_bank_size() -> int:
    return N_FAMILIES + sum(len(v) for v in CLAUSES.values())


def _preference(slot: str, value: str, n_variants: int, bank_seed: int) -> int:
    key = f"{bank_seed}:{slot}:{value}".encode()
    return int(hashlib.sha256(key).hexdigest(), 16) % n_variants


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    size: int = 1000
    style: str = "task"
    preference: float = 0.75
    bank_seed: int = 7
    presence: tuple = tuple(sorted(DEFAULT_PRESENCE.items()))
    split: tuple = (0.8, 0.1, 0.1)


def _choose(rng, n, preferred, strength):
    if rng.random() < strength:
        return preferred
    return int(rng.integers(n))


def realize(mr: MeaningRepresentation, rng: np.random.Generator, style: str = "task",
            preference: float = 0.75, bank_seed: int = 7) -> tuple[str, int]:
    """Verbalise ``mr``; returns (text, template family id)."""
    if style not in ("task", "general"):
        raise GenerationError(f"unknown realisation style {style!r}")
    task = style == "task"
    if task:
        pref_family = _preference("opening", mr.food, N_FAMILIES, bank_seed)
        family = _choose(rng, N_FAMILIES, pref_family, preference)
    else:
        family = int(rng.integers(N_FAMILIES))
    parts = [_opening(family, mr.name, mr.food, mr.eat_type)]
    order = [s for s in CLAUSE_ORDER if getattr(mr, s) is not None]
    if not task:
        order = [order[i] for i in rng.permutation(len(order))]
    clauses = []
    for slot in order:
        value = getattr(mr, slot)
        bank = CLAUSES.get(slot)
        if not bank:
            raise GenerationError(f"template bank has no clause for slot {slot!r}")
        if task:
            pref = _preference(slot, mr.food, len(bank), bank_seed)
            k = _choose(rng, len(bank), pref, preference)
        else:
            k = int(rng.integers(len(bank)))
        clauses.append(bank[k].format(v=surface(slot, value)))
    if clauses:
        if len(clauses) >= 2 and rng.random() < 0.5:
            body = " , ".join(clauses[:-1]) + " and " + clauses[-1]
        else:
            body = " , ".join(clauses)
        parts.append(body)
    text = " ".join(parts) + " ."
    text = text[0].upper() + text[1:]
    return text, family


def sample_mr(rng: np.random.Generator, presence=None) -> MeaningRepresentation:
    presence = dict(presence or DEFAULT_PRESENCE)
    kw = {}
    for slot in SLOTS:
        vocab = VOCABULARIES[slot]
        if slot in ("name", "food") or rng.random() < presence[slot]:
            kw[slot] = vocab[int(rng.integers(len(vocab)))]
    return MeaningRepresentation(**kw)


def generate_corpus(seed: int = 0, size: int = 1000, style: str = "task",
                    preference: float = 0.75, bank_seed: int = 7, presence=None,
                    split: Sequence[float] = (0.8, 0.1, 0.1), extra_test: int = 0) -> Corpus:
    """Deterministic synthetic corpus with an 80/10/10 train/val/test split.

    ``extra_test`` appends that many further test examples drawn from an
    independent stream, which tightens metric estimates without touching the
    train and validation splits.
    """
    if size < 100:
        raise GenerationError(f"corpus size must be >= 100, got {size}")
    if abs(sum(split) - 1.0) > 1e-9:
        raise GenerationError("split fractions must sum to 1")
    rng = np.random.default_rng([seed, 0xE2E])
    examples = []
    for _ in range(size):
        mr = sample_mr(rng, presence)
        text, family = realize(mr, rng, style, preference, bank_seed)
        examples.append(Example(mr, text, family))
    n_train = int(round(size * split[0]))
    n_val = int(round(size * split[1]))
    test = examples[n_train + n_val:]
    if extra_test:
        rng = np.random.default_rng([seed, 0xE2E, 1])
        for _ in range(extra_test):
            mr = sample_mr(rng, presence)
            text, family = realize(mr, rng, style, preference, bank_seed)
            test.append(Example(mr, text, family))
    return Corpus(examples[:n_train], examples[n_train:n_train + n_val], test)


def mentions_all_values(ex: Example) -> bool:
    return all(surface(s, v) in ex.text for s, v in ex.mr.present())


# --- corpus files ----------------------------------------------------------

def write_corpus_file(path, examples: Iterable[Example]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(f"{ex.mr.linearize()}\t{ex.text}\n")


def read_corpus_file(path) -> list[Example]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        mr_text, text = line.split("\t", 1)
        out.append(Example(MeaningRepresentation.from_linearized(mr_text), text))
    return out


_E2E_ATTR = re.compile(r"(\w+)\[([^\]]*)\]")
_TOKEN_RE = re.compile(r"[\w£'-]+|[^\w\s]")


def load_e2e_csv(path) -> list[Example]:
    """Load the real E2E ``mr,ref`` CSV into examples (text re-tokenised)."""
    import csv

    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return out
        for row in reader:
            if len(row) < 2:
                continue
            kw = {}
            for key, val in _E2E_ATTR.findall(row[0]):
                slot = KEY_TO_SLOT.get(key)
                if slot is not None:
                    kw[slot] = val.strip()
            if "name" not in kw or "food" not in kw:
                continue
            out.append(Example(MeaningRepresentation(**kw), " ".join(_TOKEN_RE.findall(row[1]))))
    return out


# --- tokenizer -------------------------------------------------------------

class Vocabulary:
    """Word-level vocabulary; specials and slot delimiters come first."""

    def __init__(self, tokens: Sequence[str]):
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ConfigurationError("duplicate tokens in vocabulary")
        for s in SPECIALS:
            if s not in self.stoi:
                raise ConfigurationError(f"vocabulary lacks special {s}")

    pad_id = property(lambda self: self.stoi[PAD])
    sep_id = property(lambda self: self.stoi[SEP])
    eos_id = property(lambda self: self.stoi[EOS])
    unk_id = property(lambda self: self.stoi[UNK])
    bos_id = property(lambda self: self.stoi[BOS])

    def __len__(self):
        return len(self.itos)

    @classmethod
    def build(cls, train: Iterable[Example]) -> "Vocabulary":
        words: list[str] = []
        seen = set()
        for ex in train:
            for w in ex.mr.linearize().split() + ex.text.split():
                if w not in seen:
                    seen.add(w)
                    words.append(w)
        delims = [f"{SLOT_KEYS[s]}[" for s in SLOTS] + ["]"]
        rest = sorted(w for w in words if w not in delims and w not in SPECIALS)
        return cls(list(SPECIALS) + delims + rest)

    def tokenize(self, text: str) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(w, unk) for w in text.split()]

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.itos[i] for i in ids)

    def encode_mr(self, mr: MeaningRepresentation) -> list[int]:
        """Linearised MR followed by SEP."""
        return self.tokenize(mr.linearize()) + [self.sep_id]

    def encode_example(self, ex: Example) -> tuple[np.ndarray, int]:
        """Token ids of MR ⊕ SEP ⊕ text ⊕ EOS, plus the SEP position."""
        mr = self.encode_mr(ex.mr)
        ids = mr + self.tokenize(ex.text) + [self.eos_id]
        return np.asarray(ids, dtype=np.int64), len(mr) - 1

    def to_lines(self) -> list[str]:
        return list(self.itos)

    def digest(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode()).hexdigest()[:16]


# --- partitioning ----------------------------------------------------------

def _histogram(examples, attribute="food"):
    hist: dict = {}
    for ex in examples:
        v = ex.attribute(attribute)
        hist[v] = hist.get(v, 0) + 1
    return dict(sorted(hist.items(), key=lambda kv: str(kv[0])))


def partition_iid(train: Sequence[Example], n_clients: int, seed: int,
                  attribute: str = "food") -> list[Shard]:
    """Random split into ``n_clients`` shards whose sizes differ by at most one.

    Examples are shuffled, grouped by ``attribute`` and dealt round-robin, so
    every shard's attribute histogram is within one count of every other's.
    """
    if n_clients < 1 or n_clients > len(train):
        raise ConfigurationError(f"cannot split {len(train)} examples over {n_clients} clients")
    rng = np.random.default_rng([seed, 0x11D])
    perm = rng.permutation(len(train))
    rank = {str(v): i for i, v in enumerate(rng.permutation(
        sorted({str(ex.attribute(attribute)) for ex in train})))}
    order = sorted(range(len(train)), key=lambda j: (rank[str(train[perm[j]].attribute(attribute))], j))
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for pos, j in enumerate(order):
        buckets[pos % n_clients].append(int(perm[j]))
    shards = []
    for cid, idx in enumerate(buckets):
        ex = [train[i] for i in sorted(idx)]
        shards.append(Shard(cid, ex, _histogram(ex, attribute)))
    return shards


def partition_noniid(train: Sequence[Example], n_clients: int, attribute: str, x_percent: float,
                     seed: int) -> list[Shard]:
    """Label-skew split: client k draws x% of its shard from value v_k.

    Values are assigned to clients cyclically in sorted order.  The
    remaining (100 - x)% is drawn uniformly at random from the pool of
    examples whose value differs from v_k.  Shard sizes are equal
    (``len(train) // n_clients``); leftovers are dropped.
    """
    if not 0 <= x_percent <= 100:
        raise ConfigurationError(f"x_percent must lie in [0, 100], got {x_percent}")
    if n_clients < 1 or n_clients > len(train):
        raise ConfigurationError(f"cannot split {len(train)} examples over {n_clients} clients")
    rng = np.random.default_rng([seed, 0x2D2])
    size = len(train) // n_clients
    n_major = int(round(size * x_percent / 100.0))
    n_minor = size - n_major

    by_value: dict = {}
    for i, ex in enumerate(train):
        by_value.setdefault(ex.attribute(attribute), []).append(i)
    values = sorted(by_value, key=str)
    pools = {v: list(rng.permutation(by_value[v])) for v in values}
    assigned = [values[k % len(values)] for k in range(n_clients)]

    need: dict = {}
    for v in assigned:
        need[v] = need.get(v, 0) + n_major
    for v, n in need.items():
        if len(pools[v]) < n:
            raise PartitionError(f"attribute value {v!r} has {len(pools[v])} examples, needs {n}")

    picks = []
    for k in range(n_clients):
        v = assigned[k]
        picks.append([pools[v].pop() for _ in range(n_major)])

    # Minority draws, one example per client in turn.  A value is drawn with
    # probability proportional to its remaining supply, subject to staying
    # feasible: each group of clients sharing v_k must still be coverable by
    # the supply of the other values.
    supply = {u: len(pools[u]) for u in values}
    group_need = {v: 0 for v in values}
    for k in range(n_clients):
        group_need[assigned[k]] += n_minor

    def feasible():
        total = sum(supply.values())
        if sum(group_need.values()) > total:
            return False
        return all(group_need[v] <= total - supply[v] for v in values)

    if not feasible():
        short = max(values, key=lambda v: group_need[v] - (sum(supply.values()) - supply[v]))
        raise PartitionError(f"not enough examples outside value {short!r} for its clients")
    for _ in range(n_minor):
        for k in range(n_clients):
            v = assigned[k]
            cands = [u for u in values if u != v and supply[u] > 0]
            w = np.array([supply[u] for u in cands], dtype=float)
            order = rng.choice(len(cands), size=len(cands), replace=False, p=w / w.sum())
            for j in order:
                u = cands[j]
                supply[u] -= 1
                group_need[v] -= 1
                if feasible():
                    break
                supply[u] += 1
                group_need[v] += 1
            else:
                raise PartitionError(f"not enough examples outside value {v!r} for client {k}")
            picks[k].append(pools[u].pop())

    shards = []
    for k in range(n_clients):
        ex = [train[i] for i in sorted(picks[k])]
        shards.append(Shard(k, ex, _histogram(ex, attribute)))
    return shards


def total_variation(hist: dict, reference: dict) -> float:
    keys = set(hist) | set(reference)
    n1 = sum(hist.values()) or 1
    n2 = sum(reference.values()) or 1
    return 0.5 * sum(abs(hist.get(k, 0) / n1 - reference.get(k, 0) / n2) for k in keys)
