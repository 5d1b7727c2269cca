"""Dataset loading, vocabularies, and padded batch construction.

Splits follow the three-parallel-file layout used by the public intent/slot
corpora (ATIS, SNIPS): each split directory holds `seq.in` (whitespace
separated tokens), `seq.out` (one IOB tag per token) and `label` (one intent
per utterance), with aligned line numbers.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from random import Random
from typing import Iterator, Sequence

import torch

from .errors import (
    EmptyCorpusError,
    LengthMismatchError,
    MalformedTagError,
    SequenceTooLongError,
    UnknownLabelError,
)

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
CLS_TOKEN = "<cls>"
TOKEN_SPECIALS = (PAD_TOKEN, UNK_TOKEN, CLS_TOKEN)

SLOT_PAD = "<pad>"
SLOT_BOS = "<bos>"
SLOT_SPECIALS = (SLOT_PAD, SLOT_BOS)

PAD_ID, UNK_ID, CLS_ID = 0, 1, 2
SLOT_PAD_ID, SLOT_BOS_ID = 0, 1
N_SLOT_SPECIALS = len(SLOT_SPECIALS)

_TAG_RE = re.compile(r"^(O|[BI]-.+)$")

SPLIT_FILES = ("seq.in", "seq.out", "label")


@dataclass(frozen=True)
class Example:
    """One utterance with its aligned IOB tags and intent."""

    tokens: tuple[str, ...]
    slot_labels: tuple[str, ...]
    intent: str

    def __post_init__(self):
        if len(self.tokens) != len(self.slot_labels):
            raise LengthMismatchError(
                f"{len(self.tokens)} tokens vs {len(self.slot_labels)} tags"
            )
        if not self.tokens:
            raise LengthMismatchError("empty utterance")
        for tag in self.slot_labels:
            if not _TAG_RE.match(tag):
                raise MalformedTagError(tag)

    def __len__(self):
        return len(self.tokens)


def load_split(data_dir: str | Path, split: str) -> list[Example]:
    """Load one split directory into validated examples.

    Tokens are lowercased; tags and intents are kept verbatim. Raises
    LengthMismatchError when the three files disagree in line count or a line
    pair disagrees in token count, MalformedTagError for invalid tags, and
    OSError when a file is missing.
    """
    split_dir = Path(data_dir) / split
    lines = {}
    for name in SPLIT_FILES:
        text = (split_dir / name).read_text(encoding="utf-8")
        rows = text.split("\n")
        if rows and rows[-1] == "":  # trailing newline
            rows.pop()
        lines[name] = rows

    counts = {name: len(rows) for name, rows in lines.items()}
    if len(set(counts.values())) != 1:
        raise LengthMismatchError(
            f"line counts differ in {split_dir}: {counts}", line=min(counts.values()) + 1
        )

    examples = []
    for i, (tok_line, tag_line, intent) in enumerate(
        zip(lines["seq.in"], lines["seq.out"], lines["label"]), start=1
    ):
        tokens = tok_line.split()
        tags = tag_line.split()
        if not tokens:
            raise LengthMismatchError(f"empty utterance on line {i}", line=i)
        if len(tokens) != len(tags):
            raise LengthMismatchError(
                f"line {i}: {len(tokens)} tokens but {len(tags)} tags", line=i
            )
        for tag in tags:
            if not _TAG_RE.match(tag):
                raise MalformedTagError(tag, line=i)
        intent = intent.strip()
        if not intent:
            raise LengthMismatchError(f"empty intent on line {i}", line=i)
        examples.append(
            Example(tuple(t.lower() for t in tokens), tuple(tags), intent)
        )
    return examples


class Vocabulary:
    """Bidirectional token / slot-tag / intent maps with reserved specials.

    Ids are assigned deterministically: specials first, then the distinct
    training strings in sorted order. The slot map always contains "O".
    """

    def __init__(self, tokens: Sequence[str], slots: Sequence[str], intents: Sequence[str]):
        if tuple(tokens[: len(TOKEN_SPECIALS)]) != TOKEN_SPECIALS:
            raise ValueError("token specials missing or out of order")
        if tuple(slots[:N_SLOT_SPECIALS]) != SLOT_SPECIALS:
            raise ValueError("slot specials missing or out of order")
        self.tokens = tuple(tokens)
        self.slots = tuple(slots)
        self.intents = tuple(intents)
        for name, seq in (("token", self.tokens), ("slot", self.slots), ("intent", self.intents)):
            if len(set(seq)) != len(seq):
                raise ValueError(f"duplicate entries in {name} map")
        if "O" not in self.slots:
            raise ValueError('slot map must contain "O"')
        self._token_ids = {s: i for i, s in enumerate(self.tokens)}
        self._slot_ids = {s: i for i, s in enumerate(self.slots)}
        self._intent_ids = {s: i for i, s in enumerate(self.intents)}

    @classmethod
    def build(cls, train: Sequence[Example]) -> "Vocabulary":
        if not train:
            raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
        toks = sorted({t for ex in train for t in ex.tokens} - set(TOKEN_SPECIALS))
        tags = sorted(
            ({t for ex in train for t in ex.slot_labels} | {"O"}) - set(SLOT_SPECIALS)
        )
        intents = sorted({ex.intent for ex in train})
        return cls(TOKEN_SPECIALS + tuple(toks), SLOT_SPECIALS + tuple(tags), tuple(intents))

    # --- sizes ---
    @property
    def n_tokens(self) -> int:
        return len(self.tokens)

    @property
    def n_slot_tags(self) -> int:
        """Number of real tags, i.e. the slot label-space size d_s."""
        return len(self.slots) - N_SLOT_SPECIALS

    @property
    def n_intents(self) -> int:
        return len(self.intents)

    # --- lookups ---
    def token_id(self, token: str) -> int:
        return self._token_ids.get(token, UNK_ID)

    def slot_id(self, tag: str) -> int:
        try:
            return self._slot_ids[tag]
        except KeyError:
            raise UnknownLabelError(f"slot tag {tag!r} not in vocabulary") from None

    def intent_id(self, intent: str) -> int:
        try:
            return self._intent_ids[intent]
        except KeyError:
            raise UnknownLabelError(f"intent {intent!r} not in vocabulary") from None

    def intent_label(self, index: int) -> str:
        return self.intents[index]

    def model_slot_index(self, tag: str) -> int:
        """Index of a real tag in the classifier's output space [0, d_s)."""
        return self.slot_id(tag) - N_SLOT_SPECIALS

    def model_slot_tag(self, index: int) -> str:
        return self.slots[index + N_SLOT_SPECIALS]

    # --- serialization ---
    def to_json_dict(self) -> dict:
        return {
            "tokens": list(self.tokens),
            "slots": list(self.slots),
            "intents": list(self.intents),
            "specials": {
                "pad": PAD_ID,
                "unk": UNK_ID,
                "cls": CLS_ID,
                "slot_pad": SLOT_PAD_ID,
                "slot_bos": SLOT_BOS_ID,
            },
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj["slots"], obj["intents"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_json_dict(), ensure_ascii=False, indent=1) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def sha256(self) -> str:
        canonical = json.dumps(self.to_json_dict(), ensure_ascii=False, sort_keys=True)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def __eq__(self, other):
        return (
            isinstance(other, Vocabulary)
            and self.tokens == other.tokens
            and self.slots == other.slots
            and self.intents == other.intents
        )


@dataclass
class Batch:
    """A padded batch: position 0 of token_ids is always the sentence marker.

    pad_mask is True at real positions (including position 0); slot_ids hold
    full-vocabulary slot ids, with the slot pad id at padded positions.
    """

    token_ids: torch.Tensor  # [B, 1+T] long
    slot_ids: torch.Tensor  # [B, T] long
    intent_ids: torch.Tensor  # [B] long
    pad_mask: torch.Tensor  # [B, 1+T] bool
    lengths: torch.Tensor  # [B] long

    def __len__(self):
        return self.token_ids.shape[0]


def encode_batch(examples: Sequence[Example], vocab: Vocabulary, max_len: int = 128) -> Batch:
    """Encode examples into one padded batch (sentence marker prepended)."""
    if not examples:
        raise EmptyCorpusError("cannot encode an empty batch")
    for i, ex in enumerate(examples):
        if len(ex) > max_len:
            raise SequenceTooLongError(i, len(ex), max_len)
    longest = max(len(ex) for ex in examples)
    b = len(examples)
    token_ids = torch.full((b, 1 + longest), PAD_ID, dtype=torch.long)
    slot_ids = torch.full((b, longest), SLOT_PAD_ID, dtype=torch.long)
    intent_ids = torch.empty(b, dtype=torch.long)
    pad_mask = torch.zeros((b, 1 + longest), dtype=torch.bool)
    lengths = torch.empty(b, dtype=torch.long)
    for i, ex in enumerate(examples):
        n = len(ex)
        token_ids[i, 0] = CLS_ID
        token_ids[i, 1 : 1 + n] = torch.tensor([vocab.token_id(t) for t in ex.tokens])
        slot_ids[i, :n] = torch.tensor([vocab.slot_id(t) for t in ex.slot_labels])
        intent_ids[i] = vocab.intent_id(ex.intent)
        pad_mask[i, : 1 + n] = True
        lengths[i] = n
    return Batch(token_ids, slot_ids, intent_ids, pad_mask, lengths)


def encode_tokens(
    examples: Sequence[Example], vocab: Vocabulary, max_len: int = 128
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Token-only encoding for inference: (token_ids, pad_mask, lengths).

    Unlike encode_batch this never looks up gold labels, so it works on
    corpora whose tags or intents are absent from the vocabulary.
    """
    if not examples:
        raise EmptyCorpusError("cannot encode an empty batch")
    for i, ex in enumerate(examples):
        if len(ex) > max_len:
            raise SequenceTooLongError(i, len(ex), max_len)
    longest = max(len(ex) for ex in examples)
    b = len(examples)
    token_ids = torch.full((b, 1 + longest), PAD_ID, dtype=torch.long)
    pad_mask = torch.zeros((b, 1 + longest), dtype=torch.bool)
    lengths = torch.empty(b, dtype=torch.long)
    for i, ex in enumerate(examples):
        n = len(ex)
        token_ids[i, 0] = CLS_ID
        token_ids[i, 1 : 1 + n] = torch.tensor([vocab.token_id(t) for t in ex.tokens])
        pad_mask[i, : 1 + n] = True
        lengths[i] = n
    return token_ids, pad_mask, lengths


def decode_example(batch: Batch, index: int, vocab: Vocabulary) -> Example:
    """Reconstruct one example from an encoded batch (lossy only through UNK)."""
    n = int(batch.lengths[index])
    tokens = tuple(vocab.tokens[int(t)] for t in batch.token_ids[index, 1 : 1 + n])
    tags = tuple(vocab.slots[int(t)] for t in batch.slot_ids[index, :n])
    intent = vocab.intent_label(int(batch.intent_ids[index]))
    return Example(tokens, tags, intent)


def iter_epoch_batches(
    examples: Sequence[Example],
    batch_size: int,
    rng: Random,
    bucket_factor: int = 8,
) -> Iterator[list[Example]]:
    """Yield one epoch of batches, length-bucketed within a shuffled order.

    The epoch order is shuffled with `rng`, examples are sorted by length
    inside pools of `batch_size * bucket_factor` to reduce padding, and the
    resulting batch order is shuffled again. Every example appears exactly
    once per epoch.
    """
    order = list(range(len(examples)))
    rng.shuffle(order)
    pool_size = max(1, batch_size * bucket_factor)
    batches = []
    for start in range(0, len(order), pool_size):
        pool = sorted(order[start : start + pool_size], key=lambda i: len(examples[i]))
        for b in range(0, len(pool), batch_size):
            batches.append([examples[i] for i in pool[b : b + batch_size]])
    rng.shuffle(batches)
    yield from batches
