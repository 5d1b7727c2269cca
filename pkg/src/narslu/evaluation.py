"""Metrics and uncoordinated-slot error analysis.

Slot F1 is chunk-level and micro-averaged over the corpus, with IOB2 chunks
read the way the standard CoNLL scorer reads them: B-x opens a chunk, I-x
continues a chunk of the same type, and an orphan I-x (after O, the sequence
start, or a different type) opens a new chunk. A predicted chunk counts as
correct only when its type, start, and end all match a gold chunk.

A position is "uncoordinated" when it carries I-x but its predecessor is
neither B-x nor I-x: the signature failure of predicting all tags
independently in one parallel pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .errors import LengthMismatchError, MalformedTagError


def parse_tag(tag: str) -> tuple[str, str]:
    """Split a tag into ("O"|"B"|"I", type); type is "" for O."""
    if tag == "O":
        return "O", ""
    if len(tag) > 2 and tag[1] == "-" and tag[0] in "BI":
        return tag[0], tag[2:]
    raise MalformedTagError(tag)


@dataclass(frozen=True, order=True)
class ChunkSpan:
    """A maximal slot chunk: token span [start, end] (inclusive) of one type."""

    slot_type: str
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start <= self.end):
            raise ValueError(f"invalid span ({self.start}, {self.end})")
        if not self.slot_type:
            raise ValueError("empty slot type")


def extract_chunks(tags: Sequence[str]) -> list[ChunkSpan]:
    """Extract IOB2 chunks from one tag sequence."""
    chunks: list[ChunkSpan] = []
    open_type = None
    start = 0
    for j, tag in enumerate(tags):
        kind, typ = parse_tag(tag)
        if kind == "I" and open_type == typ:
            continue
        if open_type is not None:
            chunks.append(ChunkSpan(open_type, start, j - 1))
            open_type = None
        if kind != "O":  # B-x, or an orphan I-x opening a chunk
            open_type = typ
            start = j
    if open_type is not None:
        chunks.append(ChunkSpan(open_type, start, len(tags) - 1))
    return chunks


def chunks_to_tags(chunks: Sequence[ChunkSpan], length: int) -> list[str]:
    """Rebuild a canonical IOB2 tag sequence from disjoint chunks."""
    tags = ["O"] * length
    for c in chunks:
        if c.end >= length:
            raise ValueError(f"chunk {c} exceeds length {length}")
        tags[c.start] = f"B-{c.slot_type}"
        for j in range(c.start + 1, c.end + 1):
            tags[j] = f"I-{c.slot_type}"
    return tags


def _check_aligned(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]]) -> None:
    if len(pred) != len(gold):
        raise LengthMismatchError(
            f"{len(pred)} predicted utterances vs {len(gold)} gold"
        )
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise LengthMismatchError(
                f"utterance {i}: {len(p)} predicted tags vs {len(g)} gold", line=i
            )


def slot_f1(
    pred_tags: Sequence[Sequence[str]], gold_tags: Sequence[Sequence[str]]
) -> tuple[float, float, float]:
    """Micro-averaged chunk precision, recall, and F1 over a corpus."""
    _check_aligned(pred_tags, gold_tags)
    n_pred = n_gold = n_match = 0
    for p, g in zip(pred_tags, gold_tags):
        pc = set(extract_chunks(p))
        gc = set(extract_chunks(g))
        n_pred += len(pc)
        n_gold += len(gc)
        n_match += len(pc & gc)
    precision = n_match / n_pred if n_pred else 0.0
    recall = n_match / n_gold if n_gold else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def intent_accuracy(pred_intents: Sequence[str], gold_intents: Sequence[str]) -> float:
    if len(pred_intents) != len(gold_intents):
        raise LengthMismatchError(
            f"{len(pred_intents)} predicted intents vs {len(gold_intents)} gold"
        )
    if not gold_intents:
        return 0.0
    hits = sum(p == g for p, g in zip(pred_intents, gold_intents))
    return hits / len(gold_intents)


def overall_accuracy(
    pred_intents: Sequence[str],
    pred_tags: Sequence[Sequence[str]],
    gold_intents: Sequence[str],
    gold_tags: Sequence[Sequence[str]],
) -> float:
    """Fraction of utterances with the intent and every slot tag correct."""
    if len(pred_intents) != len(gold_intents) or len(pred_intents) != len(pred_tags):
        raise LengthMismatchError("intent/tag corpora are not aligned")
    _check_aligned(pred_tags, gold_tags)
    if not gold_intents:
        return 0.0
    hits = sum(
        pi == gi and tuple(pt) == tuple(gt)
        for pi, gi, pt, gt in zip(pred_intents, gold_intents, pred_tags, gold_tags)
    )
    return hits / len(gold_intents)


def find_uncoordinated(tags: Sequence[str]) -> list[int]:
    """Positions j where tags[j] = I-x and tags[j-1] is not B-x / I-x."""
    parsed = [parse_tag(t) for t in tags]
    out = []
    for j, (kind, typ) in enumerate(parsed):
        if kind != "I":
            continue
        if j == 0 or parsed[j - 1][1] != typ or parsed[j - 1][0] == "O":
            out.append(j)
    return out


@dataclass(frozen=True)
class UncoordinatedCase:
    """One uncoordinated position with the tag pair on both sides."""

    utterance: int
    position: int
    kind: str  # "BI" | "IB" | "other"
    pred_prev: str | None
    pred_cur: str
    gold_prev: str | None
    gold_cur: str

    def to_dict(self) -> dict:
        return {
            "utterance": self.utterance,
            "position": self.position,
            "kind": self.kind,
            "pred": [self.pred_prev, self.pred_cur],
            "gold": [self.gold_prev, self.gold_cur],
        }


@dataclass
class ErrorReport:
    """Token-level slot errors and the uncoordinated breakdown.

    BI: the predecessor tag is correct and the uncoordinated I-tag is wrong.
    IB: the uncoordinated I-tag is correct and its predecessor is wrong.
    Everything else (including position 0) lands in other_unc, so the three
    buckets always partition the uncoordinated set.
    """

    slot_errors: int = 0
    uncoordinated: int = 0
    bi_errors: int = 0
    ib_errors: int = 0
    other_unc: int = 0
    cases: list[UncoordinatedCase] = field(default_factory=list)

    def to_dict(self, with_cases: bool = True) -> dict:
        out = {
            "slot_errors": self.slot_errors,
            "uncoordinated": self.uncoordinated,
            "bi_errors": self.bi_errors,
            "ib_errors": self.ib_errors,
            "other_unc": self.other_unc,
        }
        if with_cases:
            out["cases"] = [c.to_dict() for c in self.cases]
        return out


def classify_unc_errors(
    pred_tags: Sequence[Sequence[str]], gold_tags: Sequence[Sequence[str]]
) -> ErrorReport:
    """Bucket every uncoordinated predicted position against the gold tags."""
    _check_aligned(pred_tags, gold_tags)
    report = ErrorReport()
    for u, (pred, gold) in enumerate(zip(pred_tags, gold_tags)):
        report.slot_errors += sum(p != g for p, g in zip(pred, gold))
        for j in find_uncoordinated(pred):
            if j == 0:
                kind = "other"
            else:
                prev_ok = pred[j - 1] == gold[j - 1]
                cur_ok = pred[j] == gold[j]
                if prev_ok and not cur_ok:
                    kind = "BI"
                elif cur_ok and not prev_ok:
                    kind = "IB"
                else:
                    kind = "other"
            report.uncoordinated += 1
            if kind == "BI":
                report.bi_errors += 1
            elif kind == "IB":
                report.ib_errors += 1
            else:
                report.other_unc += 1
            report.cases.append(
                UncoordinatedCase(
                    utterance=u,
                    position=j,
                    kind=kind,
                    pred_prev=pred[j - 1] if j else None,
                    pred_cur=pred[j],
                    gold_prev=gold[j - 1] if j else None,
                    gold_cur=gold[j],
                )
            )
    return report
