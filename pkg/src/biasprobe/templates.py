"""Controlled sentence templates: generation, projection scoring against a
gender subspace, and accuracy breakdowns by stereotype alignment, target
gender, and attribute morphology."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from .corpus import CLS_ID, SEP_ID, UNK_ID, TokenizerModel, tokenize, words_of
from .model import Checkpoint, forward_hidden_states_batch
from .subspace import GenderSubspace

# Total reported by the source experiment at full scale; emitted for
# comparison only, never asserted (not derivable from the published lists).
PAPER_SENTENCE_COUNT = 5148

NEUTRAL = "neutral"
FEMALE_SUFFIX = "female_suffix"
PRO, ANTI = "pro", "anti"


@dataclass(frozen=True)
class TargetTerm:
    surface: str  # e.g. "De vrouw"
    gender: str  # "male" | "female"
    kind: str = "phrase"  # "pronoun" | "phrase"

    def __post_init__(self):
        if self.gender not in ("male", "female"):
            raise ValueError(f"gender must be male or female, got {self.gender!r}")


@dataclass(frozen=True)
class AttributeTerm:
    neutral_form: str
    female_form: str
    pct_women: float
    gloss: str = ""

    def __post_init__(self):
        if not 0.0 <= self.pct_women <= 1.0:
            raise ValueError(
                f"pct_women must be a fraction in [0,1], got {self.pct_women} "
                f"for {self.neutral_form!r}")

    @property
    def stereotype(self) -> str:
        """Female iff strictly more than half the workforce is women."""
        return "female" if self.pct_women > 0.5 else "male"


@dataclass(frozen=True)
class TemplateSentence:
    text: str
    target: TargetTerm
    attribute: AttributeTerm
    attribute_form: str  # NEUTRAL | FEMALE_SUFFIX

    def __post_init__(self):
        if self.attribute_form == FEMALE_SUFFIX and self.target.gender == "male":
            raise ValueError(f"ungrammatical combination: {self.text!r}")

    @property
    def alignment(self) -> str:
        return PRO if self.target.gender == self.attribute.stereotype else ANTI

    @property
    def attribute_surface(self) -> str:
        return (self.attribute.female_form if self.attribute_form == FEMALE_SUFFIX
                else self.attribute.neutral_form)


@dataclass(frozen=True)
class EvalRecord:
    sentence: TemplateSentence
    attribute_vector: np.ndarray
    score: float
    score_with_intercept: float
    predicted: str  # "male" | "female"
    correct: bool
    flagged: bool = False  # attribute fully out-of-vocab; excluded from accuracy

    @property
    def alignment(self) -> str:
        return self.sentence.alignment

    @property
    def target_gender(self) -> str:
        return self.sentence.target.gender

    @property
    def attribute_form(self) -> str:
        return self.sentence.attribute_form

    @property
    def target_kind(self) -> str:
        return self.sentence.target.kind


@dataclass(frozen=True)
class EvalRow:
    """Facet view of a persisted evaluation record."""
    alignment: str
    target_gender: str
    attribute_form: str
    correct: bool
    flagged: bool
    target_kind: str = "phrase"


def load_target_lexicon(path: str | Path) -> list[TargetTerm]:
    out = []
    seen = set()
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            surface = row["surface"].strip()
            if surface in seen:
                raise ValueError(f"duplicate target term {surface!r}")
            seen.add(surface)
            out.append(TargetTerm(surface, row["gender"].strip(),
                                  row.get("kind", "phrase").strip()))
    if not out:
        raise ValueError(f"no target terms in {path}")
    return out


def load_attribute_lexicon(path: str | Path) -> list[AttributeTerm]:
    out = []
    seen = set()
    with Path(path).open(encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            neutral = row["neutral"].strip()
            if neutral in seen:
                raise ValueError(f"duplicate attribute term {neutral!r}")
            seen.add(neutral)
            out.append(AttributeTerm(neutral, row["female"].strip(),
                                     float(row["pct_women"]), row.get("gloss", "").strip()))
    if not out:
        raise ValueError(f"no attribute terms in {path}")
    return out


def load_lexicons(target_file: str | Path, attribute_file: str | Path):
    return load_target_lexicon(target_file), load_attribute_lexicon(attribute_file)


def generate_sentences(targets: list[TargetTerm],
                       attributes: list[AttributeTerm]) -> list[TemplateSentence]:
    """All grammatical target/attribute/form combinations of the frame
    '[TARGET] is een [ATTRIBUTE]'."""
    out = []
    for target, attribute in product(targets, attributes):
        forms = [NEUTRAL]
        if target.gender == "female":
            forms.append(FEMALE_SUFFIX)
        for form in forms:
            surface = attribute.female_form if form == FEMALE_SUFFIX else attribute.neutral_form
            text = f"{target.surface} is een {surface}"
            out.append(TemplateSentence(text, target, attribute, form))
    return out


def generation_summary(sentences: list[TemplateSentence]) -> dict:
    """Counts for reporting, with the full-scale reference total alongside."""
    n_suffix = sum(1 for s in sentences if s.attribute_form == FEMALE_SUFFIX)
    return {
        "generated": len(sentences),
        "neutral_form": len(sentences) - n_suffix,
        "female_suffix_form": n_suffix,
        "paper_reference_total": PAPER_SENTENCE_COUNT,
        "difference_vs_reference": len(sentences) - PAPER_SENTENCE_COUNT,
    }


def evaluate(checkpoint: Checkpoint, subspace: GenderSubspace,
             sentences: list[TemplateSentence], tokenizer: TokenizerModel,
             batch_size: int = 32) -> list[EvalRecord]:
    """Score each sentence's attribute embedding by projection onto the gender
    direction; the sign is the gender prediction."""
    if subspace.dim != checkpoint.config.hidden_dim:
        raise ValueError(
            f"subspace dimension {subspace.dim} does not match model "
            f"hidden_dim {checkpoint.config.hidden_dim}")
    tokenized = [tokenize(tokenizer, s.text) for s in sentences]
    seqs = [(CLS_ID,) + tt.token_ids + (SEP_ID,) for tt in tokenized]

    records: list[EvalRecord] = []
    for lo in range(0, len(sentences), batch_size):
        hi = lo + batch_size
        hidden = forward_hidden_states_batch(checkpoint, seqs[lo:hi])
        for s, tt, h in zip(sentences[lo:hi], tokenized[lo:hi], hidden):
            n_attr_words = len(words_of(s.attribute_surface))
            attr_spans = tt.word_spans[-n_attr_words:]
            start, end = attr_spans[0][0], attr_spans[-1][1]
            piece_ids = tt.token_ids[start:end]
            vec = h[1 + start:1 + end].mean(axis=0)
            flagged = all(p == UNK_ID for p in piece_ids)
            score = float(subspace.weights @ vec)
            predicted = "male" if score > 0.0 else "female"
            records.append(EvalRecord(
                sentence=s,
                attribute_vector=vec,
                score=score,
                score_with_intercept=score + subspace.intercept,
                predicted=predicted,
                correct=predicted == s.target.gender,
                flagged=flagged,
            ))
    return records


FACET_LEVELS = {
    "alignment": (PRO, ANTI),
    "target_gender": ("male", "female"),
    "attribute_form": (NEUTRAL, FEMALE_SUFFIX),
    "target_kind": ("pronoun", "phrase"),
}


def _facet_value(record, facet: str) -> str:
    if facet not in FACET_LEVELS:
        raise ValueError(f"unknown facet {facet!r}")
    return getattr(record, facet)


@dataclass(frozen=True)
class BreakdownCell:
    levels: tuple[tuple[str, str], ...]  # ((facet, value), ...)
    n: int
    correct: int

    @property
    def accuracy(self) -> float | None:
        return self.correct / self.n if self.n > 0 else None


@dataclass(frozen=True)
class BreakdownTable:
    facets: tuple[str, ...]
    cells: tuple[BreakdownCell, ...]
    total: int
    excluded: int  # flagged records outside every denominator

    def cell(self, **levels) -> BreakdownCell:
        want = tuple((f, levels[f]) for f in self.facets)
        for c in self.cells:
            if c.levels == want:
                return c
        raise KeyError(f"no cell for {levels}")

    def aggregate(self, **levels) -> BreakdownCell:
        """Exact marginal over any subset of this table's facets."""
        for f in levels:
            if f not in self.facets:
                raise KeyError(f"facet {f!r} not in table")
        n = correct = 0
        for c in self.cells:
            values = dict(c.levels)
            if all(values[f] == v for f, v in levels.items()):
                n += c.n
                correct += c.correct
        return BreakdownCell(tuple(sorted(levels.items())), n, correct)


def accuracy_breakdown(records: list[EvalRecord], facets) -> BreakdownTable:
    """Accuracy per facet-level combination over unflagged records; empty cells
    are kept with n=0 and undefined accuracy."""
    if not records:
        raise ValueError("no records to break down")
    facets = tuple(facets)
    for f in facets:
        if f not in FACET_LEVELS:
            raise ValueError(f"unknown facet {f!r}")
    usable = [r for r in records if not r.flagged]
    counts: dict[tuple, list[int]] = {}
    for combo in product(*(FACET_LEVELS[f] for f in facets)):
        counts[combo] = [0, 0]
    for r in usable:
        combo = tuple(_facet_value(r, f) for f in facets)
        counts[combo][0] += 1
        counts[combo][1] += int(r.correct)
    cells = tuple(
        BreakdownCell(tuple(zip(facets, combo)), n, correct)
        for combo, (n, correct) in counts.items()
    )
    return BreakdownTable(facets, cells, len(usable), len(records) - len(usable))


def save_eval_records(records: list[EvalRecord], path: str | Path) -> None:
    header = ("sentence,target,target_gender,attribute,form,alignment,"
              "score,predicted,correct,flag,score_with_intercept,target_kind")
    lines = [header]
    for r in records:
        s = r.sentence
        lines.append(
            f'"{s.text}","{s.target.surface}",{s.target.gender},'
            f'{s.attribute.neutral_form},{s.attribute_form},{s.alignment},'
            f"{r.score!r},{r.predicted},{int(r.correct)},{int(r.flagged)},"
            f"{r.score_with_intercept!r},{s.target.kind}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_eval_rows(path: str | Path) -> list[EvalRow]:
    with Path(path).open(encoding="utf-8", newline="") as fh:
        return [EvalRow(row["alignment"], row["target_gender"], row["form"],
                        row["correct"] == "1", row["flag"] == "1",
                        row.get("target_kind", "phrase"))
                for row in csv.DictReader(fh)]
