"""Locate anchor-word occurrences in the tokenized corpus and extract
subword-averaged contextual embeddings per checkpoint."""

from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CLS_ID, SEP_ID, Chunk, TokenizedDocument, normalize
from .model import Checkpoint, forward_hidden_states_batch

FEMALE, MALE = 0, 1


@dataclass(frozen=True)
class AnchorLexicon:
    pairs: tuple[tuple[str, str, str], ...]  # (male_word, female_word, gloss)
    exclusions: tuple[str, ...] = ()

    def __post_init__(self):
        males = [normalize(m) for m, _, _ in self.pairs]
        females = [normalize(f) for _, f, _ in self.pairs]
        overlap = set(males) & set(females)
        if overlap:
            raise ValueError(f"words appear with both labels: {sorted(overlap)}")
        banned = {normalize(w) for w in self.exclusions}
        used = set(males) | set(females)
        if banned & used:
            raise ValueError(f"excluded ambiguous forms present in lexicon: {sorted(banned & used)}")

    def labeled_words(self) -> list[tuple[str, int]]:
        out = []
        for male, female, _ in self.pairs:
            out.append((normalize(male), MALE))
            out.append((normalize(female), FEMALE))
        return out


def load_anchor_lexicon(pairs_path: str | Path,
                        exclusions_path: str | Path | None = None) -> AnchorLexicon:
    pairs = []
    with Path(pairs_path).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            pairs.append((row["male"].strip(), row["female"].strip(), row.get("gloss", "").strip()))
    exclusions: tuple[str, ...] = ()
    if exclusions_path is not None:
        with Path(exclusions_path).open(encoding="utf-8", newline="") as fh:
            reader = csv.DictReader(fh)
            exclusions = tuple(row["word"].strip() for row in reader)
    return AnchorLexicon(tuple(pairs), exclusions)


@dataclass(frozen=True)
class Occurrence:
    doc_id: str
    word_index: int
    token_start: int
    token_end: int


@dataclass(frozen=True)
class LabeledEmbedding:
    vector: np.ndarray
    label: int  # 0 = female, 1 = male
    group: str  # source lexicon word
    checkpoint: int
    occurrence_id: tuple[str, int]  # (doc_id, word_index)


class CorpusIndex:
    """Tokenized documents plus their chunks, supporting whole-word lookup."""

    def __init__(self, docs: list[TokenizedDocument], chunks_by_doc: dict[str, list[Chunk]]):
        self.docs = {d.doc_id: d for d in docs}
        if len(self.docs) != len(docs):
            raise ValueError("duplicate document ids")
        self.chunks_by_doc = chunks_by_doc
        self._word_index: dict[str, list[tuple[str, int]]] = {}
        for d in docs:
            for i, w in enumerate(d.words):
                self._word_index.setdefault(w, []).append((d.doc_id, i))

    def occurrences(self, word: str) -> list[Occurrence]:
        out = []
        for doc_id, i in self._word_index.get(normalize(word), []):
            start, end = self.docs[doc_id].word_spans[i]
            out.append(Occurrence(doc_id, i, start, end))
        return out


def find_occurrences(index: CorpusIndex, word: str) -> list[Occurrence]:
    """All whole-word, case-insensitive occurrences of `word` in the corpus."""
    return index.occurrences(word)


def choose_chunk(chunks: list[Chunk], token_start: int, token_end: int) -> Chunk | None:
    """The chunk containing the span with the span closest to its center;
    avoids double-counting occurrences that fall in stride overlaps."""
    best = None
    span_mid = 0.5 * (token_start + token_end - 1)
    for c in chunks:
        if c.start_offset <= token_start and token_end <= c.start_offset + len(c):
            chunk_mid = c.start_offset + 0.5 * (len(c) - 1)
            key = (abs(span_mid - chunk_mid), c.start_offset)
            if best is None or key < best[0]:
                best = (key, c)
    return None if best is None else best[1]


def extract_embedding(checkpoint: Checkpoint, chunk: Chunk,
                      word_span: tuple[int, int]) -> np.ndarray:
    """Mean of final-layer hidden states over the span (chunk-local indices)."""
    start, end = word_span
    if not (0 <= start < end <= len(chunk)):
        raise ValueError(f"span {word_span} out of range for chunk of length {len(chunk)}")
    seq = (CLS_ID,) + tuple(chunk.token_ids) + (SEP_ID,)
    hidden = forward_hidden_states_batch(checkpoint, [seq])[0]
    return hidden[1 + start:1 + end].mean(axis=0)


def _word_rng(seed: int, word: str) -> np.random.Generator:
    digest = hashlib.sha256(word.encode("utf-8")).digest()
    return np.random.default_rng([seed, int.from_bytes(digest[:8], "little")])


def build_dataset(checkpoint: Checkpoint, index: CorpusIndex, lexicon: AnchorLexicon,
                  cap: int = 200, seed: int = 0, batch_size: int = 16) -> list[LabeledEmbedding]:
    """Per lexicon word, sample up to `cap` occurrences uniformly without
    replacement and extract their contextual embeddings in chunk batches."""
    chosen: list[tuple[str, int, Occurrence, Chunk]] = []
    for word, label in lexicon.labeled_words():
        occs = find_occurrences(index, word)
        placed = []
        for occ in occs:
            c = choose_chunk(index.chunks_by_doc.get(occ.doc_id, []), occ.token_start, occ.token_end)
            if c is not None:
                placed.append((occ, c))
        if not placed:
            warnings.warn(f"anchor word {word!r} has zero usable occurrences", stacklevel=2)
            continue
        if len(placed) > cap:
            rng = _word_rng(seed, word)
            keep = sorted(rng.choice(len(placed), size=cap, replace=False).tolist())
            placed = [placed[i] for i in keep]
        for occ, c in placed:
            chosen.append((word, label, occ, c))

    # forward each distinct chunk once
    unique_chunks: dict[tuple[str, int], Chunk] = {}
    for _, _, _, c in chosen:
        unique_chunks.setdefault((c.doc_id, c.start_offset), c)
    keys = list(unique_chunks)
    hidden: dict[tuple[str, int], np.ndarray] = {}
    for lo in range(0, len(keys), batch_size):
        block = keys[lo:lo + batch_size]
        seqs = [(CLS_ID,) + tuple(unique_chunks[k].token_ids) + (SEP_ID,) for k in block]
        outs = forward_hidden_states_batch(checkpoint, seqs)
        for k, h in zip(block, outs):
            hidden[k] = h

    dataset = []
    for word, label, occ, c in chosen:
        h = hidden[(c.doc_id, c.start_offset)]
        local = occ.token_start - c.start_offset
        vec = h[1 + local:1 + local + (occ.token_end - occ.token_start)].mean(axis=0)
        dataset.append(LabeledEmbedding(vec, label, word, checkpoint.epoch,
                                        (occ.doc_id, occ.word_index)))
    return dataset


def save_corpus_index(index: CorpusIndex, path: str | Path) -> None:
    payload = {"documents": [], "chunks": []}
    for doc in index.docs.values():
        payload["documents"].append({
            "doc_id": doc.doc_id,
            "token_ids": list(doc.token_ids),
            "words": list(doc.words),
            "word_spans": [list(s) for s in doc.word_spans],
        })
    for doc_id, chunks in index.chunks_by_doc.items():
        for c in chunks:
            payload["chunks"].append({"doc_id": doc_id, "start_offset": c.start_offset,
                                      "length": len(c)})
    Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")


def load_corpus_index(path: str | Path) -> CorpusIndex:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    docs = [TokenizedDocument(d["doc_id"], tuple(d["token_ids"]), tuple(d["words"]),
                              tuple(tuple(s) for s in d["word_spans"]))
            for d in payload["documents"]]
    by_id = {d.doc_id: d for d in docs}
    chunks_by_doc: dict[str, list[Chunk]] = {d.doc_id: [] for d in docs}
    for entry in payload["chunks"]:
        doc = by_id[entry["doc_id"]]
        start = entry["start_offset"]
        ids = doc.token_ids[start:start + entry["length"]]
        chunks_by_doc[entry["doc_id"]].append(Chunk(ids, entry["doc_id"], start))
    return CorpusIndex(docs, chunks_by_doc)


def save_dataset(dataset: list[LabeledEmbedding], path: str | Path) -> None:
    """One record per row; vector components in exact-round-trip decimal form."""
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        for rec in dataset:
            comps = ",".join(repr(float(v)) for v in rec.vector)
            fh.write(f"{rec.checkpoint},{rec.group},{rec.label},"
                     f"{rec.occurrence_id[0]},{rec.occurrence_id[1]},{comps}\n")


def load_dataset(path: str | Path) -> list[LabeledEmbedding]:
    out = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        parts = line.split(",")
        epoch, group, label, doc_id, word_index = parts[:5]
        vec = np.array([float(x) for x in parts[5:]], dtype=np.float64)
        out.append(LabeledEmbedding(vec, int(label), group, int(epoch),
                                    (doc_id, int(word_index))))
    return out
