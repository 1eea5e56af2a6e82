"""Corpus preparation: vocabulary construction, tokenization, chunking and
document-disjoint splits, plus synthetic corpora with controlled gender
statistics for small-scale verification runs."""

from __future__ import annotations

import re
import unicodedata
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"

_WORD_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class Document:
    id: str
    text: str

    def __post_init__(self):
        if not self.text:
            raise ValueError(f"document {self.id!r} has empty text")


def normalize(text: str) -> str:
    """NFC-normalize and lowercase; applied before any vocabulary or matching step."""
    return unicodedata.normalize("NFC", text).lower()


def split_sentences(text: str) -> list[str]:
    """Split on sentence-final punctuation followed by whitespace and a capital."""
    out = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        if text[i] in ".!?":
            j = i + 1
            while j < n and text[j].isspace():
                j += 1
            if j > i + 1 and j < n and text[j].isupper():
                out.append(text[start:i + 1])
                start = j
                i = j
                continue
        i += 1
    tail = text[start:].strip()
    if tail:
        out.append(tail)
    return out


def words_of(text: str) -> list[str]:
    """Word-level tokens of normalized text; punctuation marks are single words."""
    out = []
    for sent in split_sentences(text):
        out.extend(_WORD_RE.findall(normalize(sent)))
    return out


class TokenizerModel:
    """Greedy longest-match subword tokenizer.

    Vocabulary = five special tokens, a character fallback alphabet (each
    retained character in initial and ##-continuation form), and the most
    frequent whole words. Ids are assigned in that order and are stable for
    a given corpus and parameters.
    """

    def __init__(self, tokens: list[str], max_vocab: int = 30000,
                 min_freq: int = 3, charset_limit: int = 1000):
        if tokens[:5] != list(SPECIAL_TOKENS):
            raise ValueError("first five tokens must be PAD, UNK, CLS, SEP, MASK")
        if len(tokens) > max_vocab:
            raise ValueError(f"vocabulary size {len(tokens)} exceeds max_vocab {max_vocab}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.vocab: dict[str, int] = {tok: i for i, tok in enumerate(tokens)}
        self.id_to_token: list[str] = list(tokens)
        self.special_tokens = SPECIAL_TOKENS
        self.max_vocab = max_vocab
        self.min_freq = min_freq
        self.charset_limit = charset_limit
        self._max_piece_len = max((len(t) for t in tokens), default=1)

    def __len__(self) -> int:
        return len(self.id_to_token)

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def encode_word(self, word: str) -> list[int]:
        """Token ids for one normalized word; [UNK] if it cannot be covered."""
        hit = self.vocab.get(word)
        if hit is not None:
            return [hit]
        ids = []
        pos = 0
        n = len(word)
        while pos < n:
            prefix = "" if pos == 0 else CONTINUATION
            match = None
            limit = min(n - pos, self._max_piece_len)
            for length in range(limit, 0, -1):
                cand = prefix + word[pos:pos + length]
                tid = self.vocab.get(cand)
                if tid is not None:
                    match = (tid, length)
                    break
            if match is None:
                return [UNK_ID]
            ids.append(match[0])
            pos += match[1]
        return ids

    def decode_word(self, ids: list[int]) -> str:
        """Inverse of encode_word for fully covered words."""
        parts = []
        for tid in ids:
            tok = self.id_to_token[tid]
            parts.append(tok[len(CONTINUATION):] if tok.startswith(CONTINUATION) and len(tok) > 2 else tok)
        return "".join(parts)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.id_to_token) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, max_vocab: int = 30000,
             min_freq: int = 3, charset_limit: int = 1000) -> "TokenizerModel":
        tokens = Path(path).read_text(encoding="utf-8").split("\n")
        if tokens and tokens[-1] == "":
            tokens.pop()
        return cls(tokens, max_vocab=max_vocab, min_freq=min_freq, charset_limit=charset_limit)


def build_vocab(documents: list[Document], max_vocab: int = 30000,
                min_freq: int = 3, charset_limit: int = 1000) -> TokenizerModel:
    """Count whole words, retain a frequency-capped character alphabet plus the
    most frequent words above min_freq, and return the tokenizer."""
    if not documents:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    word_counts: Counter[str] = Counter()
    for doc in documents:
        word_counts.update(words_of(doc.text))
    if not word_counts:
        raise ValueError("corpus contains no tokens")

    char_counts: Counter[str] = Counter()
    for word, cnt in word_counts.items():
        for ch in word:
            char_counts[ch] += cnt

    chars = sorted((c for c, n in char_counts.items() if n >= min_freq),
                   key=lambda c: (-char_counts[c], c))
    if len(chars) > charset_limit:
        chars = chars[:charset_limit]  # drop least-frequent characters, never crash
    # each character needs an initial and a continuation form
    while len(SPECIAL_TOKENS) + 2 * len(chars) > max_vocab and chars:
        chars.pop()

    tokens = list(SPECIAL_TOKENS)
    for ch in chars:
        tokens.append(ch)
        tokens.append(CONTINUATION + ch)
    seen = set(tokens)

    budget = max_vocab - len(tokens)
    candidates = sorted((w for w, n in word_counts.items() if n >= min_freq and w not in seen),
                        key=lambda w: (-word_counts[w], w))
    for w in candidates[:budget]:
        tokens.append(w)
    return TokenizerModel(tokens, max_vocab=max_vocab, min_freq=min_freq,
                          charset_limit=charset_limit)


@dataclass(frozen=True)
class TokenizedText:
    token_ids: tuple[int, ...]
    words: tuple[str, ...]
    word_spans: tuple[tuple[int, int], ...]  # word -> [start, end) piece range


@dataclass(frozen=True)
class TokenizedDocument:
    doc_id: str
    token_ids: tuple[int, ...]
    words: tuple[str, ...]
    word_spans: tuple[tuple[int, int], ...]


def tokenize(tokenizer: TokenizerModel, text: str) -> TokenizedText:
    """Token ids plus a total word-to-piece alignment map."""
    words = words_of(text)
    ids: list[int] = []
    spans: list[tuple[int, int]] = []
    for w in words:
        piece_ids = tokenizer.encode_word(w)
        spans.append((len(ids), len(ids) + len(piece_ids)))
        ids.extend(piece_ids)
    return TokenizedText(tuple(ids), tuple(words), tuple(spans))


def tokenize_document(tokenizer: TokenizerModel, doc: Document) -> TokenizedDocument:
    tt = tokenize(tokenizer, doc.text)
    return TokenizedDocument(doc.id, tt.token_ids, tt.words, tt.word_spans)


@dataclass(frozen=True)
class Chunk:
    token_ids: tuple[int, ...]
    doc_id: str
    start_offset: int

    def __len__(self) -> int:
        return len(self.token_ids)


def chunk(doc: TokenizedDocument, max_len: int = 512, stride: int = 384) -> list[Chunk]:
    """Overlapping windows of at most max_len tokens stepping by max_len - stride."""
    if not 0 <= stride < max_len:
        raise ValueError(f"stride must satisfy 0 <= stride < max_len, got {stride} >= {max_len}")
    ids = doc.token_ids
    n = len(ids)
    if n == 0:
        return []
    step = max_len - stride
    chunks = []
    start = 0
    while True:
        end = min(start + max_len, n)
        chunks.append(Chunk(ids[start:end], doc.doc_id, start))
        if end >= n:
            break
        start += step
    return chunks


@dataclass
class CorpusSplit:
    train: list[Chunk]
    validation: list[Chunk]
    test: list[Chunk]
    proportions: tuple[float, float, float]
    assignment: dict[str, str] = field(default_factory=dict)
    tolerance_exceeded: bool = False

    PART_NAMES = ("train", "validation", "test")

    def partition(self, name: str) -> list[Chunk]:
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]

    def token_shares(self) -> tuple[float, float, float]:
        sizes = [sum(len(c) for c in part) for part in (self.train, self.validation, self.test)]
        total = sum(sizes)
        if total == 0:
            return (0.0, 0.0, 0.0)
        return tuple(s / total for s in sizes)


def split(chunks: list[Chunk], proportions: tuple[float, float, float] = (0.8, 0.1, 0.1),
          seed: int = 0, tolerance: float = 0.02) -> CorpusSplit:
    """Assign whole documents greedily (largest first, to the partition furthest
    below its token target); documents are never divided across partitions."""
    if len(proportions) != 3:
        raise ValueError("proportions must have three entries (train, validation, test)")
    if abs(sum(proportions) - 1.0) > 1e-9:
        raise ValueError(f"proportions must sum to 1, got {sum(proportions)}")

    by_doc: dict[str, list[Chunk]] = {}
    for c in chunks:
        by_doc.setdefault(c.doc_id, []).append(c)
    doc_ids = list(by_doc)
    sizes = {d: sum(len(c) for c in by_doc[d]) for d in doc_ids}
    total = sum(sizes.values())

    rng = np.random.default_rng(seed)
    order = [doc_ids[i] for i in rng.permutation(len(doc_ids))]
    order.sort(key=lambda d: -sizes[d])  # stable: equal sizes stay shuffled

    targets = [p * total for p in proportions]
    assigned = [0, 0, 0]
    assignment: dict[str, str] = {}
    for d in order:
        deficits = [targets[k] - assigned[k] for k in range(3)]
        k = max(range(3), key=lambda i: deficits[i])
        assignment[d] = CorpusSplit.PART_NAMES[k]
        assigned[k] += sizes[d]

    parts: dict[str, list[Chunk]] = {name: [] for name in CorpusSplit.PART_NAMES}
    for c in chunks:
        parts[assignment[c.doc_id]].append(c)

    result = CorpusSplit(parts["train"], parts["validation"], parts["test"],
                         tuple(proportions), assignment)
    shares = result.token_shares()
    if any(abs(s - p) > tolerance for s, p in zip(shares, proportions)):
        result.tolerance_exceeded = True
        warnings.warn(
            f"split token shares {tuple(round(s, 3) for s in shares)} deviate more than "
            f"{tolerance:.0%} from targets {proportions}; document-disjointness forced this",
            stacklevel=2,
        )
    return result


def save_split_manifest(s: CorpusSplit, path: str | Path) -> None:
    lines = ["doc_id,partition"]
    for doc_id in sorted(s.assignment):
        lines.append(f"{doc_id},{s.assignment[doc_id]}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_split_manifest(path: str | Path) -> dict[str, str]:
    lines = Path(path).read_text(encoding="utf-8").strip().split("\n")
    if lines[0] != "doc_id,partition":
        raise ValueError(f"unexpected split manifest header: {lines[0]!r}")
    out = {}
    for line in lines[1:]:
        doc_id, part = line.rsplit(",", 1)
        if part not in CorpusSplit.PART_NAMES:
            raise ValueError(f"unknown partition {part!r} for document {doc_id!r}")
        out[doc_id] = part
    return out


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    """Generator settings for a corpus with controlled gender statistics.

    professions maps each profession word to its male-co-occurrence
    probability: the chance that a sentence containing it uses a male anchor.
    When the anchor is female, the profession surface takes female_suffix
    with probability suffix_probability.
    """
    male_words: tuple[str, ...]
    female_words: tuple[str, ...]
    professions: tuple[tuple[str, float], ...]
    num_sentences: int
    seed: int
    num_documents: int = 20
    female_suffix: str = "ster"
    suffix_probability: float = 0.0
    profession_fraction: float = 0.45
    context_fraction: float = 0.45

    def __post_init__(self):
        for name, p in self.professions:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"male co-occurrence probability for {name!r} must be in [0,1], got {p}")
        if not 0.0 <= self.suffix_probability <= 1.0:
            raise ValueError("suffix_probability must be in [0,1]")
        if self.profession_fraction + self.context_fraction > 1.0 + 1e-9:
            raise ValueError("profession_fraction + context_fraction must be at most 1")
        if not self.male_words or not self.female_words:
            raise ValueError("need at least one anchor word per gender")
        if self.num_sentences <= 0 or self.num_documents <= 0:
            raise ValueError("num_sentences and num_documents must be positive")


_MALE_FRAMES = (
    "de {a} zei dat hij morgen komt.",
    "de {a} en zijn hond lopen buiten.",
    "iedereen zag dat de {a} zijn werk deed.",
    "de {a} dacht dat hij gelijk had.",
)
_FEMALE_FRAMES = (
    "de {a} zei dat ze morgen komt.",
    "de {a} en d'r hond lopen buiten.",
    "iedereen zag dat de {a} d'r werk deed.",
    "de {a} dacht dat ze gelijk had.",
)
_PROFESSION_FRAMES = (
    "de {a} is een {p}.",
    "de {a} werkt als {p}.",
)
_FILLERS = (
    "het weer is vandaag erg mooi.",
    "de trein vertrekt om acht uur.",
    "er staat een oude boom in het park.",
    "morgen gaan we naar de markt.",
    "het boek ligt op de tafel.",
    "de stad is druk in de zomer.",
)


def generate_synthetic(spec: SyntheticCorpusSpec) -> list[Document]:
    """Deterministic synthetic corpus realizing the spec's co-occurrence model."""
    rng = np.random.default_rng(spec.seed)
    prof_names = [name for name, _ in spec.professions]
    prof_p = {name: p for name, p in spec.professions}
    sentences = []
    for _ in range(spec.num_sentences):
        u = rng.random()
        if u < spec.profession_fraction and prof_names:
            prof = prof_names[rng.integers(len(prof_names))]
            male = rng.random() < prof_p[prof]
            if male:
                anchor = spec.male_words[rng.integers(len(spec.male_words))]
                surface = prof
            else:
                anchor = spec.female_words[rng.integers(len(spec.female_words))]
                suffixed = rng.random() < spec.suffix_probability
                surface = prof + spec.female_suffix if suffixed else prof
            frame = _PROFESSION_FRAMES[rng.integers(len(_PROFESSION_FRAMES))]
            sentences.append(frame.format(a=anchor, p=surface))
        elif u < spec.profession_fraction + spec.context_fraction:
            male = rng.random() < 0.5
            if male:
                anchor = spec.male_words[rng.integers(len(spec.male_words))]
                frame = _MALE_FRAMES[rng.integers(len(_MALE_FRAMES))]
            else:
                anchor = spec.female_words[rng.integers(len(spec.female_words))]
                frame = _FEMALE_FRAMES[rng.integers(len(_FEMALE_FRAMES))]
            sentences.append(frame.format(a=anchor))
        else:
            sentences.append(_FILLERS[rng.integers(len(_FILLERS))])

    per_doc = max(1, len(sentences) // spec.num_documents)
    docs = []
    width = len(str(spec.num_documents - 1))
    for k in range(spec.num_documents):
        lo = k * per_doc
        hi = len(sentences) if k == spec.num_documents - 1 else (k + 1) * per_doc
        if lo >= len(sentences):
            break
        body = " ".join(s.capitalize() for s in sentences[lo:hi])
        docs.append(Document(f"synth-{k:0{width}d}", body))
    return docs


def read_corpus_dir(path: str | Path) -> list[Document]:
    """One UTF-8 text file per document; the filename (sans suffix) is the id."""
    root = Path(path)
    docs = []
    for f in sorted(root.iterdir()):
        if f.is_file():
            text = f.read_text(encoding="utf-8")
            if text.strip():
                docs.append(Document(f.stem, text))
    if not docs:
        raise ValueError(f"no non-empty documents found under {root}")
    return docs
