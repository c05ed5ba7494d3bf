"""Documents, synthetic benchmarks, JSONL I/O, TF-IDF span selection and batching."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .rng import Rng

PAD = "<pad>"
UNK = "<unk>"
GRANULARITIES = ("sentence", "token")
TASKS = ("classification", "regression", "distractor")


class DataError(ValueError):
    pass


@dataclass
class Document:
    id: str
    sentences: list[list[str]]
    label: str | float
    query: list[str] | None = None
    gold_mask: list[int] | None = None
    gold_token_mask: list[int] | None = None

    def __post_init__(self):
        if not self.sentences:
            raise DataError(f"document {self.id!r} has no sentences")
        if self.gold_mask is not None and len(self.gold_mask) != len(self.sentences):
            raise DataError(f"document {self.id!r}: gold_mask length {len(self.gold_mask)} "
                            f"!= {len(self.sentences)} sentences")
        if self.gold_token_mask is not None and len(self.gold_token_mask) != self.num_tokens:
            raise DataError(f"document {self.id!r}: gold_token_mask length mismatch")

    @property
    def num_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)

    def token_gold(self) -> list[int] | None:
        """Gold mask over tokens; sentence annotations expand to every token."""
        if self.gold_token_mask is not None:
            return list(self.gold_token_mask)
        if self.gold_mask is None:
            return None
        return [g for g, s in zip(self.gold_mask, self.sentences) for _ in s]

    def to_json(self) -> dict:
        out = {"id": self.id, "sentences": self.sentences, "label": self.label}
        for key in ("query", "gold_mask", "gold_token_mask"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "Document":
        if "label" not in obj:
            raise DataError("missing label")
        if "sentences" not in obj:
            raise DataError("missing sentences")
        return cls(
            id=str(obj.get("id", "")),
            sentences=[[str(t) for t in s] for s in obj["sentences"]],
            label=obj["label"],
            query=None if obj.get("query") is None else [str(t) for t in obj["query"]],
            gold_mask=None if obj.get("gold_mask") is None else [int(v) for v in obj["gold_mask"]],
            gold_token_mask=(None if obj.get("gold_token_mask") is None
                             else [int(v) for v in obj["gold_token_mask"]]),
        )


def save_jsonl(path, docs: Sequence[Document]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def load_jsonl(path) -> list[Document]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    docs = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object")
                docs.append(Document.from_json(obj))
            except (json.JSONDecodeError, DataError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return docs


def class_names(docs: Sequence[Document]) -> list[str]:
    """Sorted class names, so ids are stable across runs and files."""
    return sorted({str(d.label) for d in docs})


# -- vocabulary ---------------------------------------------------------------

class Vocab:
    """Token ids dense from 0 with PAD=0 and UNK=1."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos = [PAD, UNK]
        self.stoi = {PAD: 0, UNK: 1}
        for tok in tokens:
            self.add(tok)

    def add(self, tok: str) -> int:
        if tok not in self.stoi:
            self.stoi[tok] = len(self.itos)
            self.itos.append(tok)
        return self.stoi[tok]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, tok: str) -> int:
        return self.stoi.get(tok, 1)

    @classmethod
    def build(cls, docs: Sequence[Document]) -> "Vocab":
        # first-occurrence order keeps ids reproducible
        vocab = cls()
        for doc in docs:
            for tok in doc.query or ():
                vocab.add(tok)
            for sent in doc.sentences:
                for tok in sent:
                    vocab.add(tok)
        return vocab

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:2] != [PAD, UNK]:
            raise DataError(f"{path}: vocab must start with {PAD} and {UNK}")
        return cls(lines[2:])


# -- synthetic benchmark ------------------------------------------------------

@dataclass
class SynthSpec:
    task: str = "classification"
    n_sentences: int = 10
    sentence_len: int = 8
    signal_fraction: float = 0.2
    vocab_size: int = 200
    num_classes: int = 2
    signal_tokens_per_class: int = 5
    distractor_rate: float = 0.0
    num_train: int = 2000
    num_val: int = 300
    num_test: int = 500
    seed: int = 0

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"unknown synthetic task {self.task!r}; expected one of {TASKS}")
        if not 0.0 < self.signal_fraction < 1.0:
            raise DataError("signal_fraction must be in (0, 1)")
        if not 0.0 <= self.distractor_rate < 1.0:
            raise DataError("distractor_rate must be in [0, 1)")
        if self.n_sentences < 1 or self.sentence_len < 1:
            raise DataError("n_sentences and sentence_len must be positive")
        if self.num_classes < 2:
            raise DataError("num_classes must be >= 2")
        reserved = self._reserved()
        if self.vocab_size < reserved + 2:
            raise DataError(f"vocab_size {self.vocab_size} too small: {reserved} tokens are "
                            f"reserved for signal sets, need at least 2 filler tokens")

    def _reserved(self) -> int:
        if self.task == "regression":
            return 6
        per = self.num_classes * self.signal_tokens_per_class
        return 2 * per if self.task == "distractor" else per

    @property
    def num_signal(self) -> int:
        return min(self.n_sentences, max(1, math.ceil(self.signal_fraction * self.n_sentences - 1e-9)))


def _synth_doc(spec: SynthSpec, rng: Rng, doc_id: str, signal, distract, fillers) -> Document:
    n, L = spec.n_sentences, spec.sentence_len
    sentences = [[fillers[i] for i in rng.integers(len(fillers), L)] for _ in range(n)]
    gold = set(rng.choice(n, spec.num_signal))
    if spec.task == "regression":
        values = []
        for j in sorted(gold):
            v = rng.integers(6)
            values.append(v)
            sentences[j][rng.integers(L)] = f"v{v}"
        label: str | float = float(np.mean(values))
    else:
        cls = rng.integers(spec.num_classes)
        label = f"c{cls}"
        for j in sorted(gold):
            sentences[j][rng.integers(L)] = signal[cls][rng.integers(len(signal[cls]))]
        if spec.task == "distractor":
            for j in range(n):
                if j in gold or rng.uniform() >= spec.distractor_rate:
                    continue
                # correlated with the label, but not decisive
                c = cls if rng.uniform() < 0.75 else rng.integers(spec.num_classes)
                sentences[j][rng.integers(L)] = distract[c][rng.integers(len(distract[c]))]
    return Document(id=doc_id, sentences=sentences, label=label,
                    gold_mask=[int(j in gold) for j in range(n)])


def synth_token_sets(spec: SynthSpec):
    """Signal, distractor and filler token lists for a spec."""
    k = spec.signal_tokens_per_class
    if spec.task == "regression":
        signal = [[f"v{v}" for v in range(6)]]
    else:
        signal = [[f"s{c}_{i}" for i in range(k)] for c in range(spec.num_classes)]
    distract = ([[f"d{c}_{i}" for i in range(k)] for c in range(spec.num_classes)]
                if spec.task == "distractor" else [])
    fillers = [f"w{i}" for i in range(spec.vocab_size - spec._reserved())]
    return signal, distract, fillers


def generate(spec: SynthSpec) -> dict[str, list[Document]]:
    """Train/val/test splits with known gold rationales."""
    spec.validate()
    signal, distract, fillers = synth_token_sets(spec)
    root = Rng(spec.seed, "generate")
    splits = {}
    for name, count in (("train", spec.num_train), ("val", spec.num_val), ("test", spec.num_test)):
        rng = root.split(name)
        splits[name] = [_synth_doc(spec, rng, f"{name}-{i:06d}", signal, distract, fillers)
                        for i in range(count)]
    return splits


# -- TF-IDF span selection ----------------------------------------------------

def _tfidf(tokens: Sequence[str], idf: dict[str, float]) -> dict[str, float]:
    tf = Counter(tokens)
    return {t: c * idf.get(t, 0.0) for t, c in tf.items()}


def _cosine(u: dict[str, float], v: dict[str, float]) -> float:
    dot = sum(w * v.get(t, 0.0) for t, w in u.items())
    nu = math.sqrt(sum(w * w for w in u.values()))
    nv = math.sqrt(sum(w * w for w in v.values()))
    return 0.0 if nu == 0 or nv == 0 else dot / (nu * nv)


def span_scores(document: Document, query: Sequence[str], window: int) -> list[float]:
    """Cosine TF-IDF score for every window start; IDF is log(N / (1 + df)) over sentences."""
    sents = document.sentences
    n = len(sents)
    df = Counter(t for s in sents for t in set(s))
    idf = {t: math.log(n / (1 + c)) for t, c in df.items()}
    qv = _tfidf(query, idf)
    return [_cosine(_tfidf([t for s in sents[i:i + window] for t in s], idf), qv)
            for i in range(n - window + 1)]


def tfidf_span_select(document: Document, query: Sequence[str] | None = None,
                      window_sentences: int = 3) -> tuple[Document, tuple[int, int]]:
    """Crop a document to the contiguous window most similar to the query.

    Returns the cropped document and the ``[start, end)`` sentence range.
    The earliest window wins ties; gold masks are cropped with the span.
    """
    query = document.query if query is None else query
    if query is None:
        raise DataError(f"document {document.id!r} has no query for span selection")
    if window_sentences < 1:
        raise DataError("window must be >= 1")
    n = len(document.sentences)
    if window_sentences >= n:
        return document, (0, n)
    scores = span_scores(document, query, window_sentences)
    start = int(np.argmax(scores))  # first maximum
    end = start + window_sentences
    gold_tok = None
    if document.gold_token_mask is not None:
        offset = sum(len(s) for s in document.sentences[:start])
        width = sum(len(s) for s in document.sentences[start:end])
        gold_tok = document.gold_token_mask[offset:offset + width]
    cropped = Document(
        id=document.id,
        sentences=document.sentences[start:end],
        label=document.label,
        query=document.query,
        gold_mask=None if document.gold_mask is None else document.gold_mask[start:end],
        gold_token_mask=gold_tok,
    )
    return cropped, (start, end)


# -- batching -----------------------------------------------------------------

def doc_units(doc: Document, granularity: str) -> tuple[list[list[str]], list[int] | None]:
    """Maskable units of a document and their gold mask."""
    if granularity == "sentence":
        return doc.sentences, doc.gold_mask
    if granularity == "token":
        return [[t] for s in doc.sentences for t in s], doc.token_gold()
    raise DataError(f"unknown granularity {granularity!r}; expected one of {GRANULARITIES}")


@dataclass
class Batch:
    """Padded arrays for a group of documents.

    ``unit_valid`` marks real units; padded units are excluded from every
    penalty, budget and metric.
    """
    docs: list[Document]
    token_ids: np.ndarray        # (B, U, T) int
    token_valid: np.ndarray      # (B, U, T) float
    first_ids: np.ndarray        # (B, U) int
    last_ids: np.ndarray         # (B, U) int
    unit_valid: np.ndarray       # (B, U) float
    n_units: np.ndarray          # (B,) int
    query_ids: np.ndarray | None  # (B, 1, Tq)
    query_valid: np.ndarray | None
    labels: np.ndarray           # (B,) int class ids or float targets
    gold: np.ndarray             # (B, U) float, zeros where absent
    has_gold: np.ndarray         # (B,) bool
    unit_lengths: list[list[int]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.docs)


def _pad_units(units_per_doc: list[list[list[int]]]):
    B = len(units_per_doc)
    U = max(len(u) for u in units_per_doc)
    T = max(1, max((len(s) for u in units_per_doc for s in u), default=1))
    ids = np.zeros((B, U, T), dtype=np.int64)
    valid = np.zeros((B, U, T))
    for b, units in enumerate(units_per_doc):
        for j, toks in enumerate(units):
            ids[b, j, :len(toks)] = toks
            valid[b, j, :len(toks)] = 1.0
    return ids, valid


@dataclass
class EncodedDoc:
    units: list[list[int]]
    gold: list[int] | None
    query: list[int] | None


def encode_docs(docs: Sequence[Document], vocab: Vocab, granularity: str = "sentence") -> list[EncodedDoc]:
    out = []
    for doc in docs:
        units, gold = doc_units(doc, granularity)
        query = None if doc.query is None else [vocab[t] for t in doc.query]
        out.append(EncodedDoc([[vocab[t] for t in u] for u in units], gold, query))
    return out


def make_batch(docs: Sequence[Document], vocab: Vocab, granularity: str = "sentence",
               classes: Sequence[str] | None = None, hide_gold: set[str] | None = None,
               encoded: Sequence[EncodedDoc] | None = None) -> Batch:
    docs = list(docs)
    encoded = encode_docs(docs, vocab, granularity) if encoded is None else list(encoded)
    units_per_doc = [e.units for e in encoded]
    golds = [None if hide_gold and doc.id in hide_gold else e.gold for doc, e in zip(docs, encoded)]
    lengths = [[len(u) for u in e.units] for e in encoded]
    ids, tvalid = _pad_units(units_per_doc)
    B, U, _ = ids.shape
    unit_valid = np.zeros((B, U))
    n_units = np.array([len(u) for u in units_per_doc], dtype=np.int64)
    for b, n in enumerate(n_units):
        unit_valid[b, :n] = 1.0
    tok_count = tvalid.sum(axis=2).astype(np.int64)
    first_ids = ids[:, :, 0]
    last_ids = np.take_along_axis(ids, np.maximum(tok_count - 1, 0)[:, :, None], axis=2)[:, :, 0]

    query_ids = query_valid = None
    if any(e.query is not None for e in encoded):
        query_ids, query_valid = _pad_units([[e.query or []] for e in encoded])

    if classes is not None:
        index = {c: i for i, c in enumerate(classes)}
        try:
            labels = np.array([index[str(d.label)] for d in docs], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"label {exc.args[0]!r} not among known classes") from None
    else:
        labels = np.array([float(d.label) for d in docs])

    gold = np.zeros((B, U))
    has_gold = np.zeros(B, dtype=bool)
    for b, g in enumerate(golds):
        if g is not None:
            gold[b, :len(g)] = g
            has_gold[b] = True
    return Batch(docs, ids, tvalid, first_ids, last_ids, unit_valid, n_units,
                 query_ids, query_valid, labels, gold, has_gold, lengths)


def iterate_batches(docs: Sequence[Document], batch_size: int, vocab: Vocab,
                    granularity: str = "sentence", classes: Sequence[str] | None = None,
                    rng: Rng | None = None, hide_gold: set[str] | None = None,
                    encoded: Sequence[EncodedDoc] | None = None) -> Iterator[Batch]:
    """Fixed-size batches, shuffled by ``rng`` when given."""
    order = list(range(len(docs)))
    if rng is not None:
        order = rng.shuffle(order)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield make_batch([docs[i] for i in idx], vocab, granularity, classes, hide_gold,
                         None if encoded is None else [encoded[i] for i in idx])


def batch(docs, batch_size, vocab, granularity="sentence", classes=None, rng=None):
    return list(iterate_batches(docs, batch_size, vocab, granularity, classes, rng))
