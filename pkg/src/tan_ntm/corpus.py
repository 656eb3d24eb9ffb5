"""Corpus preprocessing: pruning, vocabulary construction and dual encoding.

Documents are pruned into lemmatized lowercase tokens, a vocabulary is built
from the (sampled) training split, and every document is encoded both as a
token-index sequence (for the recurrent encoder) and as a bag-of-words count
vector (the reconstruction target).  Index 0 is reserved for padding.
"""

from __future__ import annotations

import csv
import hashlib
import importlib.metadata
import json
import logging
import os
import pickle
import platform
import re
import string
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD_INDEX = 0
PAD_TOKEN = "<pad>"
SAMPLER = "numpy.random.default_rng(seed).permutation(n)[:tr_size]"
LEMMATIZER = "lemminflect.getLemma(upos=NOUN, lemmatize_oov=False)"
STOPWORD_LIST = "gensim.parsing.preprocessing.STOPWORDS"

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)
_CONTROL = re.compile(r"\\\\[tnr]|\\[tnr]|[\n\t\r]")
_DIGITS = re.compile(r"[0-9]+")

DATASET_DEFAULTS = {
    "20ng": {"max_seq_len": 200},
    "agnews": {"tr_size": 96000, "num_below": 3, "fr_abv": 0.7, "max_vocab": None, "max_seq_len": 50},
    "yrp": {"tr_size": 448000, "num_below": 20, "fr_abv": 0.7, "max_vocab": 20000, "max_seq_len": 200},
}


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class PreprocessConfig:
    tr_size: int
    num_below: int = 1
    fr_abv: float = 1.0
    max_vocab: Optional[int] = None
    min_token_len: int = 3
    max_token_len: int = 15
    seed: int = 0

    def __post_init__(self):
        if self.tr_size <= 0:
            raise CorpusError(f"tr_size must be positive, got {self.tr_size}")
        if not 0 < self.fr_abv <= 1:
            raise CorpusError(f"fr_abv must lie in (0, 1], got {self.fr_abv}")
        if self.min_token_len > self.max_token_len:
            raise CorpusError("min_token_len exceeds max_token_len")
        if self.max_vocab is not None and self.max_vocab <= 0:
            raise CorpusError("max_vocab must be positive when given")


# --------------------------------------------------------------------------
# pruning


def _stopwords() -> frozenset:
    from gensim.parsing.preprocessing import STOPWORDS

    return frozenset(STOPWORDS)


_lemma_cache: dict = {}


def lemmatize(token: str) -> str:
    """Noun lemma of ``token``; tokens unknown to the lexicon come back unchanged."""
    lemma = _lemma_cache.get(token)
    if lemma is None:
        from lemminflect import getLemma

        found = getLemma(token, upos="NOUN", lemmatize_oov=False) if token else ()
        lemma = found[0] if found else token
        _lemma_cache[token] = lemma
    return lemma


def _lemmatize_wrapped(token: str) -> str:
    # punctuation attached to either end would hide the word from the lexicon
    core = token.strip(string.punctuation)
    if not core:
        return token
    start = token.index(core)
    return token[:start] + lemmatize(core) + token[start + len(core):]


def _is_numeric(token: str) -> bool:
    bare = token.translate(_PUNCT_TABLE)
    return bool(bare) and _DIGITS.fullmatch(bare) is not None


def prune_doc(doc: str) -> list[str]:
    """Prune raw text into a list of tokens.

    Steps, in order: strip control characters (real and backslash-escaped),
    drop fully numeric tokens, lowercase, lemmatize, delete the 32 ASCII
    punctuation characters, drop tokens containing non-ASCII characters.
    Partially numeric tokens such as ``G47`` survive.
    """
    tokens = _CONTROL.sub(" ", doc).split()
    tokens = [t for t in tokens if not _is_numeric(t)]
    tokens = [t.lower() for t in tokens]
    tokens = [_lemmatize_wrapped(t) for t in tokens]
    tokens = [t.translate(_PUNCT_TABLE) for t in tokens]
    return [t for t in tokens if t and t.isascii()]


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    token_to_index: dict[str, int]
    counts: dict[str, int]
    pad_index: int = PAD_INDEX

    def __post_init__(self):
        self.index_to_token = [PAD_TOKEN] * (len(self.token_to_index) + 1)
        for tok, idx in self.token_to_index.items():
            if not 1 <= idx <= len(self.token_to_index):
                raise CorpusError(f"token {tok!r} has index {idx} outside 1..{len(self.token_to_index)}")
            self.index_to_token[idx] = tok
        if len(set(self.token_to_index.values())) != len(self.token_to_index):
            raise CorpusError("vocabulary indices are not unique")

    def __len__(self) -> int:
        return len(self.token_to_index)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    @property
    def size_with_pad(self) -> int:
        return len(self) + 1

    def tokens(self) -> list[str]:
        """Tokens in index order (index 1 first)."""
        return self.index_to_token[1:]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.index_to_token[i] for i in ids if i != self.pad_index]

    def to_tsv(self) -> str:
        lines = [f"{tok}\t{idx}\t{self.counts.get(tok, 0)}" for idx, tok in enumerate(self.index_to_token) if idx]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "Vocabulary":
        t2i, counts = {}, {}
        for line in text.splitlines():
            if not line:
                continue
            tok, idx, cnt = line.split("\t")
            t2i[tok] = int(idx)
            counts[tok] = int(cnt)
        return cls(t2i, counts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.to_tsv().encode()).hexdigest()


def index_tokens(counts: dict[str, int], keep: Optional[Iterable[str]] = None) -> Vocabulary:
    """Assign indices 1..|V| by descending count, ties broken lexicographically."""
    tokens = sorted(counts if keep is None else keep, key=lambda t: (-counts.get(t, 0), t))
    return Vocabulary({t: i for i, t in enumerate(tokens, start=1)}, {t: counts.get(t, 0) for t in tokens})


def build_vocabulary(pruned_train: Sequence[Sequence[str]], cfg: PreprocessConfig,
                     stopwords: Optional[frozenset] = None) -> Vocabulary:
    if not pruned_train:
        raise CorpusError("cannot build a vocabulary from an empty training set")
    stopwords = _stopwords() if stopwords is None else stopwords
    lo, hi = cfg.min_token_len, cfg.max_token_len
    counts: Counter = Counter()
    doc_freq: Counter = Counter()
    for doc in pruned_train:
        counted = [t for t in doc if lo <= len(t) <= hi and t not in stopwords]
        counts.update(counted)
        doc_freq.update(set(counted))
    num_doc = len(pruned_train)
    # fr_abv bounds the fraction of training documents a token may appear in
    kept = {t: c for t, c in counts.items() if not (c < cfg.num_below or doc_freq[t] / num_doc > cfg.fr_abv)}
    if cfg.max_vocab is not None and len(kept) > cfg.max_vocab:
        top = sorted(kept, key=lambda t: (-kept[t], t))[: cfg.max_vocab]
        kept = {t: kept[t] for t in top}
    if not kept:
        raise CorpusError("vocabulary is empty after filtering")
    return index_tokens(kept)


# --------------------------------------------------------------------------
# encoding


def encode(pruned_docs: Sequence[Sequence[str]], vocab: Vocabulary) -> list[list[int]]:
    """Map tokens to indices, dropping out-of-vocabulary tokens."""
    t2i = vocab.token_to_index
    return [[t2i[t] for t in doc if t in t2i] for doc in pruned_docs]


def pad_or_truncate(token_ids: Sequence[int], max_seq_len: int) -> tuple[np.ndarray, int]:
    if max_seq_len <= 0:
        raise CorpusError("max_seq_len must be positive")
    n = min(len(token_ids), max_seq_len)
    out = np.full(max_seq_len, PAD_INDEX, dtype=np.int64)
    out[:n] = np.asarray(token_ids[:n], dtype=np.int64)
    return out, n


def bow_vectorize(token_ids: Sequence[int], vocab_size: int) -> np.ndarray:
    """Count vector of length ``vocab_size``; entry i counts index i+1."""
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 1 or ids.max() > vocab_size):
        raise CorpusError("token ids must lie in 1..vocab_size (padding excluded)")
    return np.bincount(ids - 1, minlength=vocab_size).astype(np.int64) if ids.size else np.zeros(vocab_size, np.int64)


@dataclass
class EncodedDocument:
    token_ids: list[int]
    label: Optional[int] = None
    doc_id: int = 0
    empty: bool = False

    def bow(self, vocab_size: int) -> np.ndarray:
        return bow_vectorize(self.token_ids, vocab_size)

    def to_json(self) -> str:
        rec = {"id": self.doc_id, "ids": self.token_ids, "label": self.label}
        if self.empty:
            rec["empty"] = True
        return json.dumps(rec, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "EncodedDocument":
        rec = json.loads(line)
        return cls(rec["ids"], rec.get("label"), rec["id"], rec.get("empty", False))


@dataclass
class CorpusSplit:
    train: list[EncodedDocument]
    test: list[EncodedDocument]
    vocabulary: Vocabulary
    max_seq_len: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.max_seq_len <= 0:
            raise CorpusError("max_seq_len must be positive")

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def usable(self, split: str) -> list[EncodedDocument]:
        """Documents of ``split`` that carry at least one in-vocabulary token."""
        return [d for d in getattr(self, split) if d.token_ids]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "vocab.tsv").write_text(self.vocabulary.to_tsv())
        for name in ("train", "test"):
            with open(out / f"{name}.jsonl", "w") as f:
                for doc in getattr(self, name):
                    f.write(doc.to_json() + "\n")
        meta = dict(self.metadata, max_seq_len=self.max_seq_len, vocab_size=len(self.vocabulary),
                    vocab_sha256=self.vocabulary.fingerprint())
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, data_dir) -> "CorpusSplit":
        d = Path(data_dir)
        vocab = Vocabulary.from_tsv((d / "vocab.tsv").read_text())
        meta = json.loads((d / "meta.json").read_text())
        splits = {}
        for name in ("train", "test"):
            with open(d / f"{name}.jsonl") as f:
                splits[name] = [EncodedDocument.from_json(line) for line in f if line.strip()]
        return cls(splits["train"], splits["test"], vocab, int(meta["max_seq_len"]), meta)


def tool_versions() -> dict:
    versions = {"python": platform.python_version()}
    for pkg in ("lemminflect", "gensim", "numpy"):
        try:
            versions[pkg] = importlib.metadata.version(pkg)
        except importlib.metadata.PackageNotFoundError:
            versions[pkg] = None
    return versions


def _assemble(encoded: list[list[int]], labels, drop_empty: bool) -> list[EncodedDocument]:
    docs = []
    for i, ids in enumerate(encoded):
        label = None if labels is None else labels[i]
        if not ids and drop_empty:
            continue
        docs.append(EncodedDocument(ids, label, i, empty=not ids))
    return docs


def sample_indices(n: int, tr_size: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).permutation(n)[:tr_size]


def preprocess(train_docs: Sequence[str], test_docs: Sequence[str], cfg: PreprocessConfig, max_seq_len: int,
               train_labels: Optional[Sequence[int]] = None, test_labels: Optional[Sequence[int]] = None,
               dataset: str = "custom") -> CorpusSplit:
    """Run the full raw-text pipeline: sample, prune, build vocabulary, encode."""
    idx = sample_indices(len(train_docs), cfg.tr_size, cfg.seed)
    train_docs = [train_docs[i] for i in idx]
    if train_labels is not None:
        train_labels = [train_labels[i] for i in idx]
    tr_pruned = [prune_doc(d) for d in train_docs]
    te_pruned = [prune_doc(d) for d in test_docs]
    vocab = build_vocabulary(tr_pruned, cfg)
    train = _assemble(encode(tr_pruned, vocab), train_labels, drop_empty=True)
    test = _assemble(encode(te_pruned, vocab), test_labels, drop_empty=False)
    logger.info("%s: %d/%d train docs kept, %d test docs, |V|=%d", dataset, len(train), len(tr_pruned),
                len(test), len(vocab))
    meta = {"dataset": dataset, "config": asdict(cfg), "sampler": SAMPLER, "lemmatizer": LEMMATIZER,
            "stopwords": STOPWORD_LIST, "tools": tool_versions()}
    return CorpusSplit(train, test, vocab, max_seq_len, meta)


# --------------------------------------------------------------------------
# dataset readers


def read_csv_corpus(path, dataset: str) -> tuple[list[str], list[int]]:
    """Read an AGNews/YRP style CSV (``label, [title,] body``, no header).

    Labels are shifted to start at 0; AGNews title and body are joined.
    """
    docs, labels = [], []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row:
                continue
            labels.append(int(row[0]))
            docs.append(" ".join(row[1:]) if dataset == "agnews" else row[-1])
    lo = min(labels) if labels else 0
    return docs, [lab - lo for lab in labels]


def _load_npy_docs(path) -> list[list[int]]:
    arr = np.load(path, allow_pickle=True, encoding="bytes")
    return [[int(i) for i in np.asarray(doc).ravel()] for doc in arr]


def _load_labels(d: Path, name: str) -> Optional[list[int]]:
    for candidate in (d / f"{name}.labels.npy", d / f"{name}.labels.txt"):
        if candidate.exists():
            if candidate.suffix == ".npy":
                return [int(x) for x in np.load(candidate)]
            return [int(x) for x in candidate.read_text().split()]
    return None


def ingest_20ng(release_dir, max_seq_len: int = 200) -> CorpusSplit:
    """Ingest the already-preprocessed 20 Newsgroups release.

    Expects ``train.txt.npy`` and ``test.txt.npy`` (arrays of 0-based token id
    sequences) plus ``vocab.pkl`` (token -> 0-based id).  Optional label files
    ``{train,test}.labels.{npy,txt}`` are attached when present.
    """
    d = Path(release_dir)
    with open(d / "vocab.pkl", "rb") as f:
        raw_vocab = pickle.load(f, encoding="latin1")
    raw_vocab = {(k.decode() if isinstance(k, bytes) else k): int(v) for k, v in raw_vocab.items()}
    id_to_tok = {v: k for k, v in raw_vocab.items()}
    tr_raw, te_raw = _load_npy_docs(d / "train.txt.npy"), _load_npy_docs(d / "test.txt.npy")
    counts = Counter(id_to_tok[i] for doc in tr_raw for i in doc)
    vocab = index_tokens(dict(counts), keep=raw_vocab.keys())
    remap = {old: vocab.token_to_index[tok] for old, tok in id_to_tok.items()}
    tr_enc = [[remap[i] for i in doc] for doc in tr_raw]
    te_enc = [[remap[i] for i in doc] for doc in te_raw]
    train = _assemble(tr_enc, _load_labels(d, "train"), drop_empty=True)
    test = _assemble(te_enc, _load_labels(d, "test"), drop_empty=False)
    meta = {"dataset": "20ng", "source": os.fspath(d), "note": "preprocessed release; pruning bypassed",
            "tools": tool_versions()}
    return CorpusSplit(train, test, vocab, max_seq_len, meta)


def load_dataset(dataset: str, in_path, seed: int = 0, **overrides) -> CorpusSplit:
    """Preprocess one of the supported datasets from its on-disk release."""
    if dataset not in DATASET_DEFAULTS:
        raise CorpusError(f"unknown dataset {dataset!r}")
    params = dict(DATASET_DEFAULTS[dataset])
    params.update({k: v for k, v in overrides.items() if v is not None})
    max_seq_len = params.pop("max_seq_len")
    if dataset == "20ng":
        split = ingest_20ng(in_path, max_seq_len)
    else:
        p = Path(in_path)
        tr_docs, tr_labels = read_csv_corpus(p / "train.csv", dataset)
        te_docs, te_labels = read_csv_corpus(p / "test.csv", dataset)
        cfg = PreprocessConfig(seed=seed, **params)
        split = preprocess(tr_docs, te_docs, cfg, max_seq_len, tr_labels, te_labels, dataset)
    split.metadata["seed"] = seed
    return split
