"""Topic coherence, topic export, linear probing and forward-pass timing."""

from __future__ import annotations

import hashlib
import itertools
import logging
import math
import os
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn

from .corpus import CorpusSplit, EncodedDocument, Vocabulary
from .model import TANNTM
from .train import batch_slices, make_batch

logger = logging.getLogger(__name__)

WHOLE_DOC = "doc"


@dataclass
class CoherenceConfig:
    top_L: int = 10
    window: Union[int, str] = 10
    reference_corpus: str = "train"
    epsilon: float = 1e-12

    def __post_init__(self):
        if self.top_L < 2:
            raise ValueError("top_L must be at least 2")
        if self.window != WHOLE_DOC and (not isinstance(self.window, int) or self.window < 2):
            raise ValueError(f"window must be an integer >= 2 or {WHOLE_DOC!r}")


@dataclass
class CoherenceReport:
    topics: list[list[str]]
    per_topic: list[float]
    mean: float
    config: dict
    missing_words: list[str] = field(default_factory=list)
    num_windows: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def top_words(T_w, vocab: Vocabulary, L: int) -> list[list[str]]:
    """The ``L`` most probable words of every topic, ties broken by vocabulary index."""
    probs = T_w.detach().cpu().numpy() if isinstance(T_w, torch.Tensor) else np.asarray(T_w)
    if L > probs.shape[1]:
        raise ValueError(f"cannot take {L} words from a vocabulary of {probs.shape[1]}")
    tokens = vocab.tokens()
    order = np.argsort(-probs, axis=1, kind="stable")[:, :L]
    return [[tokens[i] for i in row] for row in order]


def export_topics(topics: Sequence[Sequence[str]], scores: Optional[Sequence[float]] = None) -> str:
    """Tab-separated topic table: topic id, optional NPMI, space-joined words."""
    header = ["topic"] + (["npmi"] if scores is not None else []) + ["words"]
    lines = ["\t".join(header)]
    for k, words in enumerate(topics):
        row = [str(k)] + ([f"{scores[k]:.4f}"] if scores is not None else []) + [" ".join(words)]
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# NPMI


def cooccurrence_counts(docs: Sequence[Sequence[str]], targets: Sequence[str], window):
    """Window counts for target words and target pairs over a reference corpus.

    Every document contributes ``max(len - window + 1, 1)`` sliding windows (a
    single whole-document window if it is shorter than ``window`` or when
    ``window == "doc"``).  Returns (word_counts[m], pair_counts[m, m],
    number_of_windows), where counts are numbers of windows containing the
    word(s).
    """
    tid = {w: j for j, w in enumerate(targets)}
    m = len(targets)
    word = np.zeros(m, dtype=np.int64)
    pair = np.zeros((m, m), dtype=np.int64)
    total = 0
    for doc in docs:
        n = len(doc)
        if n == 0:
            continue
        w = n if window == WHOLE_DOC else min(int(window), n)
        nw = n - w + 1
        total += nw
        hits = [(t, tid[tok]) for t, tok in enumerate(doc) if tok in tid]
        if not hits:
            continue
        present = sorted({j for _, j in hits})
        row = {j: r for r, j in enumerate(present)}
        diff = np.zeros((len(present), nw + 1), dtype=np.int64)
        for t, j in hits:
            diff[row[j], max(0, t - w + 1)] += 1
            diff[row[j], min(t, nw - 1) + 1] -= 1
        pres = (np.cumsum(diff[:, :nw], axis=1) > 0).astype(np.int64)
        idx = np.asarray(present)
        word[idx] += pres.sum(1)
        pair[np.ix_(idx, idx)] += pres @ pres.T
    return word, pair, total


def npmi_from_counts(c_i: int, c_j: int, c_ij: int, n: int, epsilon: float = 1e-12) -> float:
    if c_ij == 0 or n == 0:
        return -1.0
    if c_ij == n:
        return 1.0
    p_i, p_j, joint = c_i / n, c_j / n, c_ij / n + epsilon
    # epsilon can nudge perfectly correlated pairs a hair past the bound
    return min(1.0, max(-1.0, math.log(joint / (p_i * p_j)) / -math.log(joint)))


def npmi_coherence(topics: Sequence[Sequence[str]], reference_docs: Sequence[Sequence[str]],
                   cfg: CoherenceConfig = CoherenceConfig()) -> CoherenceReport:
    """Mean pairwise NPMI of each topic's word list against a reference corpus."""
    targets = sorted({w for t in topics for w in t})
    word, pair, n = cooccurrence_counts(reference_docs, targets, cfg.window)
    tid = {w: j for j, w in enumerate(targets)}
    scores = []
    for t in topics:
        vals = [npmi_from_counts(word[tid[a]], word[tid[b]], pair[tid[a], tid[b]], n, cfg.epsilon)
                for a, b in itertools.combinations(t, 2)]
        scores.append(float(np.mean(vals)) if vals else 0.0)
    missing = [w for w in targets if word[tid[w]] == 0]
    if missing:
        logger.warning("%d topic words never occur in the reference corpus", len(missing))
    return CoherenceReport([list(t) for t in topics], scores, float(np.mean(scores)), asdict(cfg), missing, n)


def reference_tokens(corpus: CorpusSplit, split: str = "train") -> list[list[str]]:
    return [corpus.vocabulary.decode(d.token_ids) for d in corpus.usable(split)]


def model_coherence(model: TANNTM, corpus: CorpusSplit, cfg: CoherenceConfig = CoherenceConfig(),
                    reference: Optional[Sequence[Sequence[str]]] = None) -> CoherenceReport:
    with torch.no_grad():
        topics = top_words(model.topic_word(), corpus.vocabulary, cfg.top_L)
    if reference is None:
        reference = reference_tokens(corpus, cfg.reference_corpus)
    return npmi_coherence(topics, reference, cfg)


# --------------------------------------------------------------------------
# classification probe


@dataclass
class ProbeConfig:
    feature_source: str = "topic"
    lr: float = 0.01
    epochs: int = 50
    batch_size: int = 100
    patience: int = 5
    tol: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.feature_source not in ("topic", "context"):
            raise ValueError("feature_source must be 'topic' or 'context'")


def param_hash(model: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def extract_features(model: TANNTM, docs: Sequence[EncodedDocument], vocab_size: int, max_seq_len: int,
                     source: str = "topic", batch_size: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic document features from a frozen model.

    ``topic`` gives the posterior mean of the document-topic latent, ``context``
    the attention context vector fed to the inference head.
    """
    if any(d.label is None for d in docs):
        raise ValueError("feature extraction for probing needs labelled documents")
    model.eval()
    dtype = next(model.parameters()).dtype
    feats = []
    with torch.no_grad():
        for sl in batch_slices(len(docs), batch_size):
            b = make_batch(docs[sl], vocab_size, max_seq_len, dtype)
            ctx = model.context(b.ids, b.lengths, b.bow)
            if source == "context":
                feats.append(ctx["c"])
            elif source == "topic":
                feats.append(model.inference_head(ctx["c"])[0])
            else:
                raise ValueError(f"unknown feature source {source!r}")
    X = torch.cat(feats).double().numpy() if feats else np.zeros((0, 0))
    return X, np.asarray([d.label for d in docs], dtype=np.int64)


def linear_probe(train_X, train_y, test_X, test_y, cfg: ProbeConfig = ProbeConfig()) -> float:
    """Train one affine layer with cross-entropy and Adam; return test accuracy in percent."""
    train_y = np.asarray(train_y)
    classes = np.unique(train_y)
    if len(classes) < 2:
        raise ValueError("probe training set has a single class")
    n_classes = int(max(classes.max(), np.max(test_y)) + 1)
    gen = torch.Generator().manual_seed(cfg.seed)
    Xtr = torch.as_tensor(np.asarray(train_X), dtype=torch.float32)
    ytr = torch.as_tensor(train_y, dtype=torch.long)
    clf = nn.Linear(Xtr.shape[1], n_classes)
    with torch.no_grad():
        bound = 1 / math.sqrt(Xtr.shape[1])
        clf.weight.uniform_(-bound, bound, generator=gen)
        clf.bias.zero_()
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    loss_fn = nn.CrossEntropyLoss()
    best, stale = math.inf, 0
    for _ in range(cfg.epochs):
        order = torch.randperm(len(Xtr), generator=gen)
        epoch_loss = 0.0
        for sl in batch_slices(len(order), cfg.batch_size):
            idx = order[sl]
            opt.zero_grad()
            loss = loss_fn(clf(Xtr[idx]), ytr[idx])
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        epoch_loss /= len(Xtr)
        if epoch_loss < best - cfg.tol:
            best, stale = epoch_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    with torch.no_grad():
        pred = clf(torch.as_tensor(np.asarray(test_X), dtype=torch.float32)).argmax(1).numpy()
    return float(100.0 * np.mean(pred == np.asarray(test_y)))


def classify(model: TANNTM, corpus: CorpusSplit, cfg: ProbeConfig = ProbeConfig()) -> dict:
    before = param_hash(model)
    train_docs, test_docs = corpus.usable("train"), corpus.usable("test")
    Xtr, ytr = extract_features(model, train_docs, corpus.vocab_size, corpus.max_seq_len, cfg.feature_source)
    Xte, yte = extract_features(model, test_docs, corpus.vocab_size, corpus.max_seq_len, cfg.feature_source)
    acc = linear_probe(Xtr, ytr, Xte, yte, cfg)
    if param_hash(model) != before:
        raise RuntimeError("topic model parameters changed during probing")
    return {"accuracy": acc, "feature_source": cfg.feature_source, "feature_dim": int(Xtr.shape[1]),
            "n_train": len(train_docs), "n_test": len(test_docs), "params_sha256": before}


# --------------------------------------------------------------------------
# timing


def hardware_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "cpu_count": os.cpu_count(), "torch": torch.__version__, "torch_threads": torch.get_num_threads()}


def time_passes(fn: Callable[[], object], n_passes: int, warmup: int = 0,
                clock: Callable[[], float] = time.perf_counter) -> float:
    """Mean wall-clock seconds per call of ``fn`` over ``n_passes`` calls."""
    for _ in range(warmup):
        fn()
    start = clock()
    for _ in range(n_passes):
        fn()
    return (clock() - start) / n_passes


def time_forward(model: TANNTM, corpus: CorpusSplit, n_passes: int = 10000, batch_size: int = 100,
                 warmup: int = 10, dataset: Optional[str] = None) -> dict:
    """Mean time of an evaluation-mode forward pass over one batch padded to the dataset length."""
    docs = (corpus.usable("test") or corpus.usable("train"))[:batch_size]
    b = make_batch(docs, corpus.vocab_size, corpus.max_seq_len, next(model.parameters()).dtype,
                   pad_to=corpus.max_seq_len)
    model.eval()

    def once():
        with torch.no_grad():
            model(b.ids, b.lengths, b.bow)

    mean = time_passes(once, n_passes, warmup)
    return {"mean_seconds": mean, "n_passes": n_passes, "batch_size": len(b), "max_seq_len": corpus.max_seq_len,
            "dataset": dataset or corpus.metadata.get("dataset"), "variant": model.config.variant.value,
            "hardware": hardware_info()}
