"""Mini-batch training of the topic model with Adam and a staircase schedule."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .corpus import CorpusSplit, EncodedDocument
from .model import ModelConfig, NonFiniteLossError, TANNTM, Variant, check_finite

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 200
    init_rate: float = 0.002
    decay_rate: float = 0.96
    adam_beta1: float = 0.99
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 10
    # epochs between coherence evaluations for best-checkpoint selection; 0 disables
    coherence_every: int = 0

    def __post_init__(self):
        if self.init_rate <= 0 or self.decay_rate <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_coherence: Optional[float] = None
    best_checkpoint: Optional[str] = None
    history: list = field(default_factory=list)


def lr_schedule(train_step: int, decay_steps: int, cfg: TrainConfig, variant) -> float:
    """Staircase exponential decay for T-TAN, constant rate for every other variant."""
    if Variant(variant) is not Variant.T_TAN:
        return cfg.init_rate
    return cfg.init_rate * cfg.decay_rate ** (train_step // max(decay_steps, 1))


def decay_steps_for(num_train_docs: int, batch_size: int) -> int:
    return max(num_train_docs // batch_size, 1)


@dataclass
class Batch:
    ids: torch.Tensor        # (B, L) padded token ids
    lengths: torch.Tensor    # (B,) lengths after truncation
    bow: torch.Tensor        # (B, V) counts over the untruncated document
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.ids.shape[0]


def make_batch(docs: Sequence[EncodedDocument], vocab_size: int, max_seq_len: int,
               dtype=torch.float32, pad_to: Optional[int] = None) -> Batch:
    """Collate documents; sequences are padded to the longest (truncated) one unless ``pad_to`` is given."""
    lengths = [min(len(d.token_ids), max_seq_len) for d in docs]
    width = pad_to if pad_to is not None else max(lengths)
    ids = torch.zeros(len(docs), width, dtype=torch.long)
    bow = torch.zeros(len(docs), vocab_size, dtype=dtype)
    for i, d in enumerate(docs):
        ids[i, : lengths[i]] = torch.as_tensor(d.token_ids[: lengths[i]])
        full = torch.as_tensor(d.token_ids, dtype=torch.long) - 1
        bow[i].index_put_((full,), torch.ones(len(full), dtype=dtype), accumulate=True)
    labels = None
    if all(d.label is not None for d in docs):
        labels = torch.as_tensor([d.label for d in docs], dtype=torch.long)
    return Batch(ids, torch.as_tensor(lengths, dtype=torch.long), bow, labels)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous slices covering 0..n; a trailing singleton joins the previous batch."""
    bounds = list(range(0, n, batch_size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] == 1:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


class Trainer:
    """Owns the model, optimizer and RNG streams for one training run.

    ``coherence_fn`` maps a model to a scalar score; when given together with
    ``coherence_every`` it drives best-checkpoint selection.
    """

    def __init__(self, model: TANNTM, corpus: CorpusSplit, cfg: TrainConfig, out_dir=None,
                 coherence_fn: Optional[Callable[[TANNTM], float]] = None):
        self.model = model
        self.corpus = corpus
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.coherence_fn = coherence_fn
        self.docs = corpus.usable("train")
        if not self.docs:
            raise ValueError("training split has no usable documents")
        self.dtype = next(model.parameters()).dtype
        self.decay_steps = decay_steps_for(len(self.docs), cfg.batch_size)
        self.optimizer = torch.optim.Adam(model.parameters(), lr=cfg.init_rate,
                                          betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps)
        torch.manual_seed(cfg.seed)
        self.shuffle_gen = torch.Generator().manual_seed(cfg.seed)
        self.noise_gen = torch.Generator().manual_seed(cfg.seed + 1)
        self.state = TrainState()

    @property
    def variant(self) -> Variant:
        return self.model.config.variant

    def current_lr(self) -> float:
        return lr_schedule(self.state.step, self.decay_steps, self.cfg, self.variant)

    def train_step(self, batch: Batch) -> dict:
        self.model.train()
        lr = self.current_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad()
        trace = self.model(batch.ids, batch.lengths, batch.bow, generator=self.noise_gen)
        check_finite(trace, f"epoch {self.state.epoch + 1} step {self.state.step}")
        trace.total.backward()
        self.optimizer.step()
        self.state.step += 1
        return {"lr": lr, "recon": trace.recon.detach().sum().item(),
                "kl": trace.kl.detach().sum().item(), "n": len(batch)}

    def train_epoch(self) -> dict:
        order = torch.randperm(len(self.docs), generator=self.shuffle_gen).tolist()
        sums = {"recon": 0.0, "kl": 0.0, "n": 0}
        lr = self.current_lr()
        for sl in batch_slices(len(order), self.cfg.batch_size):
            batch = make_batch([self.docs[i] for i in order[sl]], self.corpus.vocab_size,
                               self.corpus.max_seq_len, self.dtype)
            out = self.train_step(batch)
            for k in sums:
                sums[k] += out[k]
        self.state.epoch += 1
        n = sums["n"]
        rec = {"epoch": self.state.epoch, "step": self.state.step, "lr": lr,
               "recon": sums["recon"] / n, "kl": sums["kl"] / n,
               "total": (sums["recon"] + sums["kl"]) / n}
        self.state.history.append(rec)
        return rec

    def run(self, epochs: Optional[int] = None) -> TrainState:
        """Train until ``epochs`` (default: the configured total) have been completed."""
        target = self.cfg.epochs if epochs is None else epochs
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        log = open(self.out_dir / "train_log.jsonl", "a") if self.out_dir else None
        try:
            while self.state.epoch < target:
                try:
                    rec = self.train_epoch()
                except NonFiniteLossError:
                    logger.error("aborting; last good checkpoint kept in %s", self.out_dir)
                    raise
                logger.info("epoch %d lr %.5f recon %.3f kl %.3f total %.3f", rec["epoch"], rec["lr"],
                            rec["recon"], rec["kl"], rec["total"])
                if log:
                    log.write(json.dumps(rec) + "\n")
                    log.flush()
                self._maybe_checkpoint()
        finally:
            if log:
                log.close()
        if self.out_dir and self.state.epoch >= self.cfg.epochs:
            self.save(self.out_dir / "final.pt")
        return self.state

    def _maybe_checkpoint(self):
        epoch = self.state.epoch
        if self.coherence_fn and self.cfg.coherence_every and epoch % self.cfg.coherence_every == 0:
            score = float(self.coherence_fn(self.model))
            self.state.history[-1]["coherence"] = score
            if self.state.best_coherence is None or score > self.state.best_coherence:
                self.state.best_coherence = score
                if self.out_dir:
                    self.state.best_checkpoint = str(self.out_dir / "best.pt")
                    self.save(self.out_dir / "best.pt")
        if self.out_dir and self.cfg.checkpoint_every and epoch % self.cfg.checkpoint_every == 0:
            self.save(self.out_dir / "last.pt")

    def save(self, path):
        return save_checkpoint(
            path, self.model, self.corpus.vocabulary.fingerprint(),
            vocab_tokens=self.corpus.vocabulary.tokens(), train_config=asdict(self.cfg), train_state=asdict(self.state),
            optimizer=self.optimizer.state_dict(),
            rng={"torch": torch.get_rng_state(), "shuffle": self.shuffle_gen.get_state(),
                 "noise": self.noise_gen.get_state()},
        )

    @classmethod
    def resume(cls, path, corpus: CorpusSplit, out_dir=None, coherence_fn=None,
               epochs: Optional[int] = None) -> "Trainer":
        """Restore model, optimizer, RNG streams and counters from a checkpoint."""
        payload = load_checkpoint(path)
        model = TANNTM(ModelConfig(**payload["config"]))
        if payload.get("dtype") == "torch.float64":
            model = model.double()
        model.load_state_dict(payload["state_dict"])
        tcfg = dict(payload["train_config"])
        if epochs is not None:
            tcfg["epochs"] = epochs
        trainer = cls(model, corpus, TrainConfig(**tcfg), out_dir, coherence_fn)
        trainer.optimizer.load_state_dict(payload["optimizer"])
        trainer.state = TrainState(**payload["train_state"])
        torch.set_rng_state(payload["rng"]["torch"])
        trainer.shuffle_gen.set_state(payload["rng"]["shuffle"])
        trainer.noise_gen.set_state(payload["rng"]["noise"])
        return trainer


def train(corpus: CorpusSplit, model_cfg: ModelConfig, train_cfg: TrainConfig, out_dir=None,
          embeddings: Optional[torch.Tensor] = None, coherence_fn=None) -> tuple[TANNTM, TrainState]:
    torch.manual_seed(train_cfg.seed)
    model = TANNTM(model_cfg, embeddings)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "train_log.jsonl").unlink(missing_ok=True)
    trainer = Trainer(model, corpus, train_cfg, out_dir, coherence_fn)
    state = trainer.run()
    return trainer.model, state


def mean_loss(model: TANNTM, docs: Sequence[EncodedDocument], vocab_size: int, max_seq_len: int,
              batch_size: int = 100) -> float:
    """Average evaluation-mode loss per document."""
    model.eval()
    dtype = next(model.parameters()).dtype
    total = 0.0
    with torch.no_grad():
        for sl in batch_slices(len(docs), batch_size):
            b = make_batch(docs[sl], vocab_size, max_seq_len, dtype)
            tr = model(b.ids, b.lengths, b.bow)
            total += float((tr.recon + tr.kl).sum())
    return total / max(len(docs), 1)

