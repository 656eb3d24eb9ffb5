"""Topic attention neural topic model.

The encoder embeds a document's token sequence, runs it through an LSTM and
attends over the hidden states.  In the topic-attention variants each topic's
embedding (its word distribution pushed through the embedding matrix) acts as
an attention query, giving one context vector per topic; these are either
mixed by the document's topic proportions (W-TAN) or the most probable
topic's row is taken (T-TAN).  The resulting context vector parameterises a
logistic-normal posterior whose sample is decoded into a distribution over
the vocabulary, ProdLDA style.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

logger = logging.getLogger(__name__)

RECON_EPS = 1e-10


class Variant(str, enum.Enum):
    ONLY_LSTM = "lstm"
    VANILLA_ATTN = "attn"
    W_TAN = "wtan"
    T_TAN = "ttan"

    @property
    def topic_attention(self) -> bool:
        return self in (Variant.W_TAN, Variant.T_TAN)


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int
    num_topics: int = 50
    embed_dim: int = 200
    hidden_dim: int = 450
    attn_dim: int = 350
    variant: Variant = Variant.T_TAN
    dropout_rate: float = 0.6
    prior_alpha: Optional[float] = None
    bn_eps: float = 1e-3
    bn_decay: float = 0.999

    def __post_init__(self):
        self.variant = Variant(self.variant)
        dims = (self.vocab_size, self.num_topics, self.embed_dim, self.hidden_dim, self.attn_dim)
        if min(dims) <= 0:
            raise ValueError(f"all dimensions must be positive, got {dims}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.prior_alpha is None:
            self.prior_alpha = 1.0 / self.num_topics
        if self.prior_alpha <= 0:
            raise ValueError("prior_alpha must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        return d


@dataclass
class ForwardTrace:
    """Intermediate tensors of one batched forward pass.

    Shapes use B for batch, L for padded length.  Attention-only entries are
    ``None`` for variants that do not compute them.
    """

    hidden: torch.Tensor                      # (B, L, H), zero beyond each length
    lengths: torch.Tensor                     # (B,)
    c: torch.Tensor                           # (B, H)
    z_mu: torch.Tensor                        # (B, K)
    z_logvar: torch.Tensor                    # (B, K)
    z: torch.Tensor                           # (B, K)
    x_rec: torch.Tensor                       # (B, V)
    recon: torch.Tensor                       # (B,)
    kl: torch.Tensor                          # (B,)
    total: torch.Tensor                       # scalar
    A: Optional[torch.Tensor] = None          # (B, L, K); (B, L, 1) for vanilla attention
    C_T: Optional[torch.Tensor] = None        # (B, K, H)
    t_d: Optional[torch.Tensor] = None        # (B, K)
    T_w: Optional[torch.Tensor] = None        # (K, V)
    T_E: Optional[torch.Tensor] = None        # (K, E)

    @property
    def losses(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.recon, self.kl, self.total


# --------------------------------------------------------------------------
# building blocks


def topic_word_distribution(D: torch.Tensor) -> torch.Tensor:
    return torch.softmax(D, dim=-1)


def topic_embeddings(T_w: torch.Tensor, word_emb: torch.Tensor) -> torch.Tensor:
    return T_w @ word_emb


def length_mask(lengths: torch.Tensor, max_len: int) -> torch.Tensor:
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


_SCORE_CHUNK_ELEMS = 1 << 25


def additive_scores(queries: torch.Tensor, M: torch.Tensor, W_A: torch.Tensor, v_A: torch.Tensor) -> torch.Tensor:
    """``v_A . tanh(W_A [q_k; h_j])`` for every query k and position j.

    ``queries`` is (K, Q) shared across the batch or (B, K, Q); ``M`` is
    (B, L, H).  Returns (B, K, L).  The concatenation is applied as a split of
    ``W_A`` so the (K x L) grid of concatenated vectors is never built.
    """
    q_dim = queries.shape[-1]
    q_proj = queries @ W_A[:, :q_dim].T          # (..., K, P)
    h_proj = M @ W_A[:, q_dim:].T                # (B, L, P)
    if q_proj.dim() == 2:
        q_proj = q_proj.unsqueeze(0)
    B, L, P = h_proj.shape
    K = q_proj.shape[1]
    step = K
    if not torch.is_grad_enabled():
        # without autograd the (B, K, L, P) grid need not exist all at once
        step = max(1, min(K, _SCORE_CHUNK_ELEMS // max(B * L * P, 1)))
    parts = [torch.tanh(q_proj[:, k:k + step].unsqueeze(2) + h_proj.unsqueeze(1)) @ v_A for k in range(0, K, step)]
    return parts[0] if len(parts) == 1 else torch.cat(parts, dim=1)


def masked_position_softmax(scores: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Softmax over positions of (B, K, L) scores with pads at -inf; returns (B, L, K)."""
    if bool((lengths <= 0).any()):
        raise ValueError("attention over a sequence with no real tokens")
    mask = length_mask(lengths, scores.shape[-1])
    scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
    return torch.softmax(scores, dim=-1).transpose(1, 2)


def alignment_matrix(T_E: torch.Tensor, M: torch.Tensor, lengths: torch.Tensor,
                     W_A: torch.Tensor, v_A: torch.Tensor) -> torch.Tensor:
    return masked_position_softmax(additive_scores(T_E, M, W_A, v_A), lengths)


def topic_context_matrix(A: torch.Tensor, M: torch.Tensor) -> torch.Tensor:
    """Sum over positions of outer(A_j, h_j), i.e. A^T M per document."""
    return A.transpose(-1, -2) @ M


def document_topic_proportions(bow: torch.Tensor, word_emb: torch.Tensor, T_E: torch.Tensor) -> torch.Tensor:
    """softmax(T_E x_emb) where x_emb is the embedding of the normalized BoW."""
    total = bow.sum(-1, keepdim=True)
    if bool((total <= 0).any()):
        raise ValueError("document with an empty bag of words")
    x_emb = (bow / total) @ word_emb
    return torch.softmax(x_emb @ T_E.T, dim=-1)


def aggregate_context(C_T: torch.Tensor, t_d: torch.Tensor, variant: Variant) -> torch.Tensor:
    variant = Variant(variant)
    if variant is Variant.W_TAN:
        return (t_d.unsqueeze(-1) * C_T).sum(-2)
    if variant is Variant.T_TAN:
        top = t_d.argmax(-1)  # first maximal index wins ties
        return C_T[torch.arange(C_T.shape[0], device=C_T.device), top]
    raise ValueError(f"{variant} does not aggregate topic contexts")


def dirichlet_prior_params(alpha, num_topics: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Mean and diagonal variance of the logistic normal matching Dirichlet(alpha)."""
    a = torch.as_tensor(alpha, dtype=torch.float64)
    if a.dim() == 0:
        a = a.expand(num_topics)
    if a.shape != (num_topics,) or bool((a <= 0).any()):
        raise ValueError("alpha must be positive with one entry per topic")
    K = num_topics
    mu = a.log() - a.log().mean()
    var = (1.0 / a) * (1 - 2.0 / K) + (1.0 / a).sum() / K**2
    return mu, var


def gaussian_kl(z_mu, z_logvar, prior_mu, prior_var) -> torch.Tensor:
    """KL(N(z_mu, exp(z_logvar)) || N(prior_mu, prior_var)) summed over topics."""
    return 0.5 * (
        z_logvar.exp() / prior_var
        + (z_mu - prior_mu) ** 2 / prior_var
        - 1
        + prior_var.log()
        - z_logvar
    ).sum(-1)


def reconstruction_loss(bow: torch.Tensor, x_rec: torch.Tensor) -> torch.Tensor:
    return -(bow * (x_rec + RECON_EPS).log()).sum(-1)


def sample_latent(z_mu, z_logvar, generator: Optional[torch.Generator] = None, sample: bool = True):
    if not sample:
        return z_mu
    eps = torch.randn(z_mu.shape, generator=generator, dtype=z_mu.dtype, device=z_mu.device)
    return z_mu + (0.5 * z_logvar).exp() * eps


# --------------------------------------------------------------------------
# model


class TANNTM(nn.Module):
    def __init__(self, config: ModelConfig, embeddings: Optional[torch.Tensor] = None):
        super().__init__()
        self.config = config
        V, K, E, H, P = (config.vocab_size, config.num_topics, config.embed_dim,
                         config.hidden_dim, config.attn_dim)
        self.variant = config.variant
        self.embedding = nn.Embedding(V + 1, E)
        self.lstm = nn.LSTM(E, H, batch_first=True)
        if self.variant.topic_attention:
            self.W_A = nn.Parameter(torch.empty(P, E + H))
        elif self.variant is Variant.VANILLA_ATTN:
            self.W_A = nn.Parameter(torch.empty(P, 2 * H))
        if self.variant is not Variant.ONLY_LSTM:
            self.v_A = nn.Parameter(torch.empty(P))
        momentum = 1.0 - config.bn_decay
        self.bn_mu = nn.BatchNorm1d(H, eps=config.bn_eps, momentum=momentum)
        self.bn_logvar = nn.BatchNorm1d(H, eps=config.bn_eps, momentum=momentum)
        self.fc_mu = nn.Linear(H, K)
        self.fc_logvar = nn.Linear(H, K)
        self.drop = nn.Dropout(config.dropout_rate)
        self.bn_dec = nn.BatchNorm1d(K, eps=config.bn_eps, momentum=momentum)
        self.D = nn.Parameter(torch.empty(K, V))
        self.dec_bias = nn.Parameter(torch.zeros(V))
        prior_mu, prior_var = dirichlet_prior_params(config.prior_alpha, K)
        self.register_buffer("prior_mu", prior_mu.float())
        self.register_buffer("prior_var", prior_var.float())
        self.reset_parameters(embeddings)

    def reset_parameters(self, embeddings: Optional[torch.Tensor] = None):
        for name, p in self.named_parameters():
            if name == "embedding.weight":
                nn.init.uniform_(p, -0.05, 0.05)
            elif name == "v_A":
                nn.init.xavier_uniform_(p.data.view(-1, 1))
            elif p.dim() >= 2:
                nn.init.xavier_uniform_(p)
            else:
                nn.init.zeros_(p)
        for bn in (self.bn_mu, self.bn_logvar, self.bn_dec):
            bn.reset_parameters()
        if embeddings is not None:
            with torch.no_grad():
                self.embedding.weight.copy_(embeddings)

    @property
    def word_embeddings(self) -> torch.Tensor:
        """Embedding rows of real vocabulary words (padding row excluded)."""
        return self.embedding.weight[1:]

    def topic_word(self) -> torch.Tensor:
        return topic_word_distribution(self.D)

    def encode_sequence(self, ids: torch.Tensor, lengths: torch.Tensor):
        """Embed and run the LSTM; returns memory bank (B, L, H) and final hidden (B, H).

        Outputs past each document's length are zero; a zero-length document
        yields an all-zero memory bank and final state.
        """
        if bool((lengths > ids.shape[1]).any()) or bool((lengths < 0).any()):
            raise ValueError("lengths must lie in [0, padded length]")
        emb = self.embedding(ids)
        packed = pack_padded_sequence(emb, lengths.clamp(min=1).cpu(), batch_first=True, enforce_sorted=False)
        out, (h_n, _) = self.lstm(packed)
        M, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        final = h_n[-1]
        empty = lengths == 0
        if bool(empty.any()):
            M = M.masked_fill(empty[:, None, None], 0.0)
            final = final.masked_fill(empty[:, None], 0.0)
        return M, final

    def inference_head(self, c: torch.Tensor):
        return self.fc_mu(self.bn_mu(c)), self.fc_logvar(self.bn_logvar(c))

    def decode_logits(self, z: torch.Tensor) -> torch.Tensor:
        """Dropout on z, batch normalization, then the affine decoder layer."""
        return self.bn_dec(self.drop(z)) @ self.D + self.dec_bias

    def decode_bow(self, z: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.decode_logits(z), dim=-1)

    def context(self, ids, lengths, bow) -> dict:
        """Encoder half of the forward pass: everything up to the context vector."""
        M, final = self.encode_sequence(ids, lengths)
        out = {"hidden": M}
        if self.variant is Variant.ONLY_LSTM:
            out["c"] = final
        elif self.variant is Variant.VANILLA_ATTN:
            A = masked_position_softmax(additive_scores(final.unsqueeze(1), M, self.W_A, self.v_A), lengths)
            out.update(A=A, c=topic_context_matrix(A, M).squeeze(1))
        else:
            T_w = self.topic_word()
            T_E = topic_embeddings(T_w, self.word_embeddings)
            A = alignment_matrix(T_E, M, lengths, self.W_A, self.v_A)
            C_T = topic_context_matrix(A, M)
            t_d = document_topic_proportions(bow, self.word_embeddings, T_E)
            out.update(T_w=T_w, T_E=T_E, A=A, C_T=C_T, t_d=t_d, c=aggregate_context(C_T, t_d, self.variant))
        return out

    def forward(self, ids: torch.Tensor, lengths: torch.Tensor, bow: torch.Tensor,
                sample: Optional[bool] = None, generator: Optional[torch.Generator] = None) -> ForwardTrace:
        """Full pass from padded token ids and BoW counts to the loss.

        ``sample`` defaults to the module's training flag; with it off the
        latent is the posterior mean.
        """
        sample = self.training if sample is None else sample
        ctx = self.context(ids, lengths, bow)
        z_mu, z_logvar = self.inference_head(ctx["c"])
        z = sample_latent(z_mu, z_logvar, generator, sample)
        x_rec = self.decode_bow(z)
        recon = reconstruction_loss(bow, x_rec)
        kl = gaussian_kl(z_mu, z_logvar, self.prior_mu, self.prior_var)
        total = (recon + kl).mean()
        return ForwardTrace(lengths=lengths, z_mu=z_mu, z_logvar=z_logvar, z=z, x_rec=x_rec,
                            recon=recon, kl=kl, total=total, **ctx)


def check_finite(trace: ForwardTrace, where: str = "") -> None:
    if not bool(torch.isfinite(trace.total)):
        bad = int((~torch.isfinite(trace.recon + trace.kl)).sum())
        raise NonFiniteLossError(
            f"non-finite loss{' at ' + where if where else ''}: total={trace.total.item()}, "
            f"{bad} documents affected, recon range=({trace.recon.min().item()}, {trace.recon.max().item()}), "
            f"kl range=({trace.kl.min().item()}, {trace.kl.max().item()})"
        )


def load_glove(path, tokens: list[str], dim: int, seed: int = 0) -> tuple[torch.Tensor, int]:
    """Embedding matrix with a padding row followed by one row per token.

    Rows of tokens found in the GloVe text file copy the pretrained vector;
    all other rows (and the padding row) are drawn from U(-0.05, 0.05).
    Returns the matrix and the number of tokens found.
    """
    rng = np.random.default_rng(seed)
    mat = rng.uniform(-0.05, 0.05, size=(len(tokens) + 1, dim)).astype(np.float32)
    where = {t: i + 1 for i, t in enumerate(tokens)}
    hits = 0
    with open(path, encoding="utf-8", errors="ignore") as f:
        for line in f:
            word, _, rest = line.rstrip().partition(" ")
            row = where.get(word)
            if row is None:
                continue
            vec = np.array(rest.split(" "), dtype=np.float32)
            if vec.shape != (dim,):
                raise ValueError(f"GloVe vector for {word!r} has dim {vec.shape[0]}, expected {dim}")
            mat[row] = vec
            hits += 1
    logger.info("GloVe: %d/%d vocabulary tokens found", hits, len(tokens))
    return torch.from_numpy(mat), hits
