"""Minimal analytically differentiable next-token model with a LoRA adapter.

The model is deliberately tiny: a frozen embedding table, causal mean pooling
over the prefix, and a frozen linear head with a trainable low-rank update on
top.  Position i pools the embeddings of tokens 0..i and predicts token i+1.
Every gradient we need (adapter factors and per-position input embeddings) has
a closed form, so training needs no autodiff framework and runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Vocabulary",
    "TokenSequence",
    "EmbeddingTable",
    "LoraAdapter",
    "ToyModel",
    "BatchGradients",
    "build_model",
    "forward",
    "per_token_losses",
    "backward_weighted",
    "batch_forward",
    "batch_backward",
    "weighted_loss_from_embeddings",
    "finite_difference_grad",
    "sgd_step",
    "flatten_adapter",
    "unflatten_adapter",
]


@dataclass(frozen=True)
class Vocabulary:
    """Closed set of token ids 0..size-1."""

    size: int

    def __post_init__(self):
        if self.size < 2:
            raise ValueError(f"vocabulary needs at least 2 tokens, got {self.size}")


@dataclass(frozen=True)
class TokenSequence:
    """Immutable token-id sequence with at least one (context, target) pair."""

    tokens: tuple[int, ...]

    def __post_init__(self):
        if len(self.tokens) < 2:
            raise ValueError("a sequence needs at least 2 tokens")
        if any(int(t) < 0 for t in self.tokens):
            raise ValueError("token ids must be nonnegative")

    def __len__(self) -> int:
        return len(self.tokens)

    def validate_for(self, vocab: Vocabulary) -> None:
        if max(self.tokens) >= vocab.size:
            raise ValueError(
                f"token id {max(self.tokens)} out of range for vocabulary of {vocab.size}"
            )


@dataclass
class EmbeddingTable:
    """Frozen map from token id to a float64 embedding row."""

    vectors: np.ndarray  # (V, d_e)

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(np.asarray(self.vectors, dtype=np.float64))
        if self.vectors.ndim != 2:
            raise ValueError("embedding table must be 2-d (vocab, dim)")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("embedding table contains non-finite values")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.vectors.shape[0]

    def lookup(self, ids) -> np.ndarray:
        return self.vectors[np.asarray(ids, dtype=np.int64)]


@dataclass
class LoraAdapter:
    """Trainable low-rank pair: the effective update is (alpha/r) * B @ A.

    B starts at zero so a freshly built model computes exactly the frozen base.
    """

    a: np.ndarray  # (r, d_in)
    b: np.ndarray  # (d_out, r)
    alpha_lora: float

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ValueError("adapter factors must be 2-d")
        if self.b.shape[1] != self.a.shape[0]:
            raise ValueError(
                f"rank mismatch: A has rank {self.a.shape[0]}, B has rank {self.b.shape[1]}"
            )
        r = self.a.shape[0]
        if r < 1 or r > min(self.b.shape[0], self.a.shape[1]):
            raise ValueError(f"rank {r} out of range for factor shapes")
        if not self.alpha_lora > 0:
            raise ValueError("alpha_lora must be positive")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def num_coords(self) -> int:
        return self.a.size + self.b.size

    def increment(self) -> np.ndarray:
        return (self.alpha_lora / self.rank) * (self.b @ self.a)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.a.copy(), self.b.copy(), self.alpha_lora)


@dataclass
class ToyModel:
    """Frozen embeddings + frozen head w0, with a trainable adapter on the head."""

    embeddings: EmbeddingTable
    w0: np.ndarray  # (V, d_e), frozen
    adapter: LoraAdapter

    def __post_init__(self):
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        if self.w0.ndim != 2:
            raise ValueError("w0 must be 2-d (vocab, embed dim)")
        if self.w0.shape != (self.embeddings.vocab_size, self.embeddings.dim):
            raise ValueError(
                f"w0 shape {self.w0.shape} does not match embeddings "
                f"({self.embeddings.vocab_size}, {self.embeddings.dim})"
            )
        if self.adapter.a.shape[1] != self.embeddings.dim:
            raise ValueError("adapter input dim must equal embedding dim")
        if self.adapter.b.shape[0] != self.w0.shape[0]:
            raise ValueError("adapter output dim must equal vocabulary size")

    @property
    def vocab(self) -> Vocabulary:
        return Vocabulary(self.w0.shape[0])

    def effective_weight(self) -> np.ndarray:
        return self.w0 + self.adapter.increment()


@dataclass
class BatchGradients:
    """Closed-form gradients for one sequence.

    grad_a / grad_b differentiate the token-weighted loss sum(z_i * loss_i);
    token_embed_grads differentiates the full unweighted loss with respect to
    each input position's embedding (last position never feeds a context, so
    its row is zero).  per_token_losses are always unweighted.
    """

    grad_a: np.ndarray
    grad_b: np.ndarray
    token_embed_grads: np.ndarray  # (T, d_e)
    per_token_losses: np.ndarray  # (T-1,)


def build_model(
    vocab_size: int,
    embed_dim: int,
    rank: int,
    alpha_lora: float,
    seed: int,
) -> ToyModel:
    """Seeded model factory; B is zero so the initial model equals the base."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 9]))
    emb = rng.standard_normal((vocab_size, embed_dim))
    w0 = rng.standard_normal((vocab_size, embed_dim)) / np.sqrt(embed_dim)
    a = rng.standard_normal((rank, embed_dim)) / np.sqrt(embed_dim)
    b = np.zeros((vocab_size, rank))
    return ToyModel(EmbeddingTable(emb), w0, LoraAdapter(a, b, alpha_lora))


def _context_means(emb: np.ndarray) -> np.ndarray:
    """Causal prefix means along axis -2: out[..., i, :] = mean(emb[..., :i+1, :])."""
    t = emb.shape[-2]
    denom = np.arange(1, t + 1, dtype=np.float64).reshape((t, 1))
    return np.cumsum(emb, axis=-2) / denom


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _check_tokens_matrix(model: ToyModel, tokens: np.ndarray) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2 or tokens.shape[1] < 2:
        raise ValueError("token matrix must be (batch, T>=2)")
    if tokens.min() < 0 or tokens.max() >= model.vocab.size:
        raise ValueError("token id out of vocabulary range")
    return tokens


def batch_forward(model: ToyModel, tokens: np.ndarray) -> np.ndarray:
    """Logits for a (B, T) id matrix; returns (B, T-1, V)."""
    tokens = _check_tokens_matrix(model, tokens)
    emb = model.embeddings.lookup(tokens)  # (B, T, d_e)
    ctx = _context_means(emb)[:, :-1, :]  # (B, T-1, d_e)
    return ctx @ model.effective_weight().T


def forward(model: ToyModel, seq: TokenSequence) -> np.ndarray:
    """Next-token logits for one sequence; row i predicts token i+1."""
    seq.validate_for(model.vocab)
    return batch_forward(model, np.asarray(seq.tokens)[None, :])[0]


def per_token_losses(model: ToyModel, seq: TokenSequence) -> np.ndarray:
    """Cross-entropy of each next-token prediction, shape (T-1,)."""
    logits = forward(model, seq)
    targets = np.asarray(seq.tokens[1:], dtype=np.int64)
    logp = _log_softmax(logits)
    return -logp[np.arange(len(targets)), targets]


def batch_backward(
    model: ToyModel,
    tokens: np.ndarray,
    token_weights: np.ndarray | None = None,
    need_embed_grads: bool = False,
):
    """Gradient core shared by the per-sequence API and the batched trainer.

    Returns (losses, grad_a, grad_b, embed_grads).  losses is (B, T-1) and
    unweighted.  grad_a/grad_b differentiate sum_b sum_i z[b,i] * loss[b,i]
    (callers that want a mean divide by B themselves).  embed_grads, when
    requested, differentiates the full unweighted loss and has shape
    (B, T, d_e) with a zero final row per sequence.
    """
    tokens = _check_tokens_matrix(model, tokens)
    bsz, t = tokens.shape
    if token_weights is None:
        weights = np.ones((bsz, t - 1))
    else:
        weights = np.asarray(token_weights, dtype=np.float64)
        if weights.shape != (bsz, t - 1):
            raise ValueError(f"token weights must have shape {(bsz, t - 1)}")
        if weights.min() < 0:
            raise ValueError("token weights must be nonnegative")

    emb = model.embeddings.lookup(tokens)
    ctx = _context_means(emb)[:, :-1, :]  # (B, T-1, d_e)
    w_eff = model.effective_weight()
    logits = ctx @ w_eff.T
    logp = _log_softmax(logits)
    targets = tokens[:, 1:]
    rows = np.arange(bsz)[:, None]
    cols = np.arange(t - 1)[None, :]
    losses = -logp[rows, cols, targets]

    # dloss/dlogits = softmax - onehot(target)
    delta = np.exp(logp)
    delta[rows, cols, targets] -= 1.0

    adapter = model.adapter
    scale = adapter.alpha_lora / adapter.rank
    weighted = delta * weights[:, :, None]
    grad_m = scale * np.einsum("biv,bid->vd", weighted, ctx)
    grad_a = adapter.b.T @ grad_m
    grad_b = grad_m @ adapter.a.T

    embed_grads = None
    if need_embed_grads:
        # position j feeds every context i >= j with coefficient 1/(i+1)
        g_ctx = delta @ w_eff  # (B, T-1, d_e), full loss
        h = g_ctx / np.arange(1, t, dtype=np.float64)[None, :, None]
        embed_grads = np.zeros((bsz, t, emb.shape[-1]))
        embed_grads[:, : t - 1, :] = np.cumsum(h[:, ::-1, :], axis=1)[:, ::-1, :]

    return losses, grad_a, grad_b, embed_grads


def backward_weighted(
    model: ToyModel, seq: TokenSequence, token_weights
) -> BatchGradients:
    """Adapter gradients of the weighted loss plus full-loss embedding gradients."""
    seq.validate_for(model.vocab)
    weights = np.asarray(token_weights, dtype=np.float64)
    if weights.shape != (len(seq) - 1,):
        raise ValueError(f"expected {len(seq) - 1} token weights, got {weights.shape}")
    losses, grad_a, grad_b, embed_grads = batch_backward(
        model,
        np.asarray(seq.tokens)[None, :],
        weights[None, :],
        need_embed_grads=True,
    )
    return BatchGradients(grad_a, grad_b, embed_grads[0], losses[0])


def weighted_loss_from_embeddings(
    model: ToyModel,
    emb: np.ndarray,
    targets: np.ndarray,
    token_weights: np.ndarray | None = None,
) -> float:
    """Weighted loss with explicit per-position embeddings (finite-diff probe)."""
    emb = np.asarray(emb, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError("embedding matrix must be (T, d_e)")
    t = emb.shape[0]
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (t - 1,):
        raise ValueError("need T-1 targets")
    ctx = _context_means(emb)[:-1, :]
    logits = ctx @ model.effective_weight().T
    logp = _log_softmax(logits)
    losses = -logp[np.arange(t - 1), targets]
    if token_weights is None:
        return float(losses.sum())
    return float((np.asarray(token_weights, dtype=np.float64) * losses).sum())


def finite_difference_grad(loss_fn, x: float, h: float = 1e-5) -> float:
    """Central difference (f(x+h) - f(x-h)) / 2h; rejects non-finite values."""
    if not h > 0:
        raise ValueError("step size must be positive")
    hi = loss_fn(x + h)
    lo = loss_fn(x - h)
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise FloatingPointError("loss evaluated to a non-finite value")
    return (hi - lo) / (2.0 * h)


def sgd_step(params, grads, eta: float, clip: float | None = None):
    """Plain SGD with optional global-norm clipping across all arrays."""
    if not eta > 0:
        raise ValueError("learning rate must be positive")
    ps = [np.asarray(p, dtype=np.float64) for p in params]
    gs = [np.asarray(g, dtype=np.float64) for g in grads]
    if len(ps) != len(gs) or any(p.shape != g.shape for p, g in zip(ps, gs)):
        raise ValueError("params and grads must match in count and shape")
    if clip is not None:
        if not clip > 0:
            raise ValueError("clip threshold must be positive")
        norm = float(np.sqrt(sum(float((g**2).sum()) for g in gs)))
        if norm > clip:
            gs = [g * (clip / norm) for g in gs]
    return tuple(p - eta * g for p, g in zip(ps, gs))


def flatten_adapter(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Canonical coordinate order for codec/Fisher vectors: A row-major, then B."""
    return np.concatenate([np.asarray(a).ravel(), np.asarray(b).ravel()])


def unflatten_adapter(
    flat: np.ndarray, a_shape: tuple[int, int], b_shape: tuple[int, int]
) -> tuple[np.ndarray, np.ndarray]:
    flat = np.asarray(flat, dtype=np.float64)
    n_a = a_shape[0] * a_shape[1]
    if flat.shape != (n_a + b_shape[0] * b_shape[1],):
        raise ValueError("flat vector length does not match adapter shapes")
    return flat[:n_a].reshape(a_shape), flat[n_a:].reshape(b_shape)
