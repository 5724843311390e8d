"""Tied-embedding CIFG-LSTM next-word predictor.

The model reads an embedded token ``x_t`` (dimension ``d``), runs one
coupled-input-forget-gate LSTM layer (hidden size ``h``) and maps the hidden
state back to embedding space with a projection ``P`` (h x d). Output logits
are ``(h_t P) E^T + b_out``, so the input embedding ``E`` doubles as the
output layer.

Cell equations, gates ordered ``[f | g | o]`` in every weight block::

    z_t = x_t W_x + h_{t-1} W_h + b
    f = sigmoid(z_f);  g = tanh(z_g);  o = sigmoid(z_o)
    c_t = f * c_{t-1} + (1 - f) * g
    h_t = o * tanh(c_t)

There are no peephole connections. Everything is float64.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from fedmem import kernels
from fedmem.vocab import BOS, EOS

_CHECKPOINT_MAGIC = b"FEDMEMCK"
_CHECKPOINT_VERSION = 1
_EVAL_CHUNK = 2048


def _layout(vocab_size: int, embed_dim: int, hidden_dim: int):
    shapes = [
        ("embedding", (vocab_size, embed_dim)),
        ("w_x", (embed_dim, 3 * hidden_dim)),
        ("w_h", (hidden_dim, 3 * hidden_dim)),
        ("bias", (3 * hidden_dim,)),
        ("proj", (hidden_dim, embed_dim)),
        ("out_bias", (vocab_size,)),
    ]
    offsets = {}
    start = 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        offsets[name] = (start, start + size, shape)
        start += size
    return offsets, start


class ModelParams:
    """All model weights, stored in one flat float64 vector.

    The named matrices are views into ``flat``; there is a single embedding
    matrix used both for input lookup and output logits.
    """

    def __init__(self, vocab_size: int, embed_dim: int, hidden_dim: int,
                 flat: np.ndarray | None = None):
        if min(vocab_size, embed_dim, hidden_dim) < 1:
            raise ValueError("model dimensions must be positive")
        self.vocab_size = int(vocab_size)
        self.embed_dim = int(embed_dim)
        self.hidden_dim = int(hidden_dim)
        self._offsets, n = _layout(self.vocab_size, self.embed_dim, self.hidden_dim)
        if flat is None:
            flat = np.zeros(n)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (n,):
                raise ValueError(f"flat vector has shape {flat.shape}, expected ({n},)")
        self.flat = flat

    @staticmethod
    def count(vocab_size: int, embed_dim: int, hidden_dim: int) -> int:
        return _layout(vocab_size, embed_dim, hidden_dim)[1]

    @property
    def num_params(self) -> int:
        return self.flat.size

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vocab_size, self.embed_dim, self.hidden_dim

    def _view(self, name):
        lo, hi, shape = self._offsets[name]
        return self.flat[lo:hi].reshape(shape)

    embedding = property(lambda self: self._view("embedding"))
    w_x = property(lambda self: self._view("w_x"))
    w_h = property(lambda self: self._view("w_h"))
    bias = property(lambda self: self._view("bias"))
    proj = property(lambda self: self._view("proj"))
    out_bias = property(lambda self: self._view("out_bias"))

    @classmethod
    def initialize(cls, vocab_size: int, embed_dim: int, hidden_dim: int,
                   rng: np.random.Generator, forget_bias: float = 1.0) -> ModelParams:
        """Uniform fan-in scaled weights, forget-gate bias set to ``forget_bias``."""
        p = cls(vocab_size, embed_dim, hidden_dim)
        p.embedding[:] = rng.uniform(-0.1, 0.1, p.embedding.shape)
        for name, fan_in in (("w_x", embed_dim), ("w_h", hidden_dim), ("proj", hidden_dim)):
            lim = 1.0 / math.sqrt(fan_in)
            p._view(name)[:] = rng.uniform(-lim, lim, p._view(name).shape)
        p.bias[:hidden_dim] = forget_bias
        return p

    def copy(self) -> ModelParams:
        return ModelParams(*self.dims, flat=self.flat.copy())

    def like(self, flat: np.ndarray) -> ModelParams:
        return ModelParams(*self.dims, flat=flat)

    def __repr__(self):
        v, d, h = self.dims
        return f"ModelParams(V={v}, d={d}, h={h}, n={self.num_params})"


@dataclass
class SequenceBatch:
    """Padded next-word prediction batch.

    ``inputs[b, t]`` is fed at step ``t`` and ``targets[b, t]`` is the token
    to predict there. Positions with ``mask == 0`` are padding.
    """

    inputs: np.ndarray
    targets: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.int64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.int64))
        self.mask = np.atleast_2d(np.asarray(self.mask, dtype=bool))
        if not (self.inputs.shape == self.targets.shape == self.mask.shape):
            raise ValueError("inputs, targets and mask must share a shape")

    @classmethod
    def from_sentences(cls, sentences: Sequence[Sequence[int]]) -> SequenceBatch:
        """Wrap each sentence in BOS/EOS and pad to the longest one."""
        if len(sentences) == 0:
            raise ValueError("empty batch")
        steps = max(len(s) for s in sentences) + 1
        inputs = np.full((len(sentences), steps), EOS, dtype=np.int64)
        targets = np.full((len(sentences), steps), EOS, dtype=np.int64)
        mask = np.zeros((len(sentences), steps), dtype=bool)
        for i, s in enumerate(sentences):
            n = len(s)
            inputs[i, 0] = BOS
            inputs[i, 1:n + 1] = s
            targets[i, :n] = s
            targets[i, n] = EOS
            mask[i, :n + 1] = True
        return cls(inputs, targets, mask)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    @property
    def num_targets(self) -> int:
        return int(self.mask.sum())


def _check_tokens(params: ModelParams, tokens) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= params.vocab_size):
        raise ValueError(f"token index out of range [0, {params.vocab_size})")
    return arr


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def _zero_state(params: ModelParams, batch: int):
    h = np.zeros((batch, params.hidden_dim))
    return h, h.copy()


def _run(params: ModelParams, inputs: np.ndarray, h0=None, c0=None):
    """Recurrence over (B, T) token ids; returns kernel outputs, time-major."""
    batch = inputs.shape[0]
    if h0 is None:
        h0, c0 = _zero_state(params, batch)
    emb = params.embedding[inputs.T]  # (T, B, d)
    steps = emb.shape[0]
    xproj = emb.reshape(-1, params.embed_dim) @ params.w_x + params.bias
    gates, cells, tanh_cells, hiddens = kernels.cifg_forward(
        xproj.reshape(steps, batch, -1), params.w_h, h0, c0)
    return emb, gates, cells, tanh_cells, hiddens


def _output_log_probs(params: ModelParams, hiddens: np.ndarray) -> np.ndarray:
    logits = (hiddens @ params.proj) @ params.embedding.T + params.out_bias
    return _log_softmax(logits)


def forward(params: ModelParams, prefix: Sequence[int]) -> np.ndarray:
    """Next-token distributions after each prefix position, shape (len, V)."""
    tokens = _check_tokens(params, prefix)
    if tokens.ndim != 1 or tokens.size == 0:
        raise ValueError("prefix must be a non-empty token sequence")
    hiddens = _run(params, tokens[None, :])[4][:, 0, :]
    logits = (hiddens @ params.proj) @ params.embedding.T + params.out_bias
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_gradient(params: ModelParams, batch: SequenceBatch,
                      reduction: str = "mean") -> tuple[float, ModelParams]:
    """Cross-entropy next-word loss and its exact gradient.

    ``reduction="mean"`` averages over unmasked targets in the batch;
    ``"sum"`` adds them up.
    """
    if batch.size == 0 or batch.num_targets == 0:
        raise ValueError("empty batch")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    _check_tokens(params, batch.inputs)
    _check_tokens(params, batch.targets)
    hid = params.hidden_dim
    emb, gates, cells, tanh_cells, hiddens = _run(params, batch.inputs)
    steps, bsz = hiddens.shape[:2]

    # output layer only on real positions; time-major flattening
    valid = np.flatnonzero(batch.mask.T.ravel())
    h_valid = hiddens.reshape(-1, hid)[valid]
    targets = batch.targets.T.ravel()[valid]
    y = h_valid @ params.proj
    logits = y @ params.embedding.T + params.out_bias
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    total = probs.sum(axis=1)
    rows = np.arange(valid.size)
    nll = np.log(total) - logits[rows, targets]
    norm = float(valid.size) if reduction == "mean" else 1.0
    loss = float(nll.sum()) / norm

    grad = ModelParams(*params.dims)
    # softmax minus one-hot, scaled by the reduction
    dlogits = probs
    dlogits /= (total * norm)[:, None]
    dlogits[rows, targets] -= 1.0 / norm
    grad.out_bias[:] = dlogits.sum(axis=0)
    grad.embedding[:] = dlogits.T @ y
    dy = dlogits @ params.embedding
    grad.proj[:] = h_valid.T @ dy
    dhiddens = np.zeros((steps * bsz, hid))
    dhiddens[valid] = dy @ params.proj.T
    c0 = np.zeros((bsz, hid))
    dz = kernels.cifg_backward(dhiddens.reshape(steps, bsz, hid), params.w_h,
                               gates, cells, tanh_cells, c0)
    dz2 = dz.reshape(-1, 3 * hid)
    h_prev = np.concatenate([np.zeros((1, bsz, hid)), hiddens[:-1]]).reshape(-1, hid)
    grad.w_h[:] = h_prev.T @ dz2
    emb2 = emb.reshape(-1, params.embed_dim)
    grad.w_x[:] = emb2.T @ dz2
    grad.bias[:] = dz2.sum(axis=0)
    np.add.at(grad.embedding, batch.inputs.T.ravel(), dz2 @ params.w_x.T)
    return loss, grad


def token_losses(params: ModelParams, context: Sequence[int],
                 suffix: Sequence[int]) -> np.ndarray:
    """Per-token ``-log Pr(s_i | context, s_<i)`` for each suffix token."""
    ctx = _check_tokens(params, context)
    suf = _check_tokens(params, suffix)
    if ctx.size == 0 or suf.size == 0:
        raise ValueError("context and suffix must be non-empty")
    seq = np.concatenate([ctx, suf])
    hiddens = _run(params, seq[None, :-1])[4][:, 0, :]
    logp = _output_log_probs(params, hiddens[ctx.size - 1:])
    return -logp[np.arange(suf.size), suf]


def log_perplexity(params: ModelParams, context: Sequence[int],
                   suffix: Sequence[int]) -> float:
    """Sum of negative log-probabilities of ``suffix`` given ``context``."""
    return math.fsum(token_losses(params, context, suffix))


def _context_state(params: ModelParams, context: np.ndarray):
    _, _, cells, _, hiddens = _run(params, context[None, :])
    h, c = hiddens[-1], cells[-1]
    return h, c, _output_log_probs(params, h)[0]


def log_perplexities(params: ModelParams, context: Sequence[int],
                     suffixes: np.ndarray) -> np.ndarray:
    """Batched ``log_perplexity`` for many equal-length suffixes.

    The context is run once and its final state is shared by every suffix.
    """
    ctx = _check_tokens(params, context)
    sufs = np.atleast_2d(_check_tokens(params, suffixes))
    if ctx.size == 0 or sufs.shape[1] == 0:
        raise ValueError("context and suffixes must be non-empty")
    h, c, first = _context_state(params, ctx)
    out = np.empty(sufs.shape[0])
    for lo in range(0, sufs.shape[0], _EVAL_CHUNK):
        chunk = sufs[lo:lo + _EVAL_CHUNK]
        n, length = chunk.shape
        losses = np.empty((n, length))
        losses[:, 0] = -first[chunk[:, 0]]
        if length > 1:
            h0 = np.broadcast_to(h, (n, params.hidden_dim))
            c0 = np.broadcast_to(c, (n, params.hidden_dim))
            hiddens = _run(params, chunk[:, :-1], h0, c0)[4]
            logp = _output_log_probs(params, hiddens)  # (L-1, n, V)
            steps = np.arange(length - 1)[:, None]
            losses[:, 1:] = -logp[steps, np.arange(n)[None, :], chunk[:, 1:].T].T
        out[lo:lo + n] = [math.fsum(row) for row in losses]
    return out


def beam_search(params: ModelParams, prefix: Sequence[int], length: int,
                width: int) -> list[tuple[tuple[int, ...], float]]:
    """Best-first continuations of ``prefix`` by log-perplexity.

    At each step every beam is extended by every token and the ``width``
    lowest cumulative scores survive. Ties go to the lexicographically
    smaller token sequence.
    """
    if length < 1 or width < 1:
        raise ValueError("length and width must be >= 1")
    ctx = _check_tokens(params, prefix)
    if ctx.size == 0:
        raise ValueError("prefix must be non-empty")
    vocab = params.vocab_size
    h, c, logp = _context_state(params, ctx)
    seqs = np.zeros((1, 0), dtype=np.int64)
    # per-beam token losses kept so final scores use the same summation as log_perplexity
    losses = np.zeros((1, 0))
    logp = logp[None, :]
    hs, cs = h, c
    for step in range(length):
        nbeams = seqs.shape[0]
        cand_loss = -logp  # (nbeams, V)
        cand_score = losses.sum(axis=1)[:, None] + cand_loss
        beam_idx = np.repeat(np.arange(nbeams), vocab)
        tok = np.tile(np.arange(vocab), nbeams)
        keys = [tok] + [seqs[beam_idx, k] for k in range(step - 1, -1, -1)]
        order = np.lexsort(keys + [cand_score.ravel()])[:width]
        parent, new_tok = beam_idx[order], tok[order]
        seqs = np.concatenate([seqs[parent], new_tok[:, None]], axis=1)
        losses = np.concatenate([losses[parent], cand_loss[parent, new_tok][:, None]], axis=1)
        if step + 1 < length:
            _, _, cells, _, hiddens = _run(params, new_tok[:, None], hs[parent], cs[parent])
            hs, cs = hiddens[-1], cells[-1]
            logp = _output_log_probs(params, hs)
    scores = np.array([math.fsum(row) for row in losses])
    final = np.lexsort([seqs[:, k] for k in range(length - 1, -1, -1)] + [scores])
    return [(tuple(int(t) for t in seqs[i]), float(scores[i])) for i in final]


def top_k_recall(params: ModelParams, corpus: Sequence[Sequence[int]], k: int,
                 batch_size: int = 256) -> float:
    """Fraction of words whose true value is among the ``k`` best predictions.

    Sentences are wrapped in BOS/EOS; every word position is scored, the EOS
    target is not. Equal probabilities rank the lower token index first.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    sentences = [s for s in corpus if len(s) > 0]
    if not sentences:
        raise ValueError("empty corpus")
    hits = 0
    total = 0
    for lo in range(0, len(sentences), batch_size):
        batch = SequenceBatch.from_sentences(sentences[lo:lo + batch_size])
        _check_tokens(params, batch.inputs)
        hiddens = _run(params, batch.inputs)[4]
        pos = np.flatnonzero((batch.mask & _not_final(batch)).T.ravel())
        logp = _output_log_probs(params, hiddens.reshape(-1, params.hidden_dim)[pos])
        targets = batch.targets.T.ravel()[pos]
        true_lp = logp[np.arange(pos.size), targets][:, None]
        ids = np.arange(params.vocab_size)[None, :]
        better = (logp > true_lp) | ((logp == true_lp) & (ids < targets[:, None]))
        hits += int((better.sum(axis=1) < k).sum())
        total += pos.size
    return hits / total


def _not_final(batch: SequenceBatch) -> np.ndarray:
    # True except at each row's last unmasked position (the EOS target)
    lengths = batch.mask.sum(axis=1)
    cols = np.arange(batch.mask.shape[1])[None, :]
    return cols < (lengths[:, None] - 1)


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    """Binary layout: magic, u32 version, u64 V, d, h, then float64 weights (LE)."""
    header = _CHECKPOINT_MAGIC + struct.pack("<IQQQ", _CHECKPOINT_VERSION, *params.dims)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(params.flat.astype("<f8").tobytes())


def load_checkpoint(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:8] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, v, d, h = struct.unpack("<IQQQ", data[8:36])
    if version != _CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    flat = np.frombuffer(data[36:], dtype="<f8").astype(np.float64)
    return ModelParams(v, d, h, flat=flat)
