"""A single-block causal toy language model with one editable FFN value matrix.

For a token sequence ``x_0 .. x_{L-1}`` the model keeps a decayed running
context ``s_t = decay * s_{t-1} + embed[x_t]`` and reads out the last position::

    a_t      = phi(s_t @ W_k + b_k)     # the FFN activation A(x); b_k a scalar key bias
    h_t      = s_t + a_t @ V            # V is W_v or a substituted shard copy
    logits_t = h_t @ unembed

``phi`` is GELU by default; ReLU is available for sparse key activations.
Because ``a_t`` never depends on ``V``, the activation used for routing and
batching is identical under every value matrix, and the gradient of any
logit-level loss with respect to ``V`` is ``A^T @ dH``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .numeric import ShapeError, gelu, log_softmax, softmax
from .tensorio import load_tensors, save_tensors

EOS = 0
ACTIVATIONS = {"gelu": gelu, "relu": lambda x: np.maximum(x, 0.0)}


@dataclass
class ModelState:
    embed: np.ndarray      # vocab x hidden
    W_k: np.ndarray        # hidden x ffn
    W_v: np.ndarray        # ffn x hidden
    unembed: np.ndarray    # hidden x vocab
    decay: float = 0.7
    activation_fn: str = "gelu"
    key_bias: float = 0.0  # negative values sparsify the activation

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.embed.shape[1]

    @property
    def ffn_dim(self) -> int:
        return self.W_k.shape[1]

    def copy(self) -> "ModelState":
        return ModelState(self.embed.copy(), self.W_k.copy(), self.W_v.copy(),
                          self.unembed.copy(), self.decay, self.activation_fn, self.key_bias)


def init_model(vocab_size: int = 64, hidden_dim: int = 32, ffn_dim: int = 64, seed: int = 0,
               embed_scale: float = 1.0, key_scale: float = 1.0, value_scale: float = 1.0,
               unembed_scale: float = 1.0, decay: float = 0.7, key_bias: float = 0.0,
               activation_fn: str = "gelu", unembed_init: str = "random") -> ModelState:
    """Random toy model.

    ``unembed_init="successor"`` ties the output layer to a shuffled copy of
    the embeddings, so every token has one strongly preferred successor and
    the base model makes confident, well-separated predictions.
    """
    if activation_fn not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation_fn!r}")
    if unembed_init not in ("random", "successor"):
        raise ValueError(f"unknown unembedding init {unembed_init!r}")
    rng = np.random.default_rng(seed)
    embed = rng.normal(0.0, embed_scale, size=(vocab_size, hidden_dim))
    W_k = rng.normal(0.0, key_scale / np.sqrt(hidden_dim), size=(hidden_dim, ffn_dim))
    W_v = rng.normal(0.0, value_scale / np.sqrt(ffn_dim), size=(ffn_dim, hidden_dim))
    unembed = rng.normal(0.0, unembed_scale / np.sqrt(hidden_dim), size=(hidden_dim, vocab_size))
    if unembed_init == "successor":
        succ = rng.permutation(vocab_size)
        unembed = np.empty_like(unembed)
        unembed[:, succ] = embed.T * (unembed_scale / (embed_scale * np.sqrt(hidden_dim)))
    return ModelState(embed, W_k, W_v, unembed, decay, activation_fn, key_bias)


def _check_tokens(model: ModelState, tokens: Sequence[int]) -> np.ndarray:
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ValueError("token sequence must be a non-empty 1-D list")
    if toks.min() < 0 or toks.max() >= model.vocab_size:
        raise ValueError(f"token id out of range [0, {model.vocab_size})")
    return toks


def _value(model: ModelState, value_matrix: Optional[np.ndarray]) -> np.ndarray:
    if value_matrix is None:
        return model.W_v
    if value_matrix.shape != model.W_v.shape:
        raise ShapeError(f"value matrix shape {value_matrix.shape} does not match W_v {model.W_v.shape}")
    return value_matrix


def context_states(model: ModelState, tokens: Sequence[int]) -> np.ndarray:
    toks = _check_tokens(model, tokens)
    E = model.embed[toks]
    S = np.empty_like(E)
    s = np.zeros(model.hidden_dim)
    for t in range(len(toks)):
        s = model.decay * s + E[t]
        S[t] = s
    return S


def ffn_activation(model: ModelState, S: np.ndarray) -> np.ndarray:
    return ACTIVATIONS[model.activation_fn](S @ model.W_k + model.key_bias)


def activations(model: ModelState, tokens: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Context states and FFN activations at every position."""
    S = context_states(model, tokens)
    return S, ffn_activation(model, S)


def activation(model: ModelState, tokens: Sequence[int]) -> np.ndarray:
    """A(x): the FFN activation at the final position."""
    return activations(model, tokens)[1][-1]


def forward(model: ModelState, tokens: Sequence[int],
            value_matrix: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    V = _value(model, value_matrix)
    S, A = activations(model, tokens)
    logits = (S + A @ V) @ model.unembed
    return logits, A[-1]


@dataclass
class TeacherForced:
    """Cached per-position quantities of ``prompt + target`` that do not depend on V.

    Row ``t`` holds the context that predicts ``target[t]``.
    """
    S: np.ndarray
    A: np.ndarray
    target: np.ndarray
    prompt_activation: np.ndarray = field(repr=False)


def teacher_forced(model: ModelState, prompt: Sequence[int], target: Sequence[int]) -> TeacherForced:
    if len(target) == 0:
        raise ValueError("target must contain at least one token")
    seq = list(prompt) + list(target)
    S, A = activations(model, seq)
    lo = len(prompt) - 1
    hi = lo + len(target)
    return TeacherForced(S[lo:hi], A[lo:hi], np.asarray(target, dtype=np.int64), A[lo])


def stack_teacher_forced(tfs: Sequence[TeacherForced]) -> TeacherForced:
    """Concatenate the positions of several caches; CE of the stack is the sum of their CEs."""
    if not tfs:
        raise ValueError("need at least one cache")
    return TeacherForced(np.vstack([t.S for t in tfs]), np.vstack([t.A for t in tfs]),
                         np.concatenate([t.target for t in tfs]), tfs[0].prompt_activation)


def ce_from_cache(model: ModelState, tf: TeacherForced, V: np.ndarray,
                  with_grad: bool = False):
    """Summed next-token CE of ``tf.target``; optionally its gradient w.r.t. V."""
    logits = (tf.S + tf.A @ V) @ model.unembed
    logp = log_softmax(logits)
    idx = np.arange(len(tf.target))
    loss = float(-np.sum(logp[idx, tf.target]))
    if not with_grad:
        return loss
    dlogits = np.exp(logp)
    dlogits[idx, tf.target] -= 1.0
    dH = dlogits @ model.unembed.T
    return loss, tf.A.T @ dH


def autoreg_ce(model: ModelState, prompt: Sequence[int], target: Sequence[int],
               value_matrix: Optional[np.ndarray] = None) -> float:
    """-sum_t log p(y_t | y_<t, x) under the given value matrix."""
    V = _value(model, value_matrix)
    return ce_from_cache(model, teacher_forced(model, prompt, target), V)


def autoreg_ce_grad(model: ModelState, prompt: Sequence[int], target: Sequence[int],
                    value_matrix: Optional[np.ndarray] = None) -> Tuple[float, np.ndarray]:
    V = _value(model, value_matrix)
    return ce_from_cache(model, teacher_forced(model, prompt, target), V, with_grad=True)


def decode_from_states(model: ModelState, S: np.ndarray, max_len: int,
                       value_matrix: Optional[np.ndarray] = None) -> List[List[int]]:
    """Greedy decoding of several contexts at once, starting from their final states.

    Every row decodes independently; a row that emits EOS stops (EOS is not
    included) while the others continue.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    V = _value(model, value_matrix)
    S = np.array(S, dtype=np.float64, ndmin=2)
    out: List[List[int]] = [[] for _ in range(S.shape[0])]
    live = np.arange(S.shape[0])
    for _ in range(max_len):
        if live.size == 0:
            break
        Sl = S[live]
        logits = (Sl + ffn_activation(model, Sl) @ V) @ model.unembed
        nxt = np.argmax(logits, axis=1)
        keep = nxt != EOS
        for row, tok in zip(live[keep], nxt[keep]):
            out[row].append(int(tok))
        live = live[keep]
        S[live] = model.decay * S[live] + model.embed[nxt[keep]]
    return out


def greedy_decode(model: ModelState, prompt: Sequence[int], max_len: int,
                  value_matrix: Optional[np.ndarray] = None) -> List[int]:
    """Argmax decoding; stops at EOS (not emitted) or after ``max_len`` tokens."""
    s = context_states(model, prompt)[-1]
    return decode_from_states(model, s[None, :], max_len, value_matrix)[0]


def next_token_probs(model: ModelState, tokens: Sequence[int],
                     value_matrix: Optional[np.ndarray] = None) -> np.ndarray:
    logits, _ = forward(model, tokens, value_matrix)
    return softmax(logits)


def save_model(path, model: ModelState) -> None:
    save_tensors(path, {"embed": model.embed, "W_k": model.W_k, "W_v": model.W_v,
                        "unembed": model.unembed},
                 meta={"decay": model.decay, "activation_fn": model.activation_fn,
                       "key_bias": model.key_bias})


def load_model(path) -> ModelState:
    t, meta = load_tensors(path)
    return ModelState(t["embed"], t["W_k"], t["W_v"], t["unembed"],
                      float(meta["decay"]), meta.get("activation_fn", "gelu"),
                      float(meta.get("key_bias", 0.0)))
