"""A tiny trainable autoregressive token model.

The model is deliberately the smallest thing whose token-level log
probabilities, behavior snapshots, and clipped policy-gradient updates are
structurally identical to a large language model's: the context is encoded as
the mean of its token embeddings, passed through one tanh hidden layer, and
projected to vocabulary logits. All gradients are derived by hand.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, TrainingError

BOS, EOS, NEWLINE = "<BOS>", "<EOS>", "<NL>"
MAX_VOCAB = 128


@dataclass(frozen=True)
class Vocab:
    """Word-level vocabulary with BOS/EOS/NEWLINE specials at the front.

    Text is tokenized by whitespace; "\\n" maps to the NEWLINE token. On text
    with canonical spacing (single spaces, bare newlines) tokenize/detokenize
    are mutual inverses.
    """

    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:3] != (BOS, EOS, NEWLINE):
            raise ConfigError("vocab must start with BOS, EOS, NEWLINE")
        if len(self.tokens) > MAX_VOCAB:
            raise ConfigError(f"vocab size {len(self.tokens)} exceeds {MAX_VOCAB}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("duplicate tokens in vocab")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    bos_id, eos_id, newline_id = 0, 1, 2

    def token_id(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise ConfigError(f"token {token!r} not in vocabulary") from None

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        for li, line in enumerate(text.split("\n")):
            if li > 0:
                ids.append(self.newline_id)
            ids.extend(self.token_id(w) for w in line.split())
        return ids

    def detokenize(self, ids: Iterable[int]) -> str:
        lines: list[list[str]] = [[]]
        for i in ids:
            tok = self.tokens[i]
            if i == self.newline_id:
                lines.append([])
            else:
                lines[-1].append(tok)
        return "\n".join(" ".join(line) for line in lines)


def build_vocab(words: Iterable[str]) -> Vocab:
    ordered = sorted(set(words) - {BOS, EOS, NEWLINE})
    return Vocab((BOS, EOS, NEWLINE, *ordered))


@dataclass
class LmParams:
    embed: np.ndarray   # (V, d_e)
    w1: np.ndarray      # (d_h, d_e)
    b1: np.ndarray      # (d_h,)
    w_out: np.ndarray   # (V, d_h)
    b_out: np.ndarray   # (V,)

    @property
    def vocab_size(self) -> int:
        return self.embed.shape[0]

    @property
    def d_e(self) -> int:
        return self.embed.shape[1]

    @property
    def d_h(self) -> int:
        return self.w1.shape[0]

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self._arrays()])

    def _arrays(self) -> tuple[np.ndarray, ...]:
        return (self.embed, self.w1, self.b1, self.w_out, self.b_out)

    @classmethod
    def unflatten(cls, flat: np.ndarray, vocab_size: int, d_e: int, d_h: int) -> "LmParams":
        shapes = [(vocab_size, d_e), (d_h, d_e), (d_h,), (vocab_size, d_h), (vocab_size,)]
        total = sum(int(np.prod(s)) for s in shapes)
        if flat.size != total:
            raise ConfigError(f"flat vector has {flat.size} values, model needs {total}")
        out, at = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.array(flat[at:at + n], dtype=np.float64).reshape(s))
            at += n
        return cls(*out)


def init_lm_params(vocab_size: int, d_e: int = 16, d_h: int = 32,
                   rng: np.random.Generator | None = None,
                   init_scale: float = 0.08) -> LmParams:
    rng = rng or np.random.default_rng(0)
    u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)
    return LmParams(u(vocab_size, d_e), u(d_h, d_e), u(d_h), u(vocab_size, d_h), u(vocab_size))


def zero_lm_params(vocab_size: int, d_e: int = 16, d_h: int = 32) -> LmParams:
    z = np.zeros
    return LmParams(z((vocab_size, d_e)), z((d_h, d_e)), z(d_h), z((vocab_size, d_h)), z(vocab_size))


def snapshot(params: LmParams) -> LmParams:
    """Deep copy; mutating either side never affects the other."""
    return LmParams(*(a.copy() for a in params._arrays()))


def restore(copy: LmParams) -> LmParams:
    return snapshot(copy)


def _check_ids(params: LmParams, ids: Sequence[int]) -> None:
    for i in ids:
        if not 0 <= i < params.vocab_size:
            raise ConfigError(f"token id {i} out of range [0, {params.vocab_size})")


def forward_logits(params: LmParams, context: Sequence[int]) -> np.ndarray:
    """Vocabulary logits for the next token after ``context``."""
    if len(context) == 0:
        raise ConfigError("context must be non-empty")
    _check_ids(params, context)
    mean_e = params.embed[list(context)].mean(axis=0)
    h = np.tanh(params.w1 @ mean_e + params.b1)
    return params.w_out @ h + params.b_out


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


@dataclass(frozen=True)
class ScoredSequence:
    token_ids: tuple[int, ...]
    per_token_logprob: tuple[float, ...]
    mean_logprob: float
    logprob: float  # the reduction-selected scalar (mean or sum)


class _ForwardCache:
    """Teacher-forced forward pass over one (prompt, output) pair, caching the
    intermediates the backward pass needs."""

    def __init__(self, params: LmParams, prompt: Sequence[int], output: Sequence[int]):
        if len(prompt) == 0:
            raise ConfigError("prompt must be non-empty")
        if len(output) == 0:
            raise ConfigError("output must be non-empty")
        ids = list(prompt) + list(output)
        _check_ids(params, ids)
        self.ids = ids
        self.prompt_len = len(prompt)
        self.out_len = len(output)
        # context for output position j is ids[: prompt_len + j]
        emb = params.embed[ids[:-1]]                     # embeddings of all context tokens
        cums = np.cumsum(emb, axis=0)                    # prefix sums
        lens = np.arange(self.prompt_len, len(ids), dtype=np.float64)
        self.means = cums[self.prompt_len - 1:] / lens[:, None]     # (T, d_e)
        self.pre = self.means @ params.w1.T + params.b1             # (T, d_h)
        self.h = np.tanh(self.pre)
        self.logits = self.h @ params.w_out.T + params.b_out        # (T, V)
        self.logprobs = log_softmax(self.logits)
        self.context_lens = lens

    def output_logprobs(self) -> np.ndarray:
        return self.logprobs[np.arange(self.out_len), self.ids[self.prompt_len:]]

    def backward(self, params: LmParams, dlogits: np.ndarray, grads: dict) -> None:
        grads["w_out"] += dlogits.T @ self.h
        grads["b_out"] += dlogits.sum(axis=0)
        dh = dlogits @ params.w_out
        da = dh * (1.0 - self.h * self.h)
        grads["w1"] += da.T @ self.means
        grads["b1"] += da.sum(axis=0)
        dmeans = da @ params.w1
        scaled = dmeans / self.context_lens[:, None]     # (T, d_e)
        # Token i of the longest context receives the suffix sum of `scaled`
        # over every position whose context includes it.
        suffix = np.cumsum(scaled[::-1], axis=0)[::-1]
        n_ctx = len(self.ids) - 1
        per_token = np.empty((n_ctx, scaled.shape[1]))
        per_token[: self.prompt_len] = suffix[0]
        if self.out_len > 1:
            per_token[self.prompt_len:] = suffix[1:]
        np.add.at(grads["embed"], self.ids[:n_ctx], per_token)


def sequence_logprob(params: LmParams, prompt: Sequence[int], continuation: Sequence[int],
                     reduction: str = "mean") -> ScoredSequence:
    """Teacher-forced log probability of ``continuation`` given ``prompt``."""
    if reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown reduction {reduction!r}")
    cache = _ForwardCache(params, prompt, continuation)
    per = cache.output_logprobs()
    mean_lp = float(per.mean())
    scalar = mean_lp if reduction == "mean" else float(per.sum())
    return ScoredSequence(tuple(continuation), tuple(float(x) for x in per), mean_lp, scalar)


def generate(params: LmParams, prompt: Sequence[int], max_tokens: int,
             temperature: float, stop: set[int] | frozenset[int],
             rng: np.random.Generator) -> list[int]:
    """Sample autoregressively until a stop token, EOS, or ``max_tokens``.

    The stop token (or EOS) that halts generation is included in the output.
    Temperature at or below 1e-8 decodes greedily.
    """
    if max_tokens < 1:
        raise ConfigError("max_tokens must be >= 1")
    context = list(prompt)
    out: list[int] = []
    eos = 1  # Vocab.eos_id
    for _ in range(max_tokens):
        logits = forward_logits(params, context)
        if temperature <= 1e-8:
            nxt = int(np.argmax(logits))
        else:
            p = softmax(logits / temperature)
            nxt = int(rng.choice(len(p), p=p))
        out.append(nxt)
        context.append(nxt)
        if nxt in stop or nxt == eos:
            break
    return out


# Callback contract for loss_and_grad: receives the list of per-sample
# position blocks and returns (scalar loss, per-sample dlogits arrays).
LossFn = Callable[[list["PositionBlock"]], tuple[float, list[np.ndarray]]]


@dataclass(frozen=True)
class PositionBlock:
    """Per-sample teacher-forced distributions at each output position."""

    output_ids: tuple[int, ...]
    logits: np.ndarray      # (T, V)
    logprobs: np.ndarray    # (T, V)

    @property
    def token_logprobs(self) -> np.ndarray:
        return self.logprobs[np.arange(len(self.output_ids)), list(self.output_ids)]


def loss_and_grad(params: LmParams, batch: Sequence[tuple[Sequence[int], Sequence[int]]],
                  loss_fn: LossFn) -> tuple[float, np.ndarray]:
    """Exact analytic gradient of any differentiable per-token loss.

    ``batch`` is a list of (prompt_ids, output_ids) pairs; ``loss_fn`` sees the
    teacher-forced logits/logprobs for every output position and returns the
    scalar loss together with its gradient w.r.t. each logits array. The PPO
    surrogate, KL penalties, and SFT cross-entropy all route through here.
    """
    caches = [_ForwardCache(params, p, o) for p, o in batch]
    blocks = [PositionBlock(tuple(c.ids[c.prompt_len:]), c.logits, c.logprobs) for c in caches]
    loss, dlogits_list = loss_fn(blocks)
    if not np.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss!r} in token model update")
    grads = {
        "embed": np.zeros_like(params.embed),
        "w1": np.zeros_like(params.w1),
        "b1": np.zeros_like(params.b1),
        "w_out": np.zeros_like(params.w_out),
        "b_out": np.zeros_like(params.b_out),
    }
    for cache, dlogits in zip(caches, dlogits_list):
        if dlogits.shape != cache.logits.shape:
            raise TrainingError("dlogits shape mismatch from loss callback")
        cache.backward(params, dlogits, grads)
    flat_grad = np.concatenate([grads[k].ravel() for k in ("embed", "w1", "b1", "w_out", "b_out")])
    if not np.all(np.isfinite(flat_grad)):
        raise TrainingError("non-finite gradient in token model update")
    return float(loss), flat_grad


def hidden_features(params: LmParams, context: Sequence[int]):
    """Hidden-layer activation for ``context`` plus the cache needed to push a
    gradient back through it (used by the value head of the actor-critic
    baseline)."""
    if len(context) == 0:
        raise ConfigError("context must be non-empty")
    _check_ids(params, context)
    mean_e = params.embed[list(context)].mean(axis=0)
    h = np.tanh(params.w1 @ mean_e + params.b1)
    return h, (list(context), mean_e, h)


def backward_from_hidden(params: LmParams, cache, dh: np.ndarray) -> np.ndarray:
    """Flat-gradient contribution of a loss whose gradient at the hidden layer
    is ``dh``."""
    context, mean_e, h = cache
    da = dh * (1.0 - h * h)
    g_w1 = np.outer(da, mean_e)
    g_b1 = da
    dmean = params.w1.T @ da
    g_embed = np.zeros_like(params.embed)
    np.add.at(g_embed, context, dmean[None, :] / len(context))
    return np.concatenate([
        g_embed.ravel(), g_w1.ravel(), g_b1.ravel(),
        np.zeros_like(params.w_out).ravel(), np.zeros_like(params.b_out).ravel(),
    ])


def save_lm(path, params: LmParams) -> None:
    save_checkpoint(path, {"kind": "token_lm", "vocab_size": params.vocab_size,
                           "d_e": params.d_e, "d_h": params.d_h}, params.flatten())


def load_lm(path) -> LmParams:
    header, flat = load_checkpoint(path)
    if header.get("kind") != "token_lm":
        raise ConfigError(f"{path} is not a token model checkpoint")
    return LmParams.unflatten(flat, header["vocab_size"], header["d_e"], header["d_h"])
