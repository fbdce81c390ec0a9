"""Learned latent model: history encoder, action-conditioned dynamics with a
reward head, a categorical (two-hot) value head, and a policy head.

The encoder is a gated recurrence over interleaved (observation-embedding,
action-embedding) pairs; observations are embedded as the mean of their token
embeddings from the model's own table. Dynamics is a two-layer tanh MLP on
[latent; action embedding]. All gradients are hand-derived and verified
against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, TrainingError

_COS_EPS = 1e-8


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.z)):
            raise TrainingError("non-finite latent state")


@dataclass(frozen=True)
class ValueSupport:
    """Evenly spaced symmetric bins for the categorical value head."""

    v_max: float
    count: int

    def __post_init__(self):
        if self.count < 3 or self.count % 2 == 0:
            raise ConfigError("support count must be an odd integer >= 3")
        if self.v_max <= 0:
            raise ConfigError("v_max must be positive")

    @property
    def bins(self) -> np.ndarray:
        return np.linspace(-self.v_max, self.v_max, self.count)

    @property
    def spacing(self) -> float:
        return 2.0 * self.v_max / (self.count - 1)


def value_encode(v: float, support: ValueSupport) -> np.ndarray:
    """Two-hot weights: linear interpolation onto the two nearest bins.
    Values outside the support are clamped."""
    v = float(np.clip(v, -support.v_max, support.v_max))
    pos = (v + support.v_max) / support.spacing
    lo = int(np.clip(np.floor(pos), 0, support.count - 2))
    frac = pos - lo
    w = np.zeros(support.count)
    w[lo] = 1.0 - frac
    w[lo + 1] = frac
    return w


def value_decode(probs: np.ndarray, support: ValueSupport) -> float:
    """Expectation over bins; linear in the probability vector."""
    return float(np.asarray(probs) @ support.bins)


@dataclass(frozen=True)
class HistoryWindow:
    """Encoder input: (obs token ids, action index) pairs followed by the
    current observation's token ids."""

    pairs: tuple[tuple[tuple[int, ...], int], ...]
    current_obs: tuple[int, ...]

    @staticmethod
    def make(pairs, current_obs) -> "HistoryWindow":
        return HistoryWindow(tuple((tuple(o), int(a)) for o, a in pairs), tuple(current_obs))

    @property
    def seq_len(self) -> int:
        return 2 * len(self.pairs) + 1


_GRU_NAMES = ("w_r", "u_r", "b_r", "w_u", "u_u", "b_u", "w_c", "u_c", "b_c")
_FIELD_NAMES = ("token_embed", "act_embed", *_GRU_NAMES,
                "w_d1", "b_d1", "w_d2", "b_d2", "w_rw", "b_rw",
                "w_v", "b_v", "w_p", "b_p")


@dataclass
class WmParams:
    token_embed: np.ndarray  # (V, d_emb)
    act_embed: np.ndarray    # (A, d_emb)
    w_r: np.ndarray          # (d_z, d_emb)
    u_r: np.ndarray          # (d_z, d_z)
    b_r: np.ndarray          # (d_z,)
    w_u: np.ndarray
    u_u: np.ndarray
    b_u: np.ndarray
    w_c: np.ndarray
    u_c: np.ndarray
    b_c: np.ndarray
    w_d1: np.ndarray         # (d_z, d_z + d_emb)
    b_d1: np.ndarray         # (d_z,)
    w_d2: np.ndarray         # (d_z, d_z)
    b_d2: np.ndarray         # (d_z,)
    w_rw: np.ndarray         # (d_z,)
    b_rw: np.ndarray         # (1,)
    w_v: np.ndarray          # (n_bins, d_z)
    b_v: np.ndarray          # (n_bins,)
    w_p: np.ndarray          # (A, d_z)
    b_p: np.ndarray          # (A,)

    @property
    def vocab_size(self) -> int:
        return self.token_embed.shape[0]

    @property
    def d_emb(self) -> int:
        return self.token_embed.shape[1]

    @property
    def d_z(self) -> int:
        return self.w_r.shape[0]

    @property
    def n_actions(self) -> int:
        return self.act_embed.shape[0]

    @property
    def n_bins(self) -> int:
        return self.w_v.shape[0]

    def arrays(self) -> tuple[np.ndarray, ...]:
        return tuple(getattr(self, name) for name in _FIELD_NAMES)

    def flatten(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def shapes(cls, vocab_size, d_emb, d_z, n_actions, n_bins) -> list[tuple]:
        gru = [(d_z, d_emb), (d_z, d_z), (d_z,)] * 3
        return [(vocab_size, d_emb), (n_actions, d_emb), *gru,
                (d_z, d_z + d_emb), (d_z,), (d_z, d_z), (d_z,), (d_z,), (1,),
                (n_bins, d_z), (n_bins,), (n_actions, d_z), (n_actions,)]

    @classmethod
    def unflatten(cls, flat, vocab_size, d_emb, d_z, n_actions, n_bins) -> "WmParams":
        shapes = cls.shapes(vocab_size, d_emb, d_z, n_actions, n_bins)
        total = sum(int(np.prod(s)) for s in shapes)
        if flat.size != total:
            raise ConfigError(f"flat vector has {flat.size} values, model needs {total}")
        out, at = [], 0
        for s in shapes:
            n = int(np.prod(s))
            out.append(np.array(flat[at:at + n], dtype=np.float64).reshape(s))
            at += n
        return cls(*out)


def init_wm_params(vocab_size: int, n_actions: int, d_emb: int = 16, d_z: int = 32,
                   n_bins: int = 21, rng: np.random.Generator | None = None,
                   init_scale: float = 0.08) -> WmParams:
    rng = rng or np.random.default_rng(0)
    shapes = WmParams.shapes(vocab_size, d_emb, d_z, n_actions, n_bins)
    return WmParams(*(rng.uniform(-init_scale, init_scale, size=s) for s in shapes))


def wm_snapshot(params: WmParams) -> WmParams:
    return WmParams(*(a.copy() for a in params.arrays()))


def update_target(target: WmParams, params: WmParams, mode: str = "hard",
                  tau: float = 0.01) -> WmParams:
    """hard: replace with a copy of ``params``; ema: blend tau of ``params``
    into the target. Callers decide hard-update cadence."""
    if mode == "hard":
        return wm_snapshot(params)
    if mode == "ema":
        return WmParams(*((1.0 - tau) * t + tau * p
                          for t, p in zip(target.arrays(), params.arrays())))
    raise ConfigError(f"unknown target update mode {mode!r}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


class _EncodeCache:
    """Batched gated-recurrence forward pass over heterogeneous windows."""

    def __init__(self, params: WmParams, windows: list[HistoryWindow]):
        B = len(windows)
        d_emb, d_z = params.d_emb, params.d_z
        L = max(w.seq_len for w in windows)
        X = np.zeros((B, L, d_emb))
        mask = np.zeros((B, L))
        # meta[b][l] describes where X[b, l] came from, for the backward scatter:
        # ("obs", ids) or ("act", index) or None for padding.
        meta: list[list] = [[None] * L for _ in range(B)]
        for b, w in enumerate(windows):
            steps: list = []
            for obs_ids, act in w.pairs:
                steps.append(("obs", obs_ids))
                steps.append(("act", act))
            steps.append(("obs", w.current_obs))
            offset = L - len(steps)  # left padding keeps h at zero until real steps
            for i, (kind, payload) in enumerate(steps):
                l = offset + i
                meta[b][l] = (kind, payload)
                mask[b, l] = 1.0
                if kind == "obs":
                    if len(payload) == 0:
                        raise ConfigError("observation token ids must be non-empty")
                    X[b, l] = params.token_embed[list(payload)].mean(axis=0)
                else:
                    if not 0 <= payload < params.n_actions:
                        raise ConfigError(f"action index {payload} out of range")
                    X[b, l] = params.act_embed[payload]
        self.X, self.mask, self.meta = X, mask, meta
        self.steps = []
        h = np.zeros((B, d_z))
        for l in range(L):
            x = X[:, l]
            m = mask[:, l:l + 1]
            r = _sigmoid(x @ params.w_r.T + h @ params.u_r.T + params.b_r)
            u = _sigmoid(x @ params.w_u.T + h @ params.u_u.T + params.b_u)
            c = np.tanh(x @ params.w_c.T + (r * h) @ params.u_c.T + params.b_c)
            h_new = (1.0 - u) * h + u * c
            self.steps.append((h, r, u, c))
            h = m * h_new + (1.0 - m) * h
        self.z = h

    def backward(self, params: WmParams, dz: np.ndarray, grads: dict) -> None:
        dh = dz.copy()
        for l in reversed(range(len(self.steps))):
            h_prev, r, u, c = self.steps[l]
            m = self.mask[:, l:l + 1]
            x = self.X[:, l]
            dh_new = dh * m
            dh_carry = dh * (1.0 - m)
            du = dh_new * (c - h_prev)
            dc = dh_new * u
            dh_prev = dh_new * (1.0 - u)
            da_c = dc * (1.0 - c * c)
            grads["w_c"] += da_c.T @ x
            grads["u_c"] += da_c.T @ (r * h_prev)
            grads["b_c"] += da_c.sum(axis=0)
            d_rh = da_c @ params.u_c
            dr = d_rh * h_prev
            dh_prev = dh_prev + d_rh * r
            da_r = dr * r * (1.0 - r)
            da_u = du * u * (1.0 - u)
            grads["w_r"] += da_r.T @ x
            grads["u_r"] += da_r.T @ h_prev
            grads["b_r"] += da_r.sum(axis=0)
            grads["w_u"] += da_u.T @ x
            grads["u_u"] += da_u.T @ h_prev
            grads["b_u"] += da_u.sum(axis=0)
            dh_prev = dh_prev + da_r @ params.u_r + da_u @ params.u_u
            dx = da_c @ params.w_c + da_r @ params.w_r + da_u @ params.w_u
            for b in range(dx.shape[0]):
                entry = self.meta[b][l]
                if entry is None:
                    continue
                kind, payload = entry
                if kind == "obs":
                    np.add.at(grads["token_embed"], list(payload), dx[b] / len(payload))
                else:
                    grads["act_embed"][payload] += dx[b]
            dh = dh_prev + dh_carry


def encode(params: WmParams, window: HistoryWindow) -> LatentState:
    """Context-conditioned latent for one history window (zero initial state;
    shorter histories are processed as-is)."""
    return LatentState(_EncodeCache(params, [window]).z[0])


def encode_batch(params: WmParams, windows: list[HistoryWindow]) -> np.ndarray:
    return _EncodeCache(params, windows).z


class _DynamicsCache:
    def __init__(self, params: WmParams, Z: np.ndarray, actions: np.ndarray):
        self.actions = np.asarray(actions, dtype=int)
        if np.any(self.actions < 0) or np.any(self.actions >= params.n_actions):
            raise ConfigError("action index out of padded action-space bound")
        self.Z = Z
        self.inp = np.concatenate([Z, params.act_embed[self.actions]], axis=1)
        self.hd = np.tanh(self.inp @ params.w_d1.T + params.b_d1)
        self.z_next = np.tanh(self.hd @ params.w_d2.T + params.b_d2)
        self.rewards = self.hd @ params.w_rw + params.b_rw[0]

    def backward(self, params: WmParams, dz_next: np.ndarray, dr: np.ndarray,
                 grads: dict) -> np.ndarray:
        """Returns gradient w.r.t. the input latent Z."""
        da2 = dz_next * (1.0 - self.z_next * self.z_next)
        grads["w_d2"] += da2.T @ self.hd
        grads["b_d2"] += da2.sum(axis=0)
        dhd = da2 @ params.w_d2
        dhd = dhd + dr[:, None] * params.w_rw[None, :]
        grads["w_rw"] += (dr[:, None] * self.hd).sum(axis=0)
        grads["b_rw"][0] += dr.sum()
        da1 = dhd * (1.0 - self.hd * self.hd)
        grads["w_d1"] += da1.T @ self.inp
        grads["b_d1"] += da1.sum(axis=0)
        dinp = da1 @ params.w_d1
        d_z = params.d_z
        np.add.at(grads["act_embed"], self.actions, dinp[:, d_z:])
        return dinp[:, :d_z]


def value_logits(params: WmParams, Z: np.ndarray) -> np.ndarray:
    return Z @ params.w_v.T + params.b_v


def policy_logits(params: WmParams, Z: np.ndarray) -> np.ndarray:
    return Z @ params.w_p.T + params.b_p


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def recurrent_inference(params: WmParams, z: LatentState, action: int):
    """One imagined step: (z', predicted reward, value logits, policy logits),
    with the heads evaluated on z'."""
    cache = _DynamicsCache(params, z.z[None, :], np.array([action]))
    z_next = cache.z_next[0]
    return (LatentState(z_next), float(cache.rewards[0]),
            value_logits(params, z_next[None, :])[0],
            policy_logits(params, z_next[None, :])[0])


def initial_inference(params: WmParams, window: HistoryWindow):
    """Encode plus heads on the root latent: (z, value logits, policy logits)."""
    z = encode(params, window)
    return z, value_logits(params, z.z[None, :])[0], policy_logits(params, z.z[None, :])[0]


@dataclass
class TrainingWindow:
    """One unroll window with all targets attached.

    Depths past the end of the episode are absorbing: value and reward targets
    are zero and stay active, while policy and consistency terms are masked.
    Consistency targets are precomputed encodings (gradients never flow into
    them).
    """

    encode_window: HistoryWindow
    actions: np.ndarray             # (U,)
    rewards: np.ndarray             # (U,)
    policy_targets: np.ndarray      # (U+1, A)
    policy_mask: np.ndarray         # (U+1,)
    value_targets: np.ndarray       # (U+1,)
    consistency_targets: np.ndarray  # (U, d_z)
    consistency_mask: np.ndarray     # (U,)


@dataclass(frozen=True)
class WmLossWeights:
    policy: float = 1.0
    value: float = 0.25
    reward: float = 1.0
    consistency: float = 2.0


def wm_loss_and_grad(params: WmParams, batch: list[TrainingWindow], support: ValueSupport,
                     weights: WmLossWeights = WmLossWeights()):
    """Total loss (policy CE + value CE + reward MSE + latent-cosine
    consistency, summed over unroll depth, averaged over the batch) and its
    exact gradient as a flat vector. Also returns a per-term breakdown."""
    B = len(batch)
    if B == 0:
        raise ConfigError("empty batch")
    U = len(batch[0].actions)
    enc = _EncodeCache(params, [w.encode_window for w in batch])
    Z = [enc.z]
    dyn_caches = []
    actions = np.stack([w.actions for w in batch])          # (B, U)
    for k in range(U):
        cache = _DynamicsCache(params, Z[k], actions[:, k])
        dyn_caches.append(cache)
        Z.append(cache.z_next)

    pol_t = np.stack([w.policy_targets for w in batch])      # (B, U+1, A)
    pol_m = np.stack([w.policy_mask for w in batch])         # (B, U+1)
    val_t = np.stack([w.value_targets for w in batch])       # (B, U+1)
    rew_t = np.stack([w.rewards for w in batch])             # (B, U)
    cons_t = np.stack([w.consistency_targets for w in batch])  # (B, U, d_z)
    cons_m = np.stack([w.consistency_mask for w in batch])     # (B, U)
    val_twohot = np.zeros((B, U + 1, support.count))
    for b in range(B):
        for k in range(U + 1):
            val_twohot[b, k] = value_encode(val_t[b, k], support)

    grads = {name: np.zeros_like(getattr(params, name)) for name in _FIELD_NAMES}
    dZ = [np.zeros_like(z) for z in Z]
    terms = {"policy": 0.0, "value": 0.0, "reward": 0.0, "consistency": 0.0}

    for k in range(U + 1):
        zk = Z[k]
        plog = policy_logits(params, zk)
        plp = _log_softmax(plog)
        probs = np.exp(plp)
        m = pol_m[:, k:k + 1]
        ce = -(pol_t[:, k] * plp).sum(axis=1, keepdims=True) * m
        terms["policy"] += weights.policy * ce.sum() / B
        dplog = weights.policy / B * m * (probs * pol_t[:, k].sum(axis=1, keepdims=True) - pol_t[:, k])
        grads["w_p"] += dplog.T @ zk
        grads["b_p"] += dplog.sum(axis=0)
        dZ[k] += dplog @ params.w_p

        vlog = value_logits(params, zk)
        vlp = _log_softmax(vlog)
        vprobs = np.exp(vlp)
        vce = -(val_twohot[:, k] * vlp).sum(axis=1)
        terms["value"] += weights.value * vce.sum() / B
        dvlog = weights.value / B * (vprobs - val_twohot[:, k])
        grads["w_v"] += dvlog.T @ zk
        grads["b_v"] += dvlog.sum(axis=0)
        dZ[k] += dvlog @ params.w_v

    dr_list: list[np.ndarray] = []
    for k in range(U):
        # cosine consistency between the predicted latent and the precomputed
        # (stop-gradient) target encoding
        zk1 = Z[k + 1]
        t = cons_t[:, k]
        m = cons_m[:, k]
        zn = np.sqrt((zk1 * zk1).sum(axis=1))
        tn = np.sqrt((t * t).sum(axis=1))
        denom = zn * tn + _COS_EPS
        cos = (zk1 * t).sum(axis=1) / denom
        terms["consistency"] += weights.consistency * ((1.0 - cos) * m).sum() / B
        dcos = -weights.consistency / B * m
        dz = dcos[:, None] * (t / denom[:, None]
                              - cos[:, None] * zk1 / (zn * zn + _COS_EPS)[:, None])
        dZ[k + 1] += dz

        err = dyn_caches[k].rewards - rew_t[:, k]
        terms["reward"] += weights.reward * (err * err).sum() / B
        dr_list.append(weights.reward / B * 2.0 * err)

    for k in reversed(range(U)):
        dZ[k] += dyn_caches[k].backward(params, dZ[k + 1], dr_list[k], grads)

    enc.backward(params, dZ[0], grads)

    loss = sum(terms.values())
    flat = np.concatenate([grads[name].ravel() for name in _FIELD_NAMES])
    if not (np.isfinite(loss) and np.all(np.isfinite(flat))):
        raise TrainingError("non-finite world-model loss or gradient")
    return float(loss), flat, terms


class PlannerModel:
    """Adapter giving tree search what it needs: one-step imagined transitions
    with decoded scalar values and full-softmax policy priors."""

    def __init__(self, params: WmParams, support: ValueSupport):
        self.params = params
        self.support = support
        self.n_actions = params.n_actions

    def recurrent_inference(self, z: np.ndarray, action: int):
        cache = _DynamicsCache(self.params, z[None, :], np.array([action]))
        z_next = cache.z_next[0]
        vlog = value_logits(self.params, z_next[None, :])[0]
        plog = policy_logits(self.params, z_next[None, :])[0]
        value = value_decode(np.exp(_log_softmax(vlog)), self.support)
        prior = np.exp(_log_softmax(plog))
        return z_next, float(cache.rewards[0]), value, prior


def masked_policy(plog: np.ndarray, valid_mask: np.ndarray) -> np.ndarray:
    """Softmax over admissible slots only; zero elsewhere."""
    out = np.zeros_like(plog)
    scores = plog[valid_mask]
    scores = scores - scores.max()
    e = np.exp(scores)
    out[valid_mask] = e / e.sum()
    return out


def decode_value(params: WmParams, z: np.ndarray, support: ValueSupport) -> float:
    vlog = value_logits(params, z[None, :])[0]
    return value_decode(np.exp(_log_softmax(vlog)), support)


def save_wm(path, params: WmParams) -> None:
    save_checkpoint(path, {
        "kind": "world_model", "vocab_size": params.vocab_size, "d_emb": params.d_emb,
        "d_z": params.d_z, "n_actions": params.n_actions, "n_bins": params.n_bins,
    }, params.flatten())


def load_wm(path) -> WmParams:
    header, flat = load_checkpoint(path)
    if header.get("kind") != "world_model":
        raise ConfigError(f"{path} is not a world-model checkpoint")
    return WmParams.unflatten(flat, header["vocab_size"], header["d_emb"],
                              header["d_z"], header["n_actions"], header["n_bins"])
