"""Policy fine-tuning mathematics.

Contains the default update path (phase-normalized n-step advantages, format
blending, clipped per-token surrogate with a k3 KL penalty and down-weighted
analysis-prefix tokens) plus the alternative estimators and losses used as
baselines: group-relative advantages, GAE, and visit-weighted SFT.

All reductions run in a fixed order so results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import token_lm
from .errors import ConfigError
from .token_lm import LmParams, PositionBlock


@dataclass
class RlftConfig:
    eps_low: float = 0.2
    eps_high: float = 0.2
    kl_coef: float = 0.01
    cot_weight: float = 0.1
    format_weight: float = 0.5
    entropy_coef: float = 0.0
    norm_mode: str = "phase_global"   # phase_global | batch
    eps_norm: float = 1e-8

    def __post_init__(self):
        if self.eps_low <= 0 or self.eps_high <= 0:
            raise ConfigError("clip bounds must be positive")
        if self.kl_coef < 0 or self.entropy_coef < 0:
            raise ConfigError("kl_coef and entropy_coef must be >= 0")
        if not 0.0 <= self.cot_weight <= 1.0:
            raise ConfigError("cot_weight must lie in [0, 1]")
        if not 0.0 <= self.format_weight <= 1.0:
            raise ConfigError("format_weight must lie in [0, 1]")
        if self.norm_mode not in ("phase_global", "batch"):
            raise ConfigError(f"unknown norm_mode {self.norm_mode!r}")


@dataclass
class PhaseStats:
    """Running sum / sum of squares / count of raw advantages within the
    current fine-tuning phase."""

    total: float = 0.0
    total_sq: float = 0.0
    count: int = 0

    def update(self, values) -> None:
        arr = np.asarray(values, dtype=np.float64).ravel()
        self.total += float(arr.sum())
        self.total_sq += float((arr * arr).sum())
        self.count += arr.size

    @property
    def mean(self) -> float:
        return self.total / self.count if self.count else 0.0

    @property
    def std(self) -> float:
        if not self.count:
            return 0.0
        var = self.total_sq / self.count - self.mean ** 2
        return float(np.sqrt(max(var, 0.0)))


def phase_normalize(raw_advantages, stats: PhaseStats, eps_norm: float = 1e-8) -> np.ndarray:
    """Standardize by the phase-accumulated mean and population std. The batch
    is folded into ``stats`` before normalizing."""
    arr = np.asarray(raw_advantages, dtype=np.float64)
    stats.update(arr)
    return (arr - stats.mean) / (stats.std + eps_norm)


def blend_format(a_hat: float, r_fmt: int, format_weight: float) -> float:
    """Convex blend of the normalized advantage with the binary template
    reward."""
    return (1.0 - format_weight) * a_hat + format_weight * float(r_fmt)


def kl_k3(logprob_policy: float, logprob_ref: float):
    """Nonnegative per-token KL(policy || ref) estimator: r - 1 - ln r with
    r = exp(logprob_ref - logprob_policy). Supports arrays."""
    d = np.asarray(logprob_ref, dtype=np.float64) - np.asarray(logprob_policy, dtype=np.float64)
    return np.exp(d) - 1.0 - d


def clipped_surrogate_terms(ratios: np.ndarray, advantage: float,
                            eps_low: float, eps_high: float):
    """Per-token min(rho*A, clip(rho)*A) plus which tokens were clipped and
    the subgradient d(min)/d(rho). Ties resolve to the unclipped branch."""
    ratios = np.asarray(ratios, dtype=np.float64)
    plain = ratios * advantage
    clipped = np.clip(ratios, 1.0 - eps_low, 1.0 + eps_high) * advantage
    terms = np.minimum(plain, clipped)
    take_clip = clipped < plain
    inside = (ratios >= 1.0 - eps_low) & (ratios <= 1.0 + eps_high)
    dterm_drho = np.where(take_clip & ~inside, 0.0, advantage)
    return terms, take_clip, dterm_drho


def ppo_token_loss(params: LmParams, samples, cfg: RlftConfig):
    """Clipped per-token policy-gradient loss with KL and entropy terms.

    Each sample needs prompt_ids, output_ids, final_advantage, token_mask
    (zeros remove a token entirely), cot_weights (per-token loss scale), and
    old/ref per-token log probs. The whole per-token loss, KL and entropy
    included, is scaled by mask * cot_weight and averaged over the masked
    token count.

    Returns (loss, flat gradient, stats dict).
    """
    batch = [(s.prompt_ids, s.output_ids) for s in samples]
    stats = {}

    def loss_fn(blocks: list[PositionBlock]):
        total_mask = sum(float(np.sum(s.token_mask)) for s in samples)
        if total_mask <= 0:
            raise ConfigError("no unmasked tokens in batch")
        loss = 0.0
        surr_sum = kl_sum = ent_sum = clip_count = 0.0
        min_k3 = np.inf
        dlogits_list = []
        for s, block in zip(samples, blocks):
            lp = block.token_logprobs
            probs = np.exp(block.logprobs)
            mask = np.asarray(s.token_mask, dtype=np.float64)
            weight = mask * np.asarray(s.cot_weights, dtype=np.float64)
            ratios = np.exp(lp - s.old_logprobs)
            adv = float(s.final_advantage)
            terms, take_clip, dterm_drho = clipped_surrogate_terms(
                ratios, adv, cfg.eps_low, cfg.eps_high)
            k3 = kl_k3(lp, s.ref_logprobs)
            ent = -(probs * block.logprobs).sum(axis=1)
            loss += float((weight * (-terms + cfg.kl_coef * k3
                                     - cfg.entropy_coef * ent)).sum())
            surr_sum += float((weight * terms).sum())
            kl_sum += float((mask * k3).sum())
            ent_sum += float((mask * ent).sum())
            clip_count += float((mask * take_clip).sum())
            if mask.any():
                min_k3 = min(min_k3, float(k3[mask > 0].min()))

            # d loss / d lp_j, then mapped through the log-softmax Jacobian
            dlp = weight * (-dterm_drho * ratios + cfg.kl_coef * (1.0 - np.exp(s.ref_logprobs - lp)))
            y = np.asarray(s.output_ids)
            one_hot_minus_p = -probs
            one_hot_minus_p[np.arange(len(y)), y] += 1.0
            dlogits = dlp[:, None] * one_hot_minus_p
            if cfg.entropy_coef != 0.0:
                dH = -probs * (block.logprobs + ent[:, None])
                dlogits += (-cfg.entropy_coef) * weight[:, None] * dH
            dlogits_list.append(dlogits / total_mask)
        loss /= total_mask
        stats.update({
            "surrogate": surr_sum / total_mask,
            "kl": kl_sum / total_mask,
            "entropy": ent_sum / total_mask,
            "clip_fraction": clip_count / total_mask,
            "min_k3": min_k3 if np.isfinite(min_k3) else 0.0,
            "tokens": total_mask,
        })
        return loss, dlogits_list

    loss, grad = token_lm.loss_and_grad(params, batch, loss_fn)
    return loss, grad, stats


def grpo_advantage(rewards, eps_norm: float = 1e-8) -> np.ndarray:
    """Group-relative advantages: standardize completion rewards within one
    prompt's group (population std)."""
    arr = np.asarray(rewards, dtype=np.float64)
    if arr.size < 2:
        raise ConfigError("group-relative advantages need a group of >= 2")
    return (arr - arr.mean()) / (arr.std() + eps_norm)


def gae_advantage(rewards, values, gamma: float, lam: float, dones):
    """Backward generalized-advantage recursion over (possibly concatenated)
    trajectories. ``values[t]`` is V(s_t); the value past a terminal is zero.
    Returns (advantages, return targets = advantages + values)."""
    r = np.asarray(rewards, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    d = np.asarray(dones, dtype=bool)
    if not (r.shape == v.shape == d.shape):
        raise ConfigError("rewards, values, dones must be aligned")
    T = r.size
    adv = np.zeros(T)
    carry = 0.0
    for t in range(T - 1, -1, -1):
        next_v = 0.0 if d[t] or t == T - 1 else v[t + 1]
        delta = r[t] + gamma * next_v - v[t]
        carry = delta + gamma * lam * (0.0 if d[t] else carry)
        adv[t] = carry
    return adv, adv + v


def azsft_loss(params: LmParams, items, visit_weights):
    """Search-imitation loss: -w * sum of label-token log probs, averaged over
    samples. ``items`` is a list of (prompt_ids, action_token_ids)."""
    weights = np.asarray(visit_weights, dtype=np.float64)
    if len(items) != weights.size:
        raise ConfigError("one visit weight per item required")

    def loss_fn(blocks: list[PositionBlock]):
        S = len(blocks)
        loss = 0.0
        dlogits_list = []
        for w, block in zip(weights, blocks):
            lp = block.token_logprobs
            loss += float(-w * lp.sum()) / S
            probs = np.exp(block.logprobs)
            y = np.asarray(block.output_ids)
            one_hot_minus_p = -probs
            one_hot_minus_p[np.arange(len(y)), y] += 1.0
            dlogits_list.append((-w / S) * one_hot_minus_p)
        return loss, dlogits_list

    batch = [(p, o) for p, o in items]
    loss, grad = token_lm.loss_and_grad(params, batch, loss_fn)
    return loss, grad
