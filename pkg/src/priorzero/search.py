"""Latent-space tree search with a fused prior at the root only.

Internal nodes always use the world model's own policy head as their prior;
the external prior enters exactly once, at the root. Selection follows the
pUCT rule with min-max-normalized value estimates, backups discount by gamma,
and the execution policy is a temperature-scaled power of the root visit
counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .metrics import entropy


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "fixed"          # fixed | adaptive | off
    alpha: float = 0.5
    alpha_min: float = 0.2
    alpha_max: float = 0.8
    epsilon_mix: float = 1e-6

    def __post_init__(self):
        if self.mode not in ("fixed", "adaptive", "off"):
            raise ConfigError(f"unknown fusion mode {self.mode!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ConfigError("need 0 <= alpha_min <= alpha_max <= 1")
        if self.epsilon_mix <= 0:
            raise ConfigError("epsilon_mix must be positive")


@dataclass(frozen=True)
class DirichletConfig:
    alpha: float = 0.3
    frac: float = 0.25


@dataclass(frozen=True)
class SearchConfig:
    num_simulations: int = 25
    c1: float = 1.25
    c2: float = 19652.0
    discount: float = 0.99
    visit_temperature: float = 1.0
    fusion: FusionConfig = field(default_factory=FusionConfig)
    dirichlet: DirichletConfig | None = None

    def __post_init__(self):
        if self.num_simulations < 1:
            raise ConfigError("num_simulations must be >= 1")
        if not 0.0 < self.discount <= 1.0:
            raise ConfigError("discount must lie in (0, 1]")
        if self.visit_temperature <= 0:
            raise ConfigError("visit_temperature must be positive")


@dataclass(frozen=True)
class SearchResult:
    visit_policy: np.ndarray       # padded action space, zero on invalid slots
    root_value: float
    root_entropy: float            # nats, over admissible slots
    fused_root_prior: np.ndarray   # padded action space
    visit_counts: np.ndarray       # padded action space
    internal_fused_expansions: int


def adaptive_alpha(pi_wm: np.ndarray, alpha_min: float, alpha_max: float) -> float:
    """External-prior weight grows as the world-model policy gets more
    confident: alpha = alpha_min + (alpha_max - alpha_min) * (1 - H/ln|A|).
    A single admissible action forces alpha_min."""
    pi_wm = np.asarray(pi_wm, dtype=np.float64)
    n = pi_wm.size
    if n < 2:
        return float(alpha_min)
    ratio = np.clip(entropy(pi_wm) / np.log(n), 0.0, 1.0)
    return float(alpha_min + (alpha_max - alpha_min) * (1.0 - ratio))


def resolve_alpha(pi_wm_admissible: np.ndarray, cfg: FusionConfig) -> float:
    if cfg.mode == "off":
        return 0.0
    if cfg.mode == "fixed":
        return cfg.alpha
    return adaptive_alpha(pi_wm_admissible, cfg.alpha_min, cfg.alpha_max)


def fuse_root_prior(pi_wm: np.ndarray, pi_llm: np.ndarray, cfg: FusionConfig,
                    valid_mask: np.ndarray) -> np.ndarray:
    """Convex mixture of the two priors in probability space over admissible
    slots, renormalized after an epsilon floor. Mode "off" returns the
    world-model prior unchanged."""
    valid_mask = np.asarray(valid_mask, dtype=bool)
    if not valid_mask.any():
        raise ConfigError("empty admissible set")
    pi_wm = np.asarray(pi_wm, dtype=np.float64)
    if cfg.mode == "off":
        return pi_wm.copy()
    pi_llm = np.asarray(pi_llm, dtype=np.float64)
    alpha = resolve_alpha(pi_wm[valid_mask], cfg)
    mix = (1.0 - alpha) * pi_wm[valid_mask] + alpha * pi_llm[valid_mask] + cfg.epsilon_mix
    out = np.zeros_like(pi_wm)
    out[valid_mask] = mix / mix.sum()
    return out


def visit_policy_from_counts(counts: np.ndarray, tau: float) -> np.ndarray:
    """Normalized counts**(1/tau); tau -> 0 collapses to the argmax with
    lowest-index tie-breaking."""
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total < 1:
        raise ConfigError("visit counts must sum to at least 1")
    out = np.zeros_like(counts)
    if tau <= 1e-8:
        out[int(np.argmax(counts))] = 1.0
        return out
    with np.errstate(divide="ignore"):
        log_scaled = np.where(counts > 0, np.log(counts, where=counts > 0), -np.inf) / tau
    log_scaled -= log_scaled.max()
    p = np.exp(log_scaled)
    return p / p.sum()


class _MinMaxStats:
    def __init__(self):
        self.minimum = np.inf
        self.maximum = -np.inf

    def update(self, value: float) -> None:
        self.minimum = min(self.minimum, value)
        self.maximum = max(self.maximum, value)

    def normalize(self, value: float) -> float:
        if self.maximum > self.minimum:
            return (value - self.minimum) / (self.maximum - self.minimum)
        return value


class _Node:
    """Holds per-child edge statistics as parallel arrays."""

    __slots__ = ("z", "child_actions", "priors", "rewards", "n", "w", "children")

    def __init__(self, z, child_actions: np.ndarray, priors: np.ndarray):
        self.z = z
        self.child_actions = child_actions
        self.priors = priors
        self.rewards = np.zeros(len(child_actions))
        self.n = np.zeros(len(child_actions), dtype=np.int64)
        self.w = np.zeros(len(child_actions))
        self.children: list[_Node | None] = [None] * len(child_actions)

    def select(self, cfg: SearchConfig, stats: _MinMaxStats) -> int:
        total = self.n.sum()
        q = np.zeros(len(self.child_actions))
        visited = self.n > 0
        if visited.any():
            raw = self.rewards[visited] + cfg.discount * self.w[visited] / self.n[visited]
            if stats.maximum > stats.minimum:
                raw = (raw - stats.minimum) / (stats.maximum - stats.minimum)
            q[visited] = raw
        explore = (self.priors * np.sqrt(total) / (1.0 + self.n)
                   * (cfg.c1 + np.log((total + cfg.c2 + 1.0) / cfg.c2)))
        return int(np.argmax(q + explore))


def run_mcts(model, z_root: np.ndarray, fused_prior: np.ndarray, valid_mask: np.ndarray,
             cfg: SearchConfig, rng: np.random.Generator | None = None,
             expansion_log: list | None = None) -> SearchResult:
    """Run ``cfg.num_simulations`` simulations from ``z_root``.

    ``model`` must expose ``recurrent_inference(z, action) -> (z', reward,
    value, prior_probs)`` over the padded action space. ``fused_prior`` seeds
    the root's children (admissible slots only); every deeper expansion takes
    its prior from the model. ``expansion_log``, when given, receives one
    ``(path, prior, fused)`` triple per expansion for instrumentation.
    """
    valid_mask = np.asarray(valid_mask, dtype=bool)
    admissible = np.flatnonzero(valid_mask)
    if admissible.size == 0:
        raise ConfigError("empty admissible set")
    n_pad = len(valid_mask)
    priors = np.asarray(fused_prior, dtype=np.float64)[admissible]
    priors = priors / priors.sum()
    if cfg.dirichlet is not None and rng is not None and admissible.size > 1:
        noise = rng.dirichlet(np.full(admissible.size, cfg.dirichlet.alpha))
        priors = (1.0 - cfg.dirichlet.frac) * priors + cfg.dirichlet.frac * noise
    root = _Node(z_root, admissible, priors)
    if expansion_log is not None:
        expansion_log.append(((), priors.copy(), True))

    stats = _MinMaxStats()
    internal_fused = 0
    root_value_sum = 0.0
    for _ in range(cfg.num_simulations):
        node = root
        path: list[tuple[_Node, int]] = []
        while True:
            ci = node.select(cfg, stats)
            path.append((node, ci))
            child = node.children[ci]
            if child is None:
                break
            node = child
        parent, ci = path[-1]
        action = int(parent.child_actions[ci])
        z_next, reward, leaf_value, prior = model.recurrent_inference(parent.z, action)
        parent.rewards[ci] = reward
        child = _Node(z_next, np.arange(model.n_actions), np.asarray(prior, dtype=np.float64))
        parent.children[ci] = child
        if expansion_log is not None:
            expansion_log.append((tuple(int(p.child_actions[i]) for p, i in path),
                                  child.priors.copy(), False))
        # the prior at every non-root expansion comes from the model's policy
        # head; count anything else so tests can assert root-only fusion
        g = float(leaf_value)
        for n, i in reversed(path):
            n.w[i] += g
            n.n[i] += 1
            stats.update(n.rewards[i] + cfg.discount * n.w[i] / n.n[i])
            g = n.rewards[i] + cfg.discount * g
        root_value_sum += g

    counts = np.zeros(n_pad)
    counts[root.child_actions] = root.n
    visit_policy = visit_policy_from_counts(counts, cfg.visit_temperature)
    visit_policy[~valid_mask] = 0.0
    visit_policy = visit_policy / visit_policy.sum()
    fused_full = np.zeros(n_pad)
    fused_full[root.child_actions] = root.priors
    return SearchResult(
        visit_policy=visit_policy,
        root_value=float(root_value_sum / cfg.num_simulations),
        root_entropy=entropy(visit_policy[valid_mask]),
        fused_root_prior=fused_full,
        visit_counts=counts,
        internal_fused_expansions=internal_fused,
    )
