"""Episode store feeding both trainers.

World-model training samples unroll windows; policy fine-tuning samples
single transitions enriched with n-step TD advantages computed against the
target model. Eviction is FIFO over whole episodes.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .world_model import HistoryWindow


@dataclass
class Transition:
    obs_text: str
    obs_token_ids: tuple[int, ...]
    valid_actions: tuple[str, ...]
    history_index: int            # position t within the episode
    action_index: int
    action_string: str
    reward: float
    done: bool
    pi_mcts: np.ndarray           # padded action space
    root_value: float
    llm_scores: np.ndarray | None  # per-action mean log probs; None = absent
    cot_text: str | None = None
    llm_output_text: str | None = None


@dataclass
class Episode:
    transitions: list[Transition]
    seed: int
    env_name: str

    @property
    def total_return(self) -> float:
        return float(sum(t.reward for t in self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)


def validate_episode(episode: Episode) -> None:
    if not episode.transitions:
        raise ConfigError("episode has no transitions")
    for i, t in enumerate(episode.transitions):
        if t.done != (i == len(episode.transitions) - 1):
            raise ConfigError("done must be true exactly at the last transition")
        if t.history_index != i:
            raise ConfigError("history_index must equal the transition position")
        p = np.asarray(t.pi_mcts, dtype=np.float64)
        if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
            raise ConfigError("pi_mcts must be a probability vector")
        if not 0 <= t.action_index < p.size:
            raise ConfigError("action_index outside the padded action space")
        if t.llm_scores is not None and not np.all(np.isfinite(np.asarray(t.llm_scores))):
            raise ConfigError("llm_scores must be finite")


@dataclass
class AdvantageSample:
    """A transition enriched for one policy-gradient update. The fetch step
    fills fields through ``raw_advantage``; normalization, format blending,
    token ids, and behavior/reference log probs are attached later."""

    episode: Episode
    t: int
    transition: Transition
    q_n: float
    baseline: float
    raw_advantage: float
    normalized: float | None = None
    r_fmt: int | None = None
    final_advantage: float | None = None
    prompt_ids: list[int] | None = None
    output_ids: list[int] | None = None
    token_mask: np.ndarray | None = None
    cot_weights: np.ndarray | None = None
    old_logprobs: np.ndarray | None = None
    ref_logprobs: np.ndarray | None = None


def history_window(episode: Episode, t: int, window: int) -> HistoryWindow:
    """Encoder input for position t: up to ``window`` preceding
    (obs, action) pairs plus the observation at t."""
    start = max(0, t - window)
    pairs = [(episode.transitions[i].obs_token_ids, episode.transitions[i].action_index)
             for i in range(start, t)]
    return HistoryWindow.make(pairs, episode.transitions[t].obs_token_ids)


def n_step_inputs(episode: Episode, t: int, n: int) -> tuple[np.ndarray, int | None]:
    """Real rewards from t up to min(n, steps-to-terminal) and the bootstrap
    position t+n, or None when the episode terminates within n steps."""
    T = len(episode)
    m = min(n, T - t)
    rewards = np.array([episode.transitions[t + j].reward for j in range(m)])
    bootstrap_t = t + n if t + n <= T - 1 else None
    return rewards, bootstrap_t


@dataclass
class RawWindow:
    """An unroll window sampled for world-model training, before targets are
    attached. Depths past the terminal are padded as absorbing (action 0,
    reward 0) with masks recording which depths carry real policy/consistency
    targets."""

    episode: Episode
    t: int
    encode_window: HistoryWindow
    actions: np.ndarray            # (U,)
    rewards: np.ndarray            # (U,)
    policy_targets: np.ndarray     # (U+1, A)
    policy_mask: np.ndarray        # (U+1,)
    consistency_windows: list      # U entries: HistoryWindow | None
    consistency_mask: np.ndarray   # (U,)


class ReplayBuffer:
    def __init__(self, capacity: int = 10_000):
        if capacity < 1:
            raise ConfigError("capacity must be >= 1")
        self.capacity = capacity
        self.episodes: deque[Episode] = deque()
        self._n_transitions = 0

    def __len__(self) -> int:
        return self._n_transitions

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    def push_episode(self, episode: Episode) -> None:
        validate_episode(episode)
        self.episodes.append(episode)
        self._n_transitions += len(episode)
        while self._n_transitions > self.capacity and len(self.episodes) > 1:
            dropped = self.episodes.popleft()
            self._n_transitions -= len(dropped)

    def _flat_positions(self) -> list[tuple[Episode, int]]:
        return [(ep, t) for ep in self.episodes for t in range(len(ep))]

    def sample_windows(self, count: int, window: int, unroll: int,
                       rng: np.random.Generator) -> list[RawWindow]:
        """Uniform (episode, start) positions, sampled with replacement."""
        positions = self._flat_positions()
        if not positions:
            raise ConfigError("replay buffer is empty")
        picks = rng.integers(0, len(positions), size=count)
        out = []
        for p in picks:
            ep, t = positions[int(p)]
            out.append(self._build_window(ep, t, window, unroll))
        return out

    def _build_window(self, ep: Episode, t: int, window: int, unroll: int) -> RawWindow:
        T = len(ep)
        n_pad = ep.transitions[0].pi_mcts.size
        actions = np.zeros(unroll, dtype=int)
        rewards = np.zeros(unroll)
        policy_targets = np.zeros((unroll + 1, n_pad))
        policy_mask = np.zeros(unroll + 1)
        cons_windows: list = [None] * unroll
        cons_mask = np.zeros(unroll)
        for k in range(unroll + 1):
            if t + k <= T - 1:
                policy_targets[k] = ep.transitions[t + k].pi_mcts
                policy_mask[k] = 1.0
        for k in range(unroll):
            if t + k <= T - 1:
                actions[k] = ep.transitions[t + k].action_index
                rewards[k] = ep.transitions[t + k].reward
            if t + k + 1 <= T - 1:
                cons_windows[k] = history_window(ep, t + k + 1, window)
                cons_mask[k] = 1.0
        return RawWindow(ep, t, history_window(ep, t, window), actions, rewards,
                         policy_targets, policy_mask, cons_windows, cons_mask)

    def llm_positions(self) -> list[tuple[Episode, int]]:
        return [(ep, t) for ep in self.episodes for t in range(len(ep))
                if ep.transitions[t].llm_scores is not None]

    def fetch_llm_samples(self, count: int, n: int, value_fn, gamma: float,
                          rng: np.random.Generator) -> list[AdvantageSample]:
        """Sample transitions carrying prior-oracle data and fill their n-step
        advantages: Q = sum gamma^j r + gamma^n * v(s_{t+n}) with the
        bootstrap dropped when the episode ends within n steps; the baseline
        is the same value function at s_t.

        ``value_fn(episode, t) -> float`` evaluates the target model on the
        real history window at position t.
        """
        positions = self.llm_positions()
        if not positions:
            raise ConfigError("no transitions with stored prior-oracle data")
        picks = rng.integers(0, len(positions), size=count)
        samples = []
        for p in picks:
            ep, t = positions[int(p)]
            rewards, bootstrap_t = n_step_inputs(ep, t, n)
            q = float(sum(gamma ** j * r for j, r in enumerate(rewards)))
            if bootstrap_t is not None:
                q += gamma ** n * value_fn(ep, bootstrap_t)
            baseline = value_fn(ep, t)
            samples.append(AdvantageSample(ep, t, ep.transitions[t], q, baseline, q - baseline))
        return samples

    # -- debugging / persistence ----------------------------------------------

    def dump_jsonl(self, fh) -> None:
        for ep in self.episodes:
            fh.write(json.dumps(episode_to_json(ep)) + "\n")

    def load_jsonl(self, fh) -> None:
        for line in fh:
            line = line.strip()
            if line:
                self.push_episode(episode_from_json(json.loads(line)))


def episode_to_json(ep: Episode) -> dict:
    return {
        "seed": ep.seed,
        "env_name": ep.env_name,
        "transitions": [{
            "obs_text": t.obs_text,
            "obs_token_ids": list(t.obs_token_ids),
            "valid_actions": list(t.valid_actions),
            "history_index": t.history_index,
            "action_index": t.action_index,
            "action_string": t.action_string,
            "reward": t.reward,
            "done": t.done,
            "pi_mcts": [float(x) for x in t.pi_mcts],
            "root_value": t.root_value,
            "llm_scores": None if t.llm_scores is None else [float(x) for x in t.llm_scores],
            "cot_text": t.cot_text,
            "llm_output_text": t.llm_output_text,
        } for t in ep.transitions],
    }


def episode_from_json(obj: dict) -> Episode:
    transitions = [Transition(
        obs_text=t["obs_text"],
        obs_token_ids=tuple(t["obs_token_ids"]),
        valid_actions=tuple(t["valid_actions"]),
        history_index=t["history_index"],
        action_index=t["action_index"],
        action_string=t["action_string"],
        reward=float(t["reward"]),
        done=bool(t["done"]),
        pi_mcts=np.array(t["pi_mcts"]),
        root_value=float(t["root_value"]),
        llm_scores=None if t["llm_scores"] is None else np.array(t["llm_scores"]),
        cot_text=t.get("cot_text"),
        llm_output_text=t.get("llm_output_text"),
    ) for t in obj["transitions"]]
    return Episode(transitions, obj["seed"], obj["env_name"])
