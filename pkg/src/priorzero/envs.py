"""Deterministic toy text environments.

Each environment exposes the same interface: a textual observation with an
ordered list of admissible action strings, scalar rewards, and a done flag.
The three environments exercise complementary training regimes:

* ``LoopTrapRooms`` -- a four-location map whose north/south pair forms a
  zero-reward cycle while the west branch leads to the exit; escaping the
  cycle is the whole game.
* ``KeyDoorQuest`` -- a five-room chain with a key, a locked door, and two
  sparse rewards; multi-step credit assignment.
* ``GridCommand`` -- a 5x5 grid with one target object and two distractors,
  "go to <color> <object>" commands, and a shaped success reward that decays
  with the number of steps taken.

Observation text is templated English over a small fixed vocabulary so the
token model's vocabulary stays tiny. Invalid actions are a hard error, never
a silent no-op.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidActionError

ENV_NAMES = ("LoopTrapRooms", "KeyDoorQuest", "GridCommand")


@dataclass(frozen=True)
class EnvSpec:
    name: str
    max_steps: int = 0  # 0 -> environment default
    seed: int = 0

    def __post_init__(self):
        if self.name not in ENV_NAMES:
            raise ConfigError(f"unknown environment name: {self.name!r} (choose from {ENV_NAMES})")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be >= 0")


@dataclass(frozen=True)
class Observation:
    text: str
    valid_actions: tuple[str, ...]
    step_index: int


@dataclass(frozen=True)
class StepResult:
    observation: Observation
    reward: float
    done: bool


def format_reward_value(r: float) -> str:
    """Canonical textual rendering of a reward, used in prompt history lines."""
    if float(r) == int(r):
        return str(int(r))
    return f"{r:.2f}"


def shaped_success_reward(t: int, max_steps: int) -> float:
    """Decaying success reward: 1 - 0.9 * (t / max_steps)."""
    return 1.0 - 0.9 * (t / max_steps)


class TextEnv:
    """Base class: subclasses define layout, texts, and transition rules."""

    default_max_steps = 20

    def __init__(self, spec: EnvSpec):
        if spec.name != type(self).__name__:
            raise ConfigError(f"spec names {spec.name}, env is {type(self).__name__}")
        self.spec = spec
        self.max_steps = spec.max_steps or self.default_max_steps
        self._step_index = 0
        self._done = True  # not usable until reset
        self._obs: Observation | None = None

    # -- interface ---------------------------------------------------------

    def reset(self, episode_seed: int | None = None) -> Observation:
        """Start a new episode. ``episode_seed`` defaults to the spec seed."""
        self._step_index = 0
        self._done = False
        self._reset_state(self.spec.seed if episode_seed is None else episode_seed)
        self._obs = self._observe()
        return self._obs

    def step(self, action: str) -> StepResult:
        if self._done:
            raise InvalidActionError("episode is done; call reset() first")
        assert self._obs is not None
        if action not in self._obs.valid_actions:
            raise InvalidActionError(
                f"action {action!r} not in valid actions {list(self._obs.valid_actions)}"
            )
        reward, done = self._apply(action)
        self._step_index += 1
        if not done and self._step_index >= self.max_steps:
            done = True
        self._done = done
        self._obs = self._observe()
        return StepResult(self._obs, float(reward), bool(done))

    @property
    def done(self) -> bool:
        return self._done

    # -- per-env hooks -------------------------------------------------------

    def _reset_state(self, seed: int) -> None:
        raise NotImplementedError

    def _apply(self, action: str) -> tuple[float, bool]:
        raise NotImplementedError

    def _state_text(self) -> str:
        raise NotImplementedError

    def _state_actions(self) -> list[str]:
        raise NotImplementedError

    def _observe(self) -> Observation:
        actions = () if self._done else tuple(self._state_actions())
        if not self._done:
            assert len(set(actions)) == len(actions), "duplicate action strings"
            assert actions, "valid_actions must be non-empty while not done"
        return Observation(self._state_text(), actions, self._step_index)

    # -- metadata ------------------------------------------------------------

    @property
    def action_catalog(self) -> tuple[str, ...]:
        """Ordered global action list; indices into it are the padded action space."""
        raise NotImplementedError

    def action_index(self, action: str) -> int:
        return self.action_catalog.index(action)

    def valid_mask(self, obs: Observation) -> np.ndarray:
        mask = np.zeros(len(self.action_catalog), dtype=bool)
        for a in obs.valid_actions:
            mask[self.action_index(a)] = True
        return mask

    def vocabulary(self) -> list[str]:
        """Every whitespace-delimited word this env can ever emit, actions and
        reward renderings included."""
        words: set[str] = set()
        for text in self._all_texts():
            words.update(text.split())
        for a in self.action_catalog:
            words.update(a.split())
        for r in self._possible_rewards():
            words.add(format_reward_value(r))
        return sorted(words)

    def _all_texts(self) -> list[str]:
        raise NotImplementedError

    def _possible_rewards(self) -> list[float]:
        raise NotImplementedError


class LoopTrapRooms(TextEnv):
    """Hallway <-> closet form a reward-free loop; hallway -> west -> west exits."""

    default_max_steps = 20

    TEXTS = {
        "hallway": "You are in a hallway. Doors lead north south and west.",
        "closet": "You are in a cramped closet. The only door leads south.",
        "corridor": "You are in a dim corridor. The passage continues west and east.",
        "exit": "You step through the exit into daylight.",
    }
    ACTIONS = {
        "hallway": ["north", "south", "west"],
        "closet": ["south"],
        "corridor": ["west", "east"],
        "exit": [],
    }

    def _reset_state(self, seed: int) -> None:
        self.room = "hallway"

    def _apply(self, action: str) -> tuple[float, bool]:
        if self.room == "hallway":
            if action == "north":
                self.room = "closet"
            elif action == "west":
                self.room = "corridor"
            # "south" bumps the hallway's south wall: no move
        elif self.room == "closet":
            self.room = "hallway"
        elif self.room == "corridor":
            if action == "west":
                self.room = "exit"
                return 1.0, True
            self.room = "hallway"
        return 0.0, False

    def _state_text(self) -> str:
        return self.TEXTS[self.room]

    def _state_actions(self) -> list[str]:
        return list(self.ACTIONS[self.room])

    @property
    def action_catalog(self) -> tuple[str, ...]:
        return ("north", "south", "west", "east")

    def _all_texts(self) -> list[str]:
        return list(self.TEXTS.values())

    def _possible_rewards(self) -> list[float]:
        return [0.0, 1.0]


class KeyDoorQuest(TextEnv):
    """Five-room chain. The agent starts in the storage room beside a brass
    key; the heavy door east of the guard room is locked until the key is
    used, and the treasure vault behind it ends the episode.

    Rewards: +1 for unlocking the door, +1 for entering the vault.
    """

    default_max_steps = 50

    ROOM_BASE = {
        1: "You are in the entrance hall. A doorway leads east.",
        2: "You are in the storage room. Doorways lead east and west.",
        3: "You are in the long corridor. Doorways lead east and west.",
        4: "You are in the guard room. A heavy door stands east and a doorway leads west.",
        5: "You are in the treasure vault. Gold glitters everywhere.",
    }
    MISC_ACTIONS = ["look around", "wait", "inspect floor"]

    def _reset_state(self, seed: int) -> None:
        self.room = 2
        self.key_here = True  # key lies in the storage room
        self.carrying = False
        self.locked = True

    def _apply(self, action: str) -> tuple[float, bool]:
        if action == "take key":
            self.key_here = False
            self.carrying = True
            return 0.0, False
        if action == "unlock door":
            self.locked = False
            return 1.0, False
        if action == "go east":
            self.room += 1
            if self.room == 5:
                return 1.0, True
            return 0.0, False
        if action == "go west":
            self.room -= 1
            return 0.0, False
        return 0.0, False  # misc actions do nothing

    def _state_text(self) -> str:
        parts = [self.ROOM_BASE[self.room]]
        if self.room == 2 and self.key_here:
            parts.append("A brass key lies here.")
        if self.room == 4:
            parts.append("The heavy door is locked." if self.locked else "The heavy door stands open.")
        if self.carrying:
            parts.append("You carry a brass key.")
        return " ".join(parts)

    def _state_actions(self) -> list[str]:
        acts: list[str] = []
        if self.room == 4:
            if not self.locked:
                acts.append("go east")
        elif self.room < 5:
            acts.append("go east")
        if self.room > 1:
            acts.append("go west")
        if self.room == 2 and self.key_here:
            acts.append("take key")
        if self.room == 4 and self.locked and self.carrying:
            acts.append("unlock door")
        acts.extend(self.MISC_ACTIONS)
        return acts

    @property
    def action_catalog(self) -> tuple[str, ...]:
        return ("go east", "go west", "take key", "unlock door",
                "look around", "wait", "inspect floor")

    def _all_texts(self) -> list[str]:
        return list(self.ROOM_BASE.values()) + [
            "A brass key lies here.",
            "The heavy door is locked.",
            "The heavy door stands open.",
            "You carry a brass key.",
        ]

    def _possible_rewards(self) -> list[float]:
        return [0.0, 1.0]


class GridCommand(TextEnv):
    """5x5 grid with a red ball (the target), a blue key, and a green box.

    The three admissible commands each move the agent one cell toward the
    named object (row first, then column). Stepping onto the red ball's cell
    succeeds with reward 1 - 0.9 * (t / max_steps); running out of steps
    fails with reward 0.
    """

    default_max_steps = 20
    SIZE = 5
    OBJECTS = ("red ball", "blue key", "green box")
    MISSION = "Your goal: go to the red ball."

    def _reset_state(self, seed: int) -> None:
        rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x67D1]))
        cells = [(r, c) for r in range(self.SIZE) for c in range(self.SIZE)]
        picks = rng.choice(len(cells), size=4, replace=False)
        self.agent = cells[picks[0]]
        self.obj_pos = {name: cells[picks[i + 1]] for i, name in enumerate(self.OBJECTS)}

    def _apply(self, action: str) -> tuple[float, bool]:
        name = action.removeprefix("go to ")
        tr, tc = self.obj_pos[name]
        r, c = self.agent
        if r != tr:
            r += 1 if tr > r else -1
        elif c != tc:
            c += 1 if tc > c else -1
        self.agent = (r, c)
        if self.agent == self.obj_pos["red ball"]:
            return shaped_success_reward(self._step_index + 1, self.max_steps), True
        return 0.0, False

    def _state_text(self) -> str:
        # coordinate numbers stay bare words (the period is its own token) so
        # the whitespace vocabulary enumerates cleanly
        r, c = self.agent
        parts = [self.MISSION, f"You are at row {r + 1} column {c + 1} ."]
        for name, (orow, ocol) in self.obj_pos.items():
            parts.append(f"The {name} is at row {orow + 1} column {ocol + 1} .")
        return " ".join(parts)

    def _state_actions(self) -> list[str]:
        return [f"go to {name}" for name in self.OBJECTS]

    @property
    def action_catalog(self) -> tuple[str, ...]:
        return tuple(f"go to {name}" for name in self.OBJECTS)

    def _all_texts(self) -> list[str]:
        texts = [self.MISSION, "You are at row 1 column 1 ."]
        for name in self.OBJECTS:
            texts.append(f"The {name} is at row 1 column 1 .")
        texts.extend(str(i) for i in range(1, self.SIZE + 1))
        return texts

    def _possible_rewards(self) -> list[float]:
        rewards = [0.0]
        rewards.extend(shaped_success_reward(t, self.default_max_steps)
                       for t in range(1, self.default_max_steps + 1))
        if self.max_steps != self.default_max_steps:
            rewards.extend(shaped_success_reward(t, self.max_steps)
                           for t in range(1, self.max_steps + 1))
        return rewards


_ENV_CLASSES = {cls.__name__: cls for cls in (LoopTrapRooms, KeyDoorQuest, GridCommand)}


def make_env(spec: EnvSpec) -> TextEnv:
    try:
        cls = _ENV_CLASSES[spec.name]
    except KeyError:
        raise ConfigError(f"unknown environment name: {spec.name!r}") from None
    return cls(spec)


def dump_episode_trace(records, fh) -> None:
    """Write one JSON object per step: {t, obs_text, valid_actions, action, reward, done}."""
    for rec in records:
        fh.write(json.dumps({
            "t": rec["t"],
            "obs_text": rec["obs_text"],
            "valid_actions": list(rec["valid_actions"]),
            "action": rec["action"],
            "reward": rec["reward"],
            "done": rec["done"],
        }) + "\n")
