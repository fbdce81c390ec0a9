"""Action-prior extraction: prompts, candidate scoring, and the format reward.

Candidate actions are never parsed out of free-form generations. Each
admissible action string is appended to the prompt as a label and scored by
its mean token log probability; the temperature-softmaxed scores form the
prior. An optional analysis prefix can be sampled first and shared across the
whole candidate set for that state.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import token_lm
from .envs import TextEnv, Observation, format_reward_value
from .errors import ConfigError, OracleError
from .token_lm import LmParams, Vocab, build_vocab

# words the history renderer and action-list separator emit beyond the
# template text itself
PROMPT_EXTRA_WORDS = ("Observation:", "Action:", "Reward:", "|")

_PLACEHOLDERS = ("{HISTORY}", "{OBSERVATION}", "{VALID_ACTIONS}")


def load_template(path=None) -> str:
    if path is None:
        return resources.files("priorzero.templates").joinpath("prompt_default.txt").read_text()
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read()


def _template_words(template: str) -> set[str]:
    text = template
    for ph in _PLACEHOLDERS:
        text = text.replace(ph, " ")
    return set(text.split())


def build_env_vocab(env: TextEnv, template: str | None = None) -> Vocab:
    """Vocabulary covering everything the env, the prompt template, and the
    history renderer can emit."""
    template = template if template is not None else load_template()
    for ph in _PLACEHOLDERS:
        if ph not in template:
            raise ConfigError(f"prompt template is missing placeholder {ph}")
    words = set(env.vocabulary()) | _template_words(template) | set(PROMPT_EXTRA_WORDS)
    return build_vocab(words)


@dataclass(frozen=True)
class PromptContext:
    system_text: str
    history: tuple[tuple[str, str, float], ...]   # (obs_text, action, reward)
    current_obs: str
    valid_actions: tuple[str, ...]
    cot_prefix: str | None = None


@dataclass(frozen=True)
class PriorDistribution:
    probs: np.ndarray        # padded action space; zero exactly on invalid slots
    raw_scores: np.ndarray   # mean per-token log probs; zero on invalid slots
    temperature: float
    valid_mask: np.ndarray


def format_reward(output_text: str) -> int:
    """1 iff the text is exactly "Reasoning: <nonempty>" newline
    "Action: <nonempty>", with exactly one occurrence of each keyword."""
    if output_text.count("Reasoning:") != 1 or output_text.count("Action:") != 1:
        return 0
    m = re.fullmatch(r"Reasoning:[ \t]*(\S[^\n]*)\nAction:[ \t]*(\S[^\n]*)\n?", output_text)
    return 1 if m else 0


class PriorOracle:
    """Scores admissible actions with the token model over a deterministic
    prompt serialization."""

    def __init__(self, vocab: Vocab, action_catalog: tuple[str, ...],
                 template: str | None = None, history_window: int = 4,
                 cot_max_tokens: int = 16, cot_temperature: float = 1.0):
        self.vocab = vocab
        self.action_catalog = tuple(action_catalog)
        self.template = template if template is not None else load_template()
        self.history_window = history_window
        self.cot_max_tokens = cot_max_tokens
        self.cot_temperature = cot_temperature
        lines = self.template.split("\n")
        self.system_text = lines[0]

    # -- prompt construction -------------------------------------------------

    def build_prompt(self, history, observation: Observation,
                     cot_prefix: str | None = None) -> PromptContext:
        if len(observation.valid_actions) < 1:
            raise ConfigError("observation has no valid actions")
        window = tuple(history)[-self.history_window:] if self.history_window else ()
        return PromptContext(
            system_text=self.system_text,
            history=tuple((o, a, float(r)) for o, a, r in window),
            current_obs=observation.text,
            valid_actions=tuple(observation.valid_actions),
            cot_prefix=cot_prefix,
        )

    def render_history(self, ctx: PromptContext) -> str:
        lines = []
        for obs_text, action, reward in ctx.history:
            lines.append(f"Observation: {obs_text}")
            lines.append(f"Action: {action}")
            lines.append(f"Reward: {format_reward_value(reward)}")
        return "".join(line + "\n" for line in lines)

    def prompt_text(self, ctx: PromptContext) -> str:
        return (self.template
                .replace("{HISTORY}", self.render_history(ctx))
                .replace("{OBSERVATION}", ctx.current_obs)
                .replace("{VALID_ACTIONS}", " | ".join(ctx.valid_actions)))

    def prompt_token_ids(self, ctx: PromptContext) -> list[int]:
        return [self.vocab.bos_id] + self.vocab.tokenize(self.prompt_text(ctx).rstrip("\n"))

    def label_token_ids(self, action: str, cot_prefix: str | None):
        """(token ids, count of analysis-prefix tokens). Without a prefix the
        label is "Action: <action><EOS>"; with one it is
        "<prefix> <action><EOS>"."""
        if cot_prefix:
            cot_ids = self.vocab.tokenize(cot_prefix)
            return cot_ids + self.vocab.tokenize(action) + [self.vocab.eos_id], len(cot_ids)
        return self.vocab.tokenize(f"Action: {action}") + [self.vocab.eos_id], 0

    # -- operations ------------------------------------------------------------

    def generate_cot(self, params: LmParams, ctx: PromptContext,
                     rng: np.random.Generator) -> str:
        """Sample an analysis prefix, stopping at the first blank line
        (NEWLINE token) or EOS; trailing stop tokens are dropped, so an
        immediate stop yields the empty string."""
        prompt = self.prompt_token_ids(ctx)
        out = token_lm.generate(params, prompt, self.cot_max_tokens,
                                self.cot_temperature,
                                {self.vocab.newline_id}, rng)
        while out and out[-1] in (self.vocab.newline_id, self.vocab.eos_id):
            out.pop()
        return self.vocab.detokenize(out)

    def score_actions(self, params: LmParams, ctx: PromptContext,
                      temperature: float = 1.0) -> PriorDistribution:
        """Mean token log probability of each admissible action's label,
        softmaxed at ``temperature`` over the admissible slots."""
        if temperature <= 0:
            raise ConfigError("scoring temperature must be positive")
        prompt = self.prompt_token_ids(ctx)
        n_pad = len(self.action_catalog)
        scores = np.zeros(n_pad)
        mask = np.zeros(n_pad, dtype=bool)
        for action in ctx.valid_actions:
            idx = self.action_catalog.index(action)
            label, _ = self.label_token_ids(action, ctx.cot_prefix)
            scored = token_lm.sequence_logprob(params, prompt, label, "mean")
            scores[idx] = scored.mean_logprob
            mask[idx] = True
        if not np.any(np.isfinite(scores[mask])):
            raise OracleError("all candidate action scores are non-finite")
        shifted = scores[mask] / temperature
        shifted = shifted - shifted.max()
        e = np.exp(shifted)
        probs = np.zeros(n_pad)
        probs[mask] = e / e.sum()
        return PriorDistribution(probs, np.where(mask, scores, 0.0), temperature, mask)


class ScriptedPrior:
    """Fixed prior for experiments: puts ``mass`` on a favored action when it
    is admissible and spreads the rest uniformly; falls back to uniform."""

    def __init__(self, action_catalog: tuple[str, ...], favored_action: str, mass: float = 0.8):
        if not 0.0 < mass <= 1.0:
            raise ConfigError("scripted mass must lie in (0, 1]")
        self.action_catalog = tuple(action_catalog)
        self.favored_action = favored_action
        self.mass = mass

    def score_actions(self, observation: Observation) -> PriorDistribution:
        n_pad = len(self.action_catalog)
        mask = np.zeros(n_pad, dtype=bool)
        for a in observation.valid_actions:
            mask[self.action_catalog.index(a)] = True
        probs = np.zeros(n_pad)
        k = int(mask.sum())
        if self.favored_action in observation.valid_actions and k > 1:
            fav = self.action_catalog.index(self.favored_action)
            probs[mask] = (1.0 - self.mass) / (k - 1)
            probs[fav] = self.mass
        else:
            probs[mask] = 1.0 / k
        scores = np.where(mask, np.log(np.maximum(probs, 1e-12)), 0.0)
        return PriorDistribution(probs, scores, 1.0, mask)


class UniformPrior:
    """Uniform over whatever is admissible."""

    def __init__(self, action_catalog: tuple[str, ...]):
        self.action_catalog = tuple(action_catalog)

    def score_actions(self, observation: Observation) -> PriorDistribution:
        n_pad = len(self.action_catalog)
        mask = np.zeros(n_pad, dtype=bool)
        for a in observation.valid_actions:
            mask[self.action_catalog.index(a)] = True
        probs = np.zeros(n_pad)
        probs[mask] = 1.0 / mask.sum()
        return PriorDistribution(probs, np.where(mask, np.log(probs, where=mask), 0.0), 1.0, mask)
