"""Seeded synthetic dyadic conversations with rendered harmonic audio.

Turn transitions are sampled from per-intent switch probabilities, and every
utterance is rendered as a 3-harmonic tone whose pitch contour, level and
duration depend on its intent. Utterances followed by a switch end on a pitch
rise and those followed by a hold end on a fall, so turn outcomes are audible
as well as correlated with intent.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .audio import AudioBuffer, write_wav
from .corpus import Conversation, IntentClass, TurnLabel, Utterance, conversation_to_json

CANONICAL_TAG = {
    IntentClass.STATEMENT: "sd",
    IntentClass.OPINION: "sv",
    IntentClass.AGREE: "aa",
    IntentClass.ABANDON: "%",
    IntentClass.BACKCHANNEL: "b",
    IntentClass.QUESTION: "qy",
    IntentClass.ANSWER: "ny",
}

# (holds, switches) per intent in the reference corpus statistics
REFERENCE_COUNTS = {
    IntentClass.STATEMENT: (26332, 12722),
    IntentClass.OPINION: (8066, 5227),
    IntentClass.AGREE: (3997, 1417),
    IntentClass.ABANDON: (3887, 3203),
    IntentClass.BACKCHANNEL: (6225, 10678),
    IntentClass.QUESTION: (752, 2369),
    IntentClass.ANSWER: (1197, 615),
}

CONTOUR_SLOPE = {"rising": 0.40, "falling": -0.30, "flat": 0.0}


@dataclass(frozen=True)
class Recipe:
    contour: str
    base_f0: float
    duration_s: tuple[float, float]
    amplitude: float

    def __post_init__(self):
        if self.contour not in CONTOUR_SLOPE:
            raise ValueError(f"unknown contour {self.contour!r}")
        lo, hi = self.duration_s
        if not 0.05 < lo <= hi:
            raise ValueError("duration range must exceed the 25 ms analysis window")
        if self.base_f0 <= 0 or not 0 <= self.amplitude <= 1:
            raise ValueError("need base_f0 > 0 and amplitude in [0, 1]")


def _default_prior() -> tuple[float, ...]:
    totals = np.array([sum(REFERENCE_COUNTS[c]) for c in IntentClass], dtype=float)
    return tuple(float(x) for x in totals / totals.sum())


def _default_p_switch() -> tuple[float, ...]:
    return tuple(REFERENCE_COUNTS[c][1] / sum(REFERENCE_COUNTS[c]) for c in IntentClass)


def _default_recipes() -> tuple[Recipe, ...]:
    return (
        Recipe("falling", 150.0, (0.5, 0.9), 0.5),   # statement
        Recipe("falling", 230.0, (0.5, 0.9), 0.5),   # opinion
        Recipe("flat", 270.0, (0.25, 0.45), 0.35),   # agree
        Recipe("flat", 185.0, (0.3, 0.6), 0.2),      # abandon
        Recipe("flat", 120.0, (0.15, 0.3), 0.12),    # backchannel
        Recipe("rising", 170.0, (0.4, 0.8), 0.5),    # question
        Recipe("flat", 320.0, (0.2, 0.4), 0.45),     # answer
    )


@dataclass(frozen=True)
class SynthConfig:
    n_conversations: int = 200
    utterances_per_conversation: tuple[int, int] = (30, 50)
    intent_prior: tuple[float, ...] = field(default_factory=_default_prior)
    p_switch: tuple[float, ...] = field(default_factory=_default_p_switch)
    recipes: tuple[Recipe, ...] = field(default_factory=_default_recipes)
    snr_db: float = 30.0
    overlap_fraction: float = 0.1
    turn_cue: float = 0.25
    cue_fraction: float = 0.3
    cue_reliability: float = 0.9
    f0_jitter: float = 0.08
    speaker_f0_spread: float = 0.15
    sample_rate: int = 8000
    seed: int = 0

    def __post_init__(self):
        n = len(IntentClass)
        if len(self.intent_prior) != n or len(self.p_switch) != n or len(self.recipes) != n:
            raise ValueError(f"intent prior, switch probabilities and recipes need {n} entries")
        prior = np.asarray(self.intent_prior)
        if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
            raise ValueError("intent_prior must lie on the simplex")
        if any(not 0 <= p <= 1 for p in self.p_switch):
            raise ValueError("p_switch entries must lie in [0, 1]")
        lo, hi = self.utterances_per_conversation
        if not 2 <= lo <= hi:
            raise ValueError("need 2 <= min utterances <= max utterances")
        if not 0 <= self.overlap_fraction <= 1:
            raise ValueError("overlap_fraction must lie in [0, 1]")
        if self.sample_rate not in (8000, 16000):
            raise ValueError("sample_rate must be 8000 or 16000")
        if self.n_conversations < 1:
            raise ValueError("n_conversations must be positive")
        if not 0 <= self.turn_cue < 1 or not 0 < self.cue_fraction <= 1:
            raise ValueError("turn_cue must lie in [0, 1) and cue_fraction in (0, 1]")
        if not 0 <= self.cue_reliability <= 1:
            raise ValueError("cue_reliability must lie in [0, 1]")
        if not 0 <= self.f0_jitter < 1 or not 0 <= self.speaker_f0_spread < 1:
            raise ValueError("f0_jitter and speaker_f0_spread must lie in [0, 1)")
        recipes = tuple(r if isinstance(r, Recipe) else Recipe(**r) for r in self.recipes)
        object.__setattr__(self, "recipes", recipes)

    def to_dict(self) -> dict:
        return asdict(self)


def default_config(**overrides) -> SynthConfig:
    return SynthConfig(**overrides)


@dataclass(frozen=True)
class SampledConversation:
    conversation: Conversation
    intents: list[IntentClass]
    transitions: list[TurnLabel | None]


def sample_conversation(config: SynthConfig, rng: np.random.Generator, conv_id: str = "synth") -> SampledConversation:
    lo, hi = config.utterances_per_conversation
    n = int(rng.integers(lo, hi + 1))
    intents = [IntentClass(int(i)) for i in rng.choice(len(IntentClass), size=n, p=config.intent_prior)]
    transitions: list[TurnLabel | None] = []
    for i, intent in enumerate(intents):
        if i + 1 < n:
            switch = rng.random() < config.p_switch[intent]
            transitions.append(TurnLabel.SWITCH if switch else TurnLabel.HOLD)
        else:
            transitions.append(None)

    speaker = "A" if rng.random() < 0.5 else "B"
    utts = []
    start = 0.5
    max_end = 0.0
    prev_dur = 0.0
    for i, intent in enumerate(intents):
        dlo, dhi = config.recipes[intent].duration_s
        dur = round(float(rng.uniform(dlo, dhi)), 4)
        if i > 0:
            prev = utts[-1]
            if transitions[i - 1] is TurnLabel.HOLD:
                start = round(max_end + float(rng.uniform(0.1, 0.4)), 4)
            elif rng.random() < config.overlap_fraction:
                overlap = max(0.01, round(float(rng.uniform(0.1, 0.5)) * prev_dur, 4))
                start = round(prev.end_s - overlap, 4)
            else:
                start = round(max_end + float(rng.uniform(0.0, 0.5)), 4)
            if transitions[i - 1] is TurnLabel.SWITCH:
                speaker = "B" if speaker == "A" else "A"
        end = round(start + dur, 4)
        utt_id = f"{conv_id}_{i:03d}"
        utts.append(Utterance(utt_id, speaker, start, end, CANONICAL_TAG[intent],
                              audio_ref=f"{conv_id}/{utt_id}.wav"))
        max_end = max(max_end, end)
        prev_dur = dur
    return SampledConversation(Conversation(conv_id, tuple(utts)), intents, transitions)


def f0_trajectory(recipe: Recipe, n_samples: int, turn: TurnLabel | None = None,
                  turn_cue: float = 0.0, cue_fraction: float = 0.3, f0_scale: float = 1.0) -> np.ndarray:
    """Per-sample f0: linear contour over the utterance plus an optional turn-final bend."""
    pos = np.linspace(0.0, 1.0, n_samples)
    f0 = f0_scale * recipe.base_f0 * (1.0 + CONTOUR_SLOPE[recipe.contour] * pos)
    if turn is not None and turn_cue > 0:
        ramp = np.clip((pos - (1.0 - cue_fraction)) / cue_fraction, 0.0, 1.0)
        bend = turn_cue if turn is TurnLabel.SWITCH else -0.6 * turn_cue
        f0 = f0 * (1.0 + bend * ramp)
    return f0


def render_utterance(intent: IntentClass, recipe: Recipe, duration: float, rng: np.random.Generator,
                     sample_rate: int = 8000, snr_db: float = 30.0, turn: TurnLabel | None = None,
                     turn_cue: float = 0.0, cue_fraction: float = 0.3, f0_scale: float = 1.0) -> AudioBuffer:
    """Three-harmonic tone following the recipe's contour, with white noise at ``snr_db``."""
    n = int(round(duration * sample_rate))
    if n < 2 * int(round(0.025 * sample_rate)):
        raise ValueError("duration must cover at least two analysis windows")
    f0 = f0_trajectory(recipe, n, turn, turn_cue, cue_fraction, f0_scale)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate + rng.uniform(0, 2 * np.pi)
    tone = (np.sin(phase) + 0.5 * np.sin(2 * phase) + 0.25 * np.sin(3 * phase)) / 1.75
    ramp_n = min(n // 4, int(0.01 * sample_rate))
    env = np.ones(n)
    if ramp_n > 0:
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp_n) / ramp_n)
        env[:ramp_n] = fade
        env[n - ramp_n:] = fade[::-1]
    signal = recipe.amplitude * env * tone
    rms = np.sqrt(np.mean(signal ** 2))
    if rms > 0:
        signal = signal + rng.normal(0.0, rms / 10 ** (snr_db / 20), n)
    return AudioBuffer(np.clip(signal, -1.0, 1.0), sample_rate)


@dataclass
class SynthCorpus:
    config: SynthConfig
    samples: list[SampledConversation]
    audio: dict[str, AudioBuffer]

    @property
    def conversations(self) -> list[Conversation]:
        return [s.conversation for s in self.samples]


def _conv_id(index: int) -> str:
    return f"synth{index:04d}"


def sample_corpus(config: SynthConfig) -> list[SampledConversation]:
    """Conversation structure only (no audio); stream per conversation index."""
    return [
        sample_conversation(config, np.random.default_rng([config.seed, i, 0]), _conv_id(i))
        for i in range(config.n_conversations)
    ]


def render_conversation(config: SynthConfig, index: int, sampled: SampledConversation) -> dict[str, AudioBuffer]:
    """Render every utterance of one conversation.

    Each speaker gets a fixed pitch offset, each utterance a small pitch jitter,
    and the turn-final cue is flipped with probability 1 - cue_reliability.
    """
    rng = np.random.default_rng([config.seed, index, 1])
    spread = config.speaker_f0_spread
    speaker_scale = {spk: 1.0 + float(rng.uniform(-spread, spread)) for spk in ("A", "B")}
    out = {}
    for utt, intent, turn in zip(sampled.conversation.utterances, sampled.intents, sampled.transitions):
        scale = speaker_scale[utt.speaker] * (1.0 + float(rng.uniform(-config.f0_jitter, config.f0_jitter)))
        cue = turn
        if turn is not None and rng.random() >= config.cue_reliability:
            cue = TurnLabel.HOLD if turn is TurnLabel.SWITCH else TurnLabel.SWITCH
        out[utt.id] = render_utterance(intent, config.recipes[intent], utt.end_s - utt.start_s, rng,
                                       config.sample_rate, config.snr_db, cue, config.turn_cue,
                                       config.cue_fraction, scale)
    return out


def synthesize_corpus(config: SynthConfig) -> SynthCorpus:
    samples = sample_corpus(config)
    audio: dict[str, AudioBuffer] = {}
    for i, s in enumerate(samples):
        audio.update(render_conversation(config, i, s))
    return SynthCorpus(config, samples, audio)


def write_corpus(config: SynthConfig, out_dir: str | Path) -> Path:
    """Write manifests/, audio/ and metadata.json under ``out_dir``; returns the manifest directory.

    Manifest ``audio`` paths are relative to ``out_dir/audio``.
    """
    out = Path(out_dir)
    man_dir, audio_dir = out / "manifests", out / "audio"
    man_dir.mkdir(parents=True, exist_ok=True)
    for i, sampled in enumerate(sample_corpus(config)):
        conv = sampled.conversation
        (audio_dir / conv.id).mkdir(parents=True, exist_ok=True)
        for utt_id, buf in render_conversation(config, i, sampled).items():
            write_wav(audio_dir / conv.id / f"{utt_id}.wav", buf)
        manifest = conversation_to_json(conv)
        for u in manifest["utterances"]:
            u.pop("intent", None)
        (man_dir / f"{conv.id}.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    (out / "metadata.json").write_text(json.dumps({"generator": "turntaking.synthgen", "config": config.to_dict()},
                                                  indent=1) + "\n", encoding="utf-8")
    return man_dir
