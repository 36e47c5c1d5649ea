from __future__ import annotations

import numpy as np
import pytest

from turntaking.audio import AudioBuffer
from turntaking.corpus import Conversation, Utterance


def sine(freq: float, seconds: float, sample_rate: int = 16000, amp: float = 0.5, phase: float = 0.0) -> AudioBuffer:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return AudioBuffer(amp * np.sin(2 * np.pi * freq * t + phase), sample_rate)


def make_conv(speakers, tags=None, conv_id="c", gap=0.5, dur=1.0, audio=True) -> Conversation:
    tags = tags or ["sd"] * len(speakers)
    utts, t = [], 0.0
    for i, (spk, tag) in enumerate(zip(speakers, tags)):
        utts.append(Utterance(f"{conv_id}_{i}", spk, t, t + dur, tag,
                              audio_ref=f"{conv_id}/{i}.wav" if audio else None))
        t += dur + gap
    return Conversation(conv_id, tuple(utts))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# (criterion, passed, detail) rows filled by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str) -> bool:
    ACCEPTANCE.append((name, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}")
    return bool(passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
