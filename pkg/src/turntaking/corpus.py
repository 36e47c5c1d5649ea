"""Conversations, intent mapping, turn labels, data splits and corpus statistics."""
from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .rng import SplitMix64


class IntentClass(enum.IntEnum):
    STATEMENT = 0
    OPINION = 1
    AGREE = 2
    ABANDON = 3
    BACKCHANNEL = 4
    QUESTION = 5
    ANSWER = 6

    @property
    def label(self) -> str:
        return self.name.lower()


class TurnLabel(enum.IntEnum):
    HOLD = 0
    SWITCH = 1

    @property
    def label(self) -> str:
        return self.name.lower()


class SwitchType(str, enum.Enum):
    SMOOTH = "smooth"
    OVERLAPPING = "overlapping"


N_INTENTS = len(IntentClass)
N_TURN_CLASSES = len(TurnLabel)

DA_TO_INTENT: dict[str, IntentClass] = {
    **dict.fromkeys(["sd", "h", "bf"], IntentClass.STATEMENT),
    **dict.fromkeys(["sv", "ad", "sv@"], IntentClass.OPINION),
    "aa": IntentClass.AGREE,
    **dict.fromkeys(["%", "%-"], IntentClass.ABANDON),
    **dict.fromkeys(["b", "bh"], IntentClass.BACKCHANNEL),
    **dict.fromkeys(["qy", "qo", "qh"], IntentClass.QUESTION),
    **dict.fromkeys(["no", "ny", "ng", "arp"], IntentClass.ANSWER),
}


def map_da_tag(tag: str) -> IntentClass | None:
    """Map a SwDA dialogue-act tag to one of the 7 intent classes (None if unmapped)."""
    return DA_TO_INTENT.get(tag.strip())


@dataclass(frozen=True)
class Utterance:
    id: str
    speaker: str
    start_s: float | None
    end_s: float | None
    da_tag: str
    turn: TurnLabel | None = None
    audio_ref: str | None = None
    features_ref: str | None = None

    def __post_init__(self):
        if self.speaker not in ("A", "B"):
            raise ValueError(f"utterance {self.id}: speaker must be 'A' or 'B', got {self.speaker!r}")
        if self.timed:
            if self.start_s < 0:
                raise ValueError(f"utterance {self.id}: negative start time")
            if not self.end_s > self.start_s:
                raise ValueError(f"utterance {self.id}: end_s must exceed start_s")

    @property
    def intent(self) -> IntentClass | None:
        return map_da_tag(self.da_tag)

    @property
    def timed(self) -> bool:
        return self.start_s is not None and self.end_s is not None

    def sort_key(self) -> tuple:
        if not self.timed:
            return (math.inf, math.inf, self.id)
        return (self.start_s, self.end_s, self.id)


@dataclass(frozen=True)
class Conversation:
    id: str
    utterances: tuple[Utterance, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise ValueError(f"conversation {self.id} has no utterances")

    def __len__(self) -> int:
        return len(self.utterances)

    def sorted(self) -> Conversation:
        return dataclasses.replace(self, utterances=tuple(sorted(self.utterances, key=Utterance.sort_key)))

    def is_sorted(self) -> bool:
        keys = [u.sort_key() for u in self.utterances]
        return all(a <= b for a, b in zip(keys, keys[1:]))


def derive_turn_labels(conv: Conversation) -> Conversation:
    """Label each utterance switch/hold by comparing its speaker with the next one."""
    utts = conv.utterances
    if any(not u.timed for u in utts):
        raise ValueError(f"conversation {conv.id}: cannot order untimed utterances")
    if not conv.is_sorted():
        raise ValueError(f"conversation {conv.id}: utterances are not sorted by start time")
    labelled = []
    for i, u in enumerate(utts):
        if i + 1 < len(utts):
            turn = TurnLabel.SWITCH if utts[i + 1].speaker != u.speaker else TurnLabel.HOLD
        else:
            turn = None
        labelled.append(dataclasses.replace(u, turn=turn))
    return dataclasses.replace(conv, utterances=tuple(labelled))


def classify_switch_type(cur: Utterance, nxt: Utterance) -> SwitchType:
    if cur.turn is not TurnLabel.SWITCH:
        raise ValueError(f"utterance {cur.id} is not followed by a switch")
    # zero gap counts as smooth: overlap needs strictly simultaneous speech
    return SwitchType.OVERLAPPING if nxt.start_s < cur.end_s else SwitchType.SMOOTH


def switch_types(conv: Conversation) -> list[SwitchType | None]:
    """Switch type per utterance (None for holds and the final utterance)."""
    utts = conv.utterances
    out: list[SwitchType | None] = []
    for i, u in enumerate(utts):
        if u.turn is TurnLabel.SWITCH:
            out.append(classify_switch_type(u, utts[i + 1]))
        else:
            out.append(None)
    return out


def filter_corpus(convs: Iterable[Conversation]) -> list[Conversation]:
    """Drop unmapped/untimed/audio-less utterances, relabel, drop conversations under 2 utterances."""
    kept = []
    for conv in convs:
        utts = [
            u
            for u in conv.utterances
            if u.intent is not None and u.timed and (u.audio_ref or u.features_ref)
        ]
        if len(utts) < 2:
            continue
        kept.append(derive_turn_labels(Conversation(conv.id, tuple(utts)).sorted()))
    return kept


def split_folds(convs: Sequence[Conversation], k: int, seed: int) -> list[tuple[list[Conversation], list[Conversation]]]:
    """K-fold split on conversations; earlier groups absorb the remainder."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > len(convs):
        raise ValueError(f"cannot make {k} folds from {len(convs)} conversations")
    order = list(range(len(convs)))
    SplitMix64(seed).shuffle(order)
    base, extra = divmod(len(convs), k)
    groups, pos = [], 0
    for i in range(k):
        size = base + (1 if i < extra else 0)
        groups.append(order[pos:pos + size])
        pos += size
    folds = []
    for i in range(k):
        test = [convs[j] for j in groups[i]]
        train = [convs[j] for g, grp in enumerate(groups) if g != i for j in grp]
        folds.append((train, test))
    return folds


def split_validation(
    train: Sequence[Conversation], fraction: float = 0.33, seed: int = 0
) -> tuple[list[Conversation], list[Conversation]]:
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    n_val = math.floor(fraction * len(train) + 0.5)
    if n_val == 0 or n_val == len(train):
        raise ValueError(f"validation split of {len(train)} conversations at {fraction} leaves an empty side")
    order = list(range(len(train)))
    SplitMix64(seed).shuffle(order)
    val_idx = set(order[:n_val])
    rest = [c for i, c in enumerate(train) if i not in val_idx]
    val = [c for i, c in enumerate(train) if i in val_idx]
    return rest, val


@dataclass(frozen=True)
class ContingencyTable:
    """Intent x {hold, switch} counts."""

    counts: np.ndarray

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or (counts < 0).any():
            raise ValueError("counts must be a 2-D array of non-negative integers")
        object.__setattr__(self, "counts", counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def format(self) -> str:
        col_tot = self.counts.sum(axis=0)
        lines = [f"{'intent':<12} {'holds':>14} {'switches':>14}"]
        for c in IntentClass:
            cells = []
            for t in TurnLabel:
                n = self.counts[c, t]
                pct = 100.0 * n / col_tot[t] if col_tot[t] else 0.0
                cells.append(f"{n:>7,d} ({pct:4.1f})")
            lines.append(f"{c.label:<12} {cells[0]:>14} {cells[1]:>14}")
        lines.append(f"{'total':<12} {col_tot[0]:>14,d} {col_tot[1]:>14,d}")
        return "\n".join(lines)


def contingency_table(convs: Iterable[Conversation]) -> ContingencyTable:
    counts = np.zeros((N_INTENTS, N_TURN_CLASSES), dtype=np.int64)
    for conv in convs:
        for u in conv.utterances:
            if u.turn is not None and u.intent is not None:
                counts[u.intent, u.turn] += 1
    return ContingencyTable(counts)


class ChiSquareResult(NamedTuple):
    statistic: float
    df: int
    p: float


def _gamma_series_p(a: float, x: float) -> float:
    term = 1.0 / a
    total = term
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cf_q(a: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for Q(a, x)
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return math.exp(-x + a * math.log(x) - math.lgamma(a)) * h


def gammaincc(a: float, x: float) -> float:
    """Regularized upper incomplete gamma Q(a, x)."""
    if a <= 0:
        raise ValueError("a must be positive")
    if x < 0:
        raise ValueError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < a + 1.0:
        return 1.0 - _gamma_series_p(a, x)
    return _gamma_cf_q(a, x)


def chi2_sf(statistic: float, df: int) -> float:
    return gammaincc(df / 2.0, statistic / 2.0)


def chi_square_independence(table: ContingencyTable | np.ndarray) -> ChiSquareResult:
    """Pearson chi-square test of independence between rows and columns."""
    counts = table.counts if isinstance(table, ContingencyTable) else np.asarray(table)
    observed = counts.astype(np.float64)
    rows = observed.sum(axis=1)
    cols = observed.sum(axis=0)
    if (rows <= 0).any() or (cols <= 0).any():
        raise ValueError("chi-square test needs every row and column total to be positive")
    expected = np.outer(rows, cols) / observed.sum()
    stat = float(((observed - expected) ** 2 / expected).sum())
    df = (observed.shape[0] - 1) * (observed.shape[1] - 1)
    return ChiSquareResult(stat, df, chi2_sf(stat, df))


# -- manifest interchange -----------------------------------------------------

def _utterance_from_json(obj: dict) -> Utterance:
    turn = obj.get("turn")
    return Utterance(
        id=str(obj["id"]),
        speaker=obj["speaker"],
        start_s=None if obj.get("start_s") is None else float(obj["start_s"]),
        end_s=None if obj.get("end_s") is None else float(obj["end_s"]),
        da_tag=str(obj.get("da_tag", "")),
        turn=None if turn is None else TurnLabel[turn.upper()],
        audio_ref=obj.get("audio"),
        features_ref=obj.get("features"),
    )


def conversation_from_json(obj: dict) -> Conversation:
    utts = tuple(_utterance_from_json(u) for u in obj["utterances"])
    return Conversation(str(obj["id"]), utts)


def conversation_to_json(conv: Conversation) -> dict:
    utts = []
    for u in conv.utterances:
        d = {"id": u.id, "speaker": u.speaker, "start_s": u.start_s, "end_s": u.end_s, "da_tag": u.da_tag}
        if u.audio_ref is not None:
            d["audio"] = u.audio_ref
        if u.features_ref is not None:
            d["features"] = u.features_ref
        if u.intent is not None:
            d["intent"] = u.intent.label
        if u.turn is not None:
            d["turn"] = u.turn.label
        utts.append(d)
    return {"id": conv.id, "utterances": utts}


def load_corpus(path: str | Path) -> list[Conversation]:
    """Load a directory of per-conversation manifests or a single JSON file.

    A file may hold one conversation object or an array of them. Labels stored
    in the file are kept only if the utterances are already in start-time order.
    """
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    convs = []
    for f in files:
        data = json.loads(f.read_text(encoding="utf-8"))
        objs = data if isinstance(data, list) else [data]
        convs.extend(conversation_from_json(o) for o in objs)
    out = []
    for c in convs:
        if not c.is_sorted():
            c = Conversation(c.id, tuple(dataclasses.replace(u, turn=None) for u in c.utterances)).sorted()
        out.append(c)
    return out


def save_corpus(convs: Sequence[Conversation], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps([conversation_to_json(c) for c in convs], indent=1) + "\n", encoding="utf-8"
    )
