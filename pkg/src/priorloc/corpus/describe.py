"""Canned action descriptions standing in for a multimodal LLM.

The stub is class-keyed: every video of a class gets the same key and
complete sentence. A describer reachable over HTTP can replace it behind the
same two methods.
"""

from __future__ import annotations

import json
import math
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ArgumentError, ConfigurationError
from .vocab import tokenize

# name, words naming the action, object, (lead-in verb, key verb, follow-through verb)
_BUILTIN = [
    ("HighJump", "high jump", "bar", ("sprint", "leap", "land")),
    ("LongJump", "long jump", "sand", ("run", "jump", "tumble")),
    ("PoleVault", "pole vault", "pole", ("jog", "vault", "drop")),
    ("JavelinThrow", "javelin throw", "javelin", ("stride", "launch", "recover")),
    ("BasketballDunk", "basketball dunk", "rim", ("dribble", "dunk", "hang")),
    ("BaseballPitch", "baseball pitch", "ball", ("step", "pitch", "follow")),
    ("Billiards", "billiards", "cue", ("aim", "strike", "watch")),
    ("CleanAndJerk", "clean and jerk", "barbell", ("crouch", "lift", "hold")),
    ("CliffDiving", "cliff diving", "water", ("climb", "plunge", "swim")),
    ("CricketBowling", "cricket bowling", "ball", ("approach", "bowl", "turn")),
    ("CricketShot", "cricket shot", "delivery", ("stand", "bat", "glance")),
    ("Diving", "diving", "board", ("bounce", "dive", "enter")),
    ("FrisbeeCatch", "frisbee catch", "frisbee", ("chase", "catch", "stop")),
    ("GolfSwing", "golf swing", "club", ("address", "drive", "pose")),
    ("HammerThrow", "hammer throw", "hammer", ("spin", "hurl", "balance")),
    ("Shotput", "shot put", "shot", ("glide", "heave", "reverse")),
    ("SoccerPenalty", "soccer penalty", "ball", ("walk", "kick", "celebrate")),
    ("TennisSwing", "tennis swing", "racket", ("toss", "serve", "settle")),
    ("ThrowDiscus", "throw discus", "discus", ("rotate", "fling", "brake")),
    ("VolleyballSpiking", "volleyball spiking", "net", ("jumpstep", "spike", "descend")),
]

MAX_CLASSES = len(_BUILTIN)


@dataclass(frozen=True)
class ClassDescription:
    name: str
    key_sentence: str
    complete_sentence: str
    verbs: tuple[str, ...]

    @property
    def key_verb(self) -> str:
        return self.verbs[len(self.verbs) // 2]


def _builtin_row(name, words, obj, verbs) -> ClassDescription:
    lead, key, follow = verbs
    key_sentence = f"a person is seen to {key} the {obj} in one motion"
    complete = (f"the athlete will {lead} at the start then {key} the {obj} with force "
                f"and {follow} at the end of the {words} action")
    return ClassDescription(name, key_sentence, complete, verbs)


def builtin_table(n_classes: int) -> list[ClassDescription]:
    if not 2 <= n_classes <= MAX_CLASSES:
        raise ConfigurationError(f"n_classes must lie in [2, {MAX_CLASSES}], got {n_classes}")
    return [_builtin_row(*row) for row in _BUILTIN[:n_classes]]


def write_table(rows: list[ClassDescription], path) -> None:
    lines = [f"{r.name}\t{r.key_sentence}\t{r.complete_sentence}\t{','.join(r.verbs)}" for r in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_table(path) -> list[ClassDescription]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ConfigurationError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        verbs = tuple(v.strip().lower() for v in parts[3].split(",") if v.strip())
        rows.append(ClassDescription(parts[0], parts[1], parts[2], verbs))
    return rows


class Describer:
    """Base for description generators. ``total_calls`` counts every
    describe_* call process-wide so inference can prove it made none."""

    total_calls = 0

    def __init__(self, class_names: list[str]):
        self.class_names = list(class_names)
        self.calls = 0

    def _check(self, video, cls: int) -> str:
        if not 0 <= cls < len(self.class_names):
            raise ArgumentError(f"unknown class id {cls}")
        if video is not None and not video.label[cls]:
            raise ArgumentError(f"class {self.class_names[cls]} is not in the label of {video.id}")
        Describer.total_calls += 1
        self.calls += 1
        return self.class_names[cls]

    def describe_key(self, video, cls: int) -> list[str]:
        raise NotImplementedError

    def describe_complete(self, video, cls: int) -> list[str]:
        raise NotImplementedError


class TemplateDescriber(Describer):
    def __init__(self, rows: list[ClassDescription]):
        super().__init__([r.name for r in rows])
        self.rows = rows

    def describe_key(self, video, cls):
        self._check(video, cls)
        return tokenize(self.rows[cls].key_sentence)

    def describe_complete(self, video, cls):
        self._check(video, cls)
        return tokenize(self.rows[cls].complete_sentence)

    def verbs(self, cls: int) -> tuple[str, ...]:
        return self.rows[cls].verbs


class HttpDescriber(Describer):
    """POSTs ``{"class": name, "mode": "key"|"complete"}`` and reads
    ``{"sentence": str}``. Verb lists still come from the local table."""

    def __init__(self, endpoint: str, rows: list[ClassDescription], timeout: float = 30.0):
        super().__init__([r.name for r in rows])
        self.endpoint = endpoint
        self.rows = rows
        self.timeout = timeout

    def _ask(self, name: str, mode: str) -> list[str]:
        body = json.dumps({"class": name, "mode": mode}).encode("utf-8")
        req = urllib.request.Request(self.endpoint, data=body, headers={"Content-Type": "application/json"})
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        if not isinstance(payload.get("sentence"), str):
            raise ArgumentError(f"describer endpoint returned no sentence for {name!r}")
        return tokenize(payload["sentence"])

    def describe_key(self, video, cls):
        return self._ask(self._check(video, cls), "key")

    def describe_complete(self, video, cls):
        return self._ask(self._check(video, cls), "complete")

    def verbs(self, cls: int) -> tuple[str, ...]:
        return self.rows[cls].verbs


@dataclass
class DescriptionPair:
    video_id: str
    key_text: list[str]
    complete_text: list[str]
    mask_positions: list[int] = field(default_factory=list)

    @property
    def masked_text(self) -> list[str]:
        hidden = set(self.mask_positions)
        return [MASK if i in hidden else tok for i, tok in enumerate(self.complete_text)]

    @property
    def targets(self) -> list[str]:
        return [self.complete_text[i] for i in self.mask_positions]


MASK = "[MASK]"


def mask_count(m: int) -> int:
    return math.ceil(m / 3)


def mask_description(tokens: list[str], rng: np.random.Generator, verbs=(), verb_weight: float = 2.0) -> list[int]:
    """Pick ``ceil(m / 3)`` positions by successive weighted draws without
    replacement; tokens in ``verbs`` weigh ``verb_weight``, the rest 1."""
    m = len(tokens)
    if m < 3:
        raise ArgumentError(f"sentence needs at least 3 tokens to mask, got {m}")
    verbs = set(verbs)
    weights = np.array([verb_weight if tok in verbs else 1.0 for tok in tokens])
    chosen = []
    for _ in range(mask_count(m)):
        p = weights / weights.sum()
        i = int(rng.choice(m, p=p))
        chosen.append(i)
        weights[i] = 0.0
    return sorted(chosen)
