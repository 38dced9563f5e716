"""Synthetic untrimmed videos with planted action instances.

Each segment is a template plus isotropic Gaussian noise. Templates are
built from unit-variance prototype vectors:

* background: ``B_v`` (a shared background prototype jittered per video)
* action phase: ``B_v + amplitude * P_verb``. An instance of class ``c``
  runs through the class's verbs in order (lead-in, key, follow-through);
  the key phase uses ``key_amplitude`` and the others ``side_amplitude``,
  so the edges of an action are less discriminative than its core.
* confuser: ``B_v + confuser_amplitude * P_key(c)`` for a class ``c`` in the
  video label, placed in background stretches.

With ``confuser_amplitude < 0.5`` a confuser is nearer to the background
template than to its class template, so noiseless nearest-template
classification recovers the planted intervals exactly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigurationError
from .describe import ClassDescription, builtin_table

FEATURE_DIM = 1024
SECONDS_PER_SEGMENT = 16 / 25


@dataclass
class VideoSample:
    id: str
    rgb: np.ndarray
    flow: np.ndarray
    label: np.ndarray
    gt_intervals: list[tuple[int, float, float]] = field(default_factory=list)
    seconds_per_segment: float = SECONDS_PER_SEGMENT

    @property
    def T(self) -> int:
        return self.rgb.shape[0]

    @property
    def n_classes(self) -> int:
        return self.label.shape[0]

    def positive_classes(self) -> list[int]:
        return [int(c) for c in np.flatnonzero(self.label)]


@dataclass
class CorpusConfig:
    n_classes: int = 5
    n_train: int = 60
    n_test: int = 20
    t_min: int = 64
    t_max: int = 128
    snr: float = 0.5
    seed: int = 7
    key_amplitude: float = 1.0
    side_amplitude: float = 0.5
    confuser_amplitude: float = 0.4
    confuser_fraction: float = 0.15
    background_jitter: float = 0.3
    max_instances: int = 4
    instance_min: int = 10
    instance_max: int = 32
    two_class_prob: float = 0.3
    max_foreground: float = 0.6
    feature_dim: int = FEATURE_DIM

    def validate(self):
        if self.n_classes < 2:
            raise ConfigurationError("need at least 2 classes")
        if not 16 <= self.t_min <= self.t_max <= 512:
            raise ConfigurationError(f"T range [{self.t_min}, {self.t_max}] must lie within [16, 512]")
        if self.snr <= 0:
            raise ConfigurationError("snr must be positive")
        if self.n_train < 0 or self.n_test < 0 or self.n_train + self.n_test == 0:
            raise ConfigurationError("need at least one video")
        if not 3 <= self.instance_min <= self.instance_max:
            raise ConfigurationError("instance length range is invalid")
        if 2 * self.instance_min + 6 > int(self.max_foreground * self.t_min):
            raise ConfigurationError("two instances cannot fit in the shortest video")
        if not 0 <= self.confuser_fraction < 1:
            raise ConfigurationError("confuser_fraction must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Prototypes:
    background: np.ndarray
    verbs: dict[str, np.ndarray]


def make_prototypes(rows: list[ClassDescription], seed: int, dim: int) -> Prototypes:
    rng = np.random.default_rng([seed, 1])
    background = rng.normal(size=2 * dim)
    verbs = {}
    for row in rows:
        for verb in row.verbs:
            if verb not in verbs:
                verbs[verb] = rng.normal(size=2 * dim)
    return Prototypes(background, verbs)


def _phase_bounds(length: int, rng: np.random.Generator) -> list[int]:
    lead = max(2, int(round(length * rng.uniform(0.2, 0.35))))
    follow = max(2, int(round(length * rng.uniform(0.2, 0.35))))
    key = max(2, length - lead - follow)
    return [lead, key, length - lead - key]


def _place(T: int, lengths: list[int], rng: np.random.Generator) -> list[int]:
    """Non-overlapping starts with at least two background segments between
    instances, in a random order along the timeline."""
    slack = T - sum(lengths) - 2 * (len(lengths) + 1)
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    starts, pos, prev = [], 2, 0
    for length, cut in zip(lengths, cuts):
        pos += cut - prev
        prev = cut
        starts.append(int(pos))
        pos += length + 2
    return starts


def _one_video(vid: str, rows, protos: Prototypes, cfg: CorpusConfig, rng: np.random.Generator) -> VideoSample:
    C = cfg.n_classes
    T = int(rng.integers(cfg.t_min, cfg.t_max + 1))
    n_pos = 2 if rng.random() < cfg.two_class_prob else 1
    classes = sorted(int(c) for c in rng.choice(C, size=n_pos, replace=False))
    n_inst = int(rng.integers(max(1, n_pos), cfg.max_instances + 1))
    while n_inst > n_pos and n_inst * cfg.instance_min + 2 * (n_inst + 1) > int(cfg.max_foreground * T):
        n_inst -= 1
    inst_classes = classes + [int(c) for c in rng.choice(classes, size=n_inst - n_pos)]
    inst_classes = [inst_classes[i] for i in rng.permutation(n_inst)]
    lengths = [int(rng.integers(cfg.instance_min, cfg.instance_max + 1)) for _ in range(n_inst)]
    budget = int(cfg.max_foreground * T) - 2 * (n_inst + 1)
    if sum(lengths) > budget:
        lengths = [max(cfg.instance_min, length * budget // sum(lengths)) for length in lengths]
    starts = _place(T, lengths, rng)

    background = protos.background + cfg.background_jitter * rng.normal(size=protos.background.shape)
    base = np.tile(background, (T, 1))
    is_bg = np.ones(T, dtype=bool)
    gt = []
    for cls, start, length in zip(inst_classes, starts, lengths):
        verbs = rows[cls].verbs
        t = start
        for i, (verb, n) in enumerate(zip(verbs, _phase_bounds(length, rng))):
            amp = cfg.key_amplitude if i == len(verbs) // 2 else cfg.side_amplitude
            base[t:t + n] += amp * protos.verbs[verb]
            t += n
        is_bg[start:start + length] = False
        gt.append((cls, float(start), float(start + length)))

    n_conf = int(round(cfg.confuser_fraction * is_bg.sum()))
    placed, tries = 0, 0
    while placed < n_conf and tries < 200:
        tries += 1
        run = int(rng.integers(2, 6))
        t0 = int(rng.integers(0, T - run + 1))
        if not is_bg[t0:t0 + run].all():
            continue
        cls = int(rng.choice(classes))
        base[t0:t0 + run] += cfg.confuser_amplitude * protos.verbs[rows[cls].key_verb]
        is_bg[t0:t0 + run] = False
        placed += run

    feats = base + rng.normal(scale=1.0 / cfg.snr, size=base.shape)
    feats = feats.astype(np.float32).astype(np.float64)
    label = np.zeros(C, dtype=np.int8)
    label[classes] = 1
    gt.sort(key=lambda g: g[1])
    return VideoSample(vid, feats[:, :cfg.feature_dim].copy(), feats[:, cfg.feature_dim:].copy(), label, gt)


def generate_corpus(cfg: CorpusConfig, rows: list[ClassDescription] | None = None) -> list[VideoSample]:
    """Deterministic in ``cfg.seed``. Training videos come first, ids
    ``train_000...`` then ``test_000...``."""
    cfg.validate()
    rows = rows if rows is not None else builtin_table(cfg.n_classes)
    if len(rows) != cfg.n_classes:
        raise ConfigurationError(f"description table has {len(rows)} classes, config says {cfg.n_classes}")
    protos = make_prototypes(rows, cfg.seed, cfg.feature_dim)
    out = []
    for split, n in (("train", cfg.n_train), ("test", cfg.n_test)):
        for i in range(n):
            rng = np.random.default_rng([cfg.seed, 2, 0 if split == "train" else 1, i])
            out.append(_one_video(f"{split}_{i:03d}", rows, protos, cfg, rng))
    return out


def split_corpus(samples: list[VideoSample]) -> tuple[list[VideoSample], list[VideoSample]]:
    train = [s for s in samples if s.id.startswith("train")]
    test = [s for s in samples if s.id.startswith("test")]
    return train, test
