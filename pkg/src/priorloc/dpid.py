"""Alternating two-branch trainer with cross-branch attention distillation.

Every iteration samples a batch, runs the matching branch forward, runs the
reconstruction branch forward on the same batch, then takes one optimizer
step per branch. Each branch regresses its attention track onto the other
branch's track passed through ``psi`` (a stop-gradient).

The two parameter groups (text matching + localization head, and
reconstruction) have separate Adam optimizers and separate random streams,
so zero coupling weights leave each branch exactly as it would be alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ModelConfig
from .corpus import Describer, VideoSample, Vocabulary, mask_description
from .corpus.vocab import MASK_TOKEN, SPECIALS
from .csr import CsrParams, csr_attention, csr_forward, csr_loss, embed_video_fc
from .errors import ConfigurationError, TrainingDivergence
from .ksm import (KsmParams, build_query_tokens, default_k, embed_video, encode_text_query, ksm_loss, match,
                  video_scores)
from .lochead import (LocHeadParams, PseudoProposal, head_forward, loc_loss, mine_pseudo_proposals,
                      suppressed_mil_loss)
from .numerics import Adam, Tensor

CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-3
    iterations: int = 5000
    lambda1: float = 1.5
    lambda2: float = 1.5
    mu1: float = 1.0
    seed: int = 0
    batch_size: int = 8
    refresh_every: int = 100
    checkpoint_every: int = 500
    enable_ksm: bool = True
    enable_csr: bool = True
    enable_distill: bool = True
    enable_locloss: bool = True
    psi: str = "detach"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    mask_verb_weight: float = 2.0

    def validate(self):
        if self.lr <= 0:
            raise ConfigurationError("lr must be positive")
        for name in ("lambda1", "lambda2", "mu1", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be non-negative")
        if self.iterations < 0 or self.batch_size < 1 or self.refresh_every < 1 or self.checkpoint_every < 1:
            raise ConfigurationError("iterations, batch_size and periods must be positive")
        if self.psi not in ("detach", "minmax"):
            raise ConfigurationError(f"unknown psi variant {self.psi!r}")

    @property
    def coupling(self) -> tuple[float, float]:
        """Effective ``(lambda1, lambda2)`` after the ablation switches."""
        if not (self.enable_distill and self.enable_csr):
            return 0.0, 0.0
        return self.lambda1, self.lambda2

    @property
    def loc_weight(self) -> float:
        return self.mu1 if self.enable_locloss else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training settings: {sorted(unknown)}")
        return cls(**d)


def psi(a: Tensor, variant: str = "detach") -> Tensor:
    """Stop-gradient view of an attention track. ``minmax`` additionally
    rescales the detached values to span [0, 1]."""
    out = nm.detach(a)
    if variant == "minmax":
        lo, hi = out.data.min(), out.data.max()
        out = Tensor((out.data - lo) / (hi - lo) if hi > lo else out.data)
    return out


# ---------------------------------------------------------------- data


@dataclass
class TrainingData:
    videos: list[VideoSample]
    features: list[np.ndarray]
    class_names: list[str]
    verbs: list[tuple[str, ...]]
    vocab: Vocabulary
    key_embeds: list[np.ndarray]
    complete: list[list[tuple[int, list[str]]]]  # per video: (class, tokens) per positive class

    @property
    def n_classes(self) -> int:
        return len(self.class_names)


def fused(video: VideoSample) -> np.ndarray:
    return np.concatenate([video.rgb, video.flow], axis=1)


def prepare_training_data(videos: list[VideoSample], describer: Describer, vocab_seed: int = 0,
                          vectors_path=None) -> TrainingData:
    """Query the describer for one key sentence per class (from the first
    training video carrying it) and one complete sentence per (video,
    positive class), then build the vocabulary over everything returned."""
    if not videos:
        raise ConfigurationError("no training videos")
    C = videos[0].n_classes
    key_tokens = []
    for c in range(C):
        owner = next((v for v in videos if v.label[c]), None)
        if owner is None:
            raise ConfigurationError(f"class {describer.class_names[c]} has no training video")
        key_tokens.append(describer.describe_key(owner, c))
    complete = [[(c, describer.describe_complete(v, c)) for c in v.positive_classes()] for v in videos]
    words = set(SPECIALS)
    for toks in key_tokens:
        words.update(toks)
    for per_video in complete:
        for _, toks in per_video:
            words.update(toks)
    vocab = Vocabulary(words, seed=vocab_seed)
    if vectors_path is not None:
        vocab.load_vectors(vectors_path)
    return TrainingData(
        videos=videos,
        features=[fused(v) for v in videos],
        class_names=list(describer.class_names),
        verbs=[tuple(describer.verbs(c)) for c in range(C)],
        vocab=vocab,
        key_embeds=[vocab.table[vocab.ids(t)] for t in key_tokens],
        complete=complete,
    )


# ---------------------------------------------------------------- branches


@dataclass
class MatchOut:
    index: int
    F_e: Tensor
    A: Tensor
    M_hat: Tensor | None
    p: Tensor | None
    p_hat: Tensor | None
    logits: Tensor
    offsets: Tensor

    def mining_source(self) -> tuple[np.ndarray, np.ndarray]:
        if self.M_hat is not None:
            return self.A.data, self.M_hat.data
        return self.A.data, self.A.data * self.logits.data


@dataclass
class PhaseLoss:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


class MatchBranch:
    """Video embedding, matching attention, text queries and localization head."""

    def __init__(self, data: TrainingData, model_cfg: ModelConfig, cfg: TrainConfig, rng: np.random.Generator):
        self.data, self.model_cfg, self.cfg, self.rng = data, model_cfg, cfg, rng
        self.ksm = KsmParams.init(model_cfg, data.n_classes, rng)
        self.loc = LocHeadParams.init(model_cfg, data.n_classes, rng)
        self.opt = Adam(self.params(), cfg.lr, weight_decay=cfg.weight_decay)

    def params(self) -> dict[str, Tensor]:
        out = {f"ksm.{k}": v for k, v in self.ksm.named().items()}
        out.update({f"loc.{k}": v for k, v in self.loc.named().items()})
        return out

    def query(self) -> Tensor | None:
        if not self.cfg.enable_ksm:
            return None
        tokens = build_query_tokens([Tensor(e) for e in self.data.key_embeds], self.ksm)
        return encode_text_query(tokens, self.ksm, self.model_cfg)

    def forward_one(self, i: int, F_query: Tensor | None, training: bool) -> MatchOut:
        F = Tensor(self.data.features[i])
        F_e, A = embed_video(F, self.ksm, self.model_cfg, training, self.rng if training else None)
        M_hat = p = p_hat = None
        if F_query is not None:
            k = default_k(F.shape[0])
            M, M_hat = match(F_e, A, F_query, self.model_cfg.tau)
            _, p = video_scores(M, k)
            _, p_hat = video_scores(M_hat, k)
        logits, offsets = head_forward(F_e, self.loc)
        return MatchOut(i, F_e, A, M_hat, p, p_hat, logits, offsets)

    def forward(self, batch, training: bool = True) -> list[MatchOut]:
        F_query = self.query()
        return [self.forward_one(i, F_query, training) for i in batch]

    def mine(self) -> list[list[PseudoProposal]]:
        """Pseudo-proposals for every training video from an eval-mode pass."""
        out = []
        with nm.no_grad():
            F_query = self.query()
            for i, video in enumerate(self.data.videos):
                A, src = self.forward_one(i, F_query, training=False).mining_source()
                out.append(mine_pseudo_proposals(A, src, video.label))
        return out

    def loss(self, outs: list[MatchOut], targets: list[Tensor] | None, proposals) -> PhaseLoss:
        return match_phase_loss(outs, [self.data.videos[o.index].label for o in outs], targets, proposals, self.cfg)

    def step(self, loss: PhaseLoss):
        self.opt.zero_grad()
        nm.backward(loss.total)
        self.opt.step()


def match_phase_loss(outs: list[MatchOut], labels, targets: list[Tensor] | None, proposals,
                     cfg: TrainConfig) -> PhaseLoss:
    """Batch mean of ``L_KSM + lambda1 * MSE(A_KSM, psi(A_CSR)) + mu1 * L_loc``.

    With the text branch off, the attention-suppressed MIL loss on the head
    logits stands in for ``L_KSM``. Terms with zero weight are not built.
    """
    lam1, _ = cfg.coupling
    sums = {"L_KSM": 0.0, "L_loc": 0.0, "L_focal": 0.0, "L_DIoU": 0.0, "L_MIL": 0.0, "mse_match": 0.0}
    total = Tensor(0.0)
    for j, (o, label) in enumerate(zip(outs, labels)):
        T = o.A.shape[0]
        k = default_k(T)
        if o.p is not None:
            first = ksm_loss(o.p, o.p_hat, label)
        else:
            first = suppressed_mil_loss(o.logits, o.A, label, k)
        term = first
        sums["L_KSM"] += first.item()
        if cfg.loc_weight > 0:
            props = None if proposals is None else proposals[o.index]
            ll = loc_loss(o.logits, o.offsets, label, props, k, cfg.focal_gamma, cfg.focal_alpha)
            term = term + cfg.loc_weight * ll.total
            sums["L_loc"] += ll.total.item()
            sums["L_focal"] += ll.focal.item()
            sums["L_DIoU"] += ll.diou.item()
            sums["L_MIL"] += ll.mil.item()
        if lam1 > 0 and targets is not None:
            d = nm.mse(o.A, targets[j])
            term = term + lam1 * d
            sums["mse_match"] += d.item()
        total = total + term
    n = len(outs)
    total = total * (1.0 / n)
    terms = {k: v / n for k, v in sums.items()}
    terms["L_match"] = total.item()
    return PhaseLoss(total, terms)


@dataclass
class RecOut:
    index: int
    A: Tensor
    dists: list[Tensor]
    targets: list[list[int]]
    masks: list[list[int]]


class RecBranch:
    """Masked-description reconstruction from attention-weighted video."""

    def __init__(self, data: TrainingData, model_cfg: ModelConfig, cfg: TrainConfig, rng: np.random.Generator):
        self.data, self.model_cfg, self.cfg, self.rng = data, model_cfg, cfg, rng
        self.csr = CsrParams.init(model_cfg, len(data.vocab), rng)
        self.opt = Adam(self.params(), cfg.lr, weight_decay=cfg.weight_decay)

    def params(self) -> dict[str, Tensor]:
        return {f"csr.{k}": v for k, v in self.csr.named().items()}

    def forward_one(self, i: int, F_e: Tensor) -> RecOut:
        vocab = self.data.vocab
        F = Tensor(self.data.features[i])
        F_complete = embed_video_fc(F, self.csr)
        A = csr_attention(nm.detach(F_e), self.csr)
        dists, targets, masks = [], [], []
        for c, tokens in self.data.complete[i]:
            pos = mask_description(tokens, self.rng, self.data.verbs[c], self.cfg.mask_verb_weight)
            hidden = set(pos)
            masked = [MASK_TOKEN if t in hidden else tok for t, tok in enumerate(tokens)]
            out = csr_forward(F, F_e, vocab.table[vocab.ids(masked)], self.csr, F_complete=F_complete, A=A,
                              modulation=self.model_cfg.csr_modulation)
            dists.append(out.word_dists)
            targets.append(vocab.ids(tokens))
            masks.append(pos)
        return RecOut(i, A, dists, targets, masks)

    def forward(self, batch, F_e_list) -> list[RecOut]:
        return [self.forward_one(i, F_e) for i, F_e in zip(batch, F_e_list)]

    def loss(self, outs: list[RecOut], targets: list[Tensor] | None) -> PhaseLoss:
        return rec_phase_loss(outs, targets, self.cfg)

    def step(self, loss: PhaseLoss):
        self.opt.zero_grad()
        nm.backward(loss.total)
        self.opt.step()


def rec_phase_loss(outs: list[RecOut], targets: list[Tensor] | None, cfg: TrainConfig) -> PhaseLoss:
    """Batch mean of ``L_CSR + lambda2 * MSE(A_CSR, psi(A_KSM))``; a video's
    ``L_CSR`` is averaged over its descriptions."""
    _, lam2 = cfg.coupling
    sums = {"L_CSR": 0.0, "mse_rec": 0.0}
    total = Tensor(0.0)
    for j, o in enumerate(outs):
        rec = Tensor(0.0)
        for dist, tgt, pos in zip(o.dists, o.targets, o.masks):
            rec = rec + csr_loss(dist, tgt, pos)
        rec = rec * (1.0 / len(o.dists))
        term = rec
        sums["L_CSR"] += rec.item()
        if lam2 > 0 and targets is not None:
            d = nm.mse(o.A, targets[j])
            term = term + lam2 * d
            sums["mse_rec"] += d.item()
        total = total + term
    n = len(outs)
    total = total * (1.0 / n)
    terms = {k: v / n for k, v in sums.items()}
    terms["L_rec"] = total.item()
    return PhaseLoss(total, terms)


# ---------------------------------------------------------------- trainer


def spawn_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator, np.random.Generator]:
    """Independent generators for batch order, the matching group and the
    reconstruction group."""
    data, match_s, rec_s = np.random.SeedSequence(seed).spawn(3)
    return np.random.default_rng(data), np.random.default_rng(match_s), np.random.default_rng(rec_s)


class Trainer:
    def __init__(self, data: TrainingData, model_cfg: ModelConfig, cfg: TrainConfig):
        cfg.validate()
        model_cfg.validate()
        self.data, self.model_cfg, self.cfg = data, model_cfg, cfg
        self.data_rng, match_rng, rec_rng = spawn_streams(cfg.seed)
        self.match = MatchBranch(data, model_cfg, cfg, match_rng)
        self.rec = RecBranch(data, model_cfg, cfg, rec_rng) if cfg.enable_csr else None
        self.iteration = 0
        self.proposals: list[list[PseudoProposal]] | None = None
        self.history: list[dict] = []

    def sample_batch(self) -> list[int]:
        n = len(self.data.videos)
        return [int(i) for i in self.data_rng.choice(n, size=min(self.cfg.batch_size, n), replace=False)]

    def step(self) -> dict:
        cfg = self.cfg
        lam1, lam2 = cfg.coupling
        if self.iteration > 0 and self.iteration % cfg.refresh_every == 0 and cfg.loc_weight > 0:
            self.proposals = self.match.mine()
        batch = self.sample_batch()
        mouts = self.match.forward(batch, training=True)
        routs = self.rec.forward(batch, [o.F_e for o in mouts]) if self.rec is not None else None

        csr_targets = [psi(r.A, cfg.psi) for r in routs] if routs is not None and lam1 > 0 else None
        mloss = self.match.loss(mouts, csr_targets, self.proposals)
        record = {"iteration": self.iteration}
        record.update(mloss.terms)
        self._check(mloss.terms)
        if routs is not None:
            ksm_targets = [psi(o.A, cfg.psi) for o in mouts] if lam2 > 0 else None
            rloss = self.rec.loss(routs, ksm_targets)
            record.update(rloss.terms)
            self._check(rloss.terms)
        self.match.step(mloss)
        if routs is not None:
            self.rec.step(rloss)
        self.iteration += 1
        self.history.append(record)
        return record

    def _check(self, terms: dict):
        for name, value in terms.items():
            if not math.isfinite(value):
                raise TrainingDivergence(name, self.iteration, value)

    def run(self, iterations: int | None = None, log_path=None, checkpoint_dir=None, progress=None) -> list[dict]:
        iterations = self.cfg.iterations if iterations is None else iterations
        log = open(log_path, "a", encoding="utf-8") if log_path is not None else None
        try:
            for _ in range(iterations):
                record = self.step()
                if log is not None:
                    log.write(json.dumps(record, sort_keys=True) + "\n")
                if checkpoint_dir is not None and self.iteration % self.cfg.checkpoint_every == 0:
                    self.save(Path(checkpoint_dir) / f"iter_{self.iteration:06d}.wck")
                if progress is not None:
                    progress(record)
        finally:
            if log is not None:
                log.close()
        return self.history

    # ------------------------------------------------------------ persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {name: t.data for name, t in self.match.params().items()}
        arrays.update(self.match.opt.state_arrays("opt.match"))
        if self.rec is not None:
            arrays.update({name: t.data for name, t in self.rec.params().items()})
            arrays.update(self.rec.opt.state_arrays("opt.rec"))
        return arrays

    def meta(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "model": self.model_cfg.to_dict(),
            "train": self.cfg.to_dict(),
            "class_names": self.data.class_names,
            "vocab_size": len(self.data.vocab),
            "adam_t": {"match": self.match.opt.t, "rec": self.rec.opt.t if self.rec else 0},
            "rng": {
                "data": self.data_rng.bit_generator.state,
                "match": self.match.rng.bit_generator.state,
                "rec": self.rec.rng.bit_generator.state if self.rec else None,
            },
        }

    def save(self, path):
        save_checkpoint(path, self.state_arrays(), self.meta())


def train(data: TrainingData, model_cfg: ModelConfig, cfg: TrainConfig, log_path=None, checkpoint_dir=None,
          progress=None) -> Trainer:
    trainer = Trainer(data, model_cfg, cfg)
    trainer.run(cfg.iterations, log_path, checkpoint_dir, progress)
    return trainer


# ---------------------------------------------------------------- inference model


@dataclass
class Localizer:
    """The parameters inference needs: video embedding, attention track
    and localization head."""

    ksm: KsmParams
    loc: LocHeadParams
    model_cfg: ModelConfig
    class_names: list[str]

    @classmethod
    def from_trainer(cls, trainer: Trainer) -> "Localizer":
        return cls(trainer.match.ksm, trainer.match.loc, trainer.model_cfg, trainer.data.class_names)

    @classmethod
    def load(cls, path) -> "Localizer":
        arrays, meta = load_checkpoint(path)
        model_cfg = ModelConfig(**meta["model"])
        C = len(meta["class_names"])
        rng = np.random.default_rng(0)
        ksm = KsmParams.init(model_cfg, C, rng)
        loc = LocHeadParams.init(model_cfg, C, rng)
        ksm.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("ksm.")})
        loc.load_arrays({k[4:]: v for k, v in arrays.items() if k.startswith("loc.")})
        return cls(ksm, loc, model_cfg, list(meta["class_names"]))

    @property
    def n_classes(self) -> int:
        return len(self.class_names)
