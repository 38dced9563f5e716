"""Command-line entry point: ``priorloc {gen-data,train,eval,gradcheck,ablate}``.

Every command takes an optional JSON config plus ``--set section.key=value``
overrides, writes the canonical merged config to ``config.json`` inside its
run directory, and names that directory by the config hash. Feeding the
emitted ``config.json`` back through ``--config`` reproduces the run.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import numerics as nm
from .checkpoint import load_checkpoint
from .config import ModelConfig
from .corpus import (CorpusConfig, Describer, HttpDescriber, TemplateDescriber, builtin_table, generate_corpus,
                     load_feature_file, read_table, split_corpus, write_feature_file, write_table)
from .csr import CsrParams, csr_attention
from .dpid import Localizer, TrainConfig, Trainer, fused, prepare_training_data
from .errors import CheckpointError, ConfigurationError, FeatureFormatError
from .evaluate import evaluate, infer_tracks, proposals_csv
from .ksm import embed_video

RUNS_ENV = "PRIORLOC_RUNS"
DEFAULT_RUNS = "runs"

SECTIONS = {"corpus": CorpusConfig, "model": ModelConfig, "train": TrainConfig}


class PathError(FileNotFoundError):
    """A required input file or directory is missing."""


# ---------------------------------------------------------------- config


def default_config() -> dict:
    return {name: asdict(cls()) for name, cls in SECTIONS.items()}


def canonical(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical(cfg).encode("utf-8")).hexdigest()[:12]


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigurationError(f"override {assignment!r} is not of the form key=value")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigurationError(f"unknown config section in {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigurationError(f"unknown config key {key!r}")
    node[parts[-1]] = _parse_value(value)


def load_config(path, overrides) -> dict:
    cfg = default_config()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise PathError(f"config file {p} does not exist")
        user = json.loads(p.read_text(encoding="utf-8"))
        for section, values in user.items():
            if section not in cfg or not isinstance(values, dict):
                cfg[section] = values
                continue
            for key, value in values.items():
                if key not in cfg[section]:
                    raise ConfigurationError(f"unknown config key {section}.{key}")
                cfg[section][key] = value
    for assignment in overrides or ():
        apply_override(cfg, assignment)
    return cfg


def build(section: str, cfg: dict):
    cls = SECTIONS[section]
    known = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in cfg[section].items() if k in known})


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, DEFAULT_RUNS))


def run_dir(command: str, cfg: dict) -> Path:
    out = runs_root() / f"{command}-{config_hash(cfg)}"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(canonical(cfg), encoding="utf-8")
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ---------------------------------------------------------------- corpus on disk


def load_manifest(data_dir) -> tuple[Path, dict]:
    data_dir = Path(data_dir)
    path = data_dir / "manifest.json"
    if not path.is_file():
        raise PathError(f"no corpus manifest at {path}")
    return data_dir, json.loads(path.read_text(encoding="utf-8"))


def load_split(data_dir, split: str):
    data_dir, manifest = load_manifest(data_dir)
    videos = []
    for entry in manifest["videos"]:
        if entry["split"] != split:
            continue
        path = data_dir / entry["file"]
        if not path.is_file():
            raise PathError(f"feature file {path} listed in the manifest is missing")
        videos.append(load_feature_file(path))
    return videos, manifest


def make_describer(data_dir: Path, manifest: dict, endpoint: str | None) -> Describer:
    table = data_dir / manifest["description_table"]
    if not table.is_file():
        raise PathError(f"description table {table} is missing")
    rows = read_table(table)
    return HttpDescriber(endpoint, rows) if endpoint else TemplateDescriber(rows)


# ---------------------------------------------------------------- commands


def cmd_gen_data(cfg: dict, out: Path) -> Path:
    ccfg = build("corpus", cfg)
    ccfg.validate()
    rows = builtin_table(ccfg.n_classes)
    train, test = split_corpus(generate_corpus(ccfg, rows))
    (out / "videos").mkdir(exist_ok=True)
    write_table(rows, out / "descriptions.tsv")
    entries = []
    for split, videos in (("train", train), ("test", test)):
        for v in videos:
            rel = f"videos/{v.id}.wtf"
            # Training files carry no intervals: supervision is video-level only.
            write_feature_file(v, out / rel, include_gt=(split == "test"))
            entries.append({"id": v.id, "split": split, "file": rel, "T": v.T, "sha256": _sha256(out / rel)})
    manifest = {
        "corpus": ccfg.to_dict(),
        "class_names": [r.name for r in rows],
        "description_table": "descriptions.tsv",
        "description_sha256": _sha256(out / "descriptions.tsv"),
        "n_train": len(train),
        "n_test": len(test),
        "videos": entries,
    }
    (out / "manifest.json").write_text(canonical(manifest), encoding="utf-8")
    return out


def train_from_dir(data_dir, cfg: dict, out: Path, endpoint: str | None = None, progress=None) -> Trainer:
    videos, manifest = load_split(data_dir, "train")
    describer = make_describer(Path(data_dir), manifest, endpoint)
    data = prepare_training_data(videos, describer)
    trainer = Trainer(data, build("model", cfg), build("train", cfg))
    log = out / "metrics.jsonl"
    log.unlink(missing_ok=True)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    trainer.run(trainer.cfg.iterations, log, ckpt, progress)
    trainer.save(out / "model.wck")
    return trainer


def score_tracks_csv(video, model: Localizer, csr: CsrParams | None) -> str:
    inf = infer_tracks(video, model)
    a_csr = None
    if csr is not None:
        with nm.no_grad():
            F_e, _ = embed_video(nm.Tensor(fused(video)), model.ksm,
                                 model.model_cfg, training=False)
            a_csr = csr_attention(F_e, csr).data.reshape(-1)
    best = inf.fused.max(axis=1)
    lines = ["t,A_KSM,A_CSR,fused"]
    for t in range(video.T):
        c = "" if a_csr is None else repr(float(a_csr[t]))
        lines.append(f"{t},{float(inf.A[t])!r},{c},{float(best[t])!r}")
    return "\n".join(lines) + "\n"


def load_csr(path, model_cfg: ModelConfig) -> CsrParams | None:
    arrays, meta = load_checkpoint(path)
    named = {k[4:]: v for k, v in arrays.items() if k.startswith("csr.")}
    if not named:
        return None
    csr = CsrParams.init(model_cfg, meta["vocab_size"], np.random.default_rng(0))
    csr.load_arrays(named)
    return csr


def cmd_eval(checkpoint, data_dir, out: Path, tracks: bool = True) -> dict:
    checkpoint = Path(checkpoint)
    if not checkpoint.is_file():
        raise PathError(f"checkpoint {checkpoint} does not exist")
    before = Describer.total_calls
    model = Localizer.load(checkpoint)
    videos, _ = load_split(data_dir, "test")
    report, preds = evaluate(model, videos)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "proposals.csv").write_text(proposals_csv(preds, model.class_names), encoding="utf-8")
    if tracks:
        csr = load_csr(checkpoint, model.model_cfg)
        (out / "tracks").mkdir(exist_ok=True)
        for v in videos:
            (out / "tracks" / f"{v.id}.csv").write_text(score_tracks_csv(v, model, csr), encoding="utf-8")
    calls = Describer.total_calls - before
    return {"report": report, "describer_calls": calls}


def cmd_gradcheck(trials: int, seed: int, stream=None) -> bool:
    stream = stream or sys.stdout
    summaries = nm.run_gradchecks(trials=trials, seed=seed)
    for s in summaries:
        status = "PASS" if s.passed else "FAIL"
        print(f"{status}  {s.op_name:<22} trials={s.trials} degenerate={s.degenerate} "
              f"max_rel_err={s.max_rel_error:.3e}", file=stream)
    ok = all(s.passed for s in summaries)
    print(f"{sum(s.passed for s in summaries)}/{len(summaries)} ops passed", file=stream)
    return ok


ABLATIONS = (
    ("Baseline", {"enable_ksm": False, "enable_csr": False}),
    ("Baseline+KSM", {"enable_ksm": True, "enable_csr": False}),
    ("Baseline+CSR", {"enable_ksm": False, "enable_csr": True}),
    ("Baseline+KSM+CSR", {"enable_ksm": True, "enable_csr": True}),
)


def ablation_configs(cfg: dict) -> list[tuple[str, dict]]:
    out = []
    for name, switches in ABLATIONS:
        c = copy.deepcopy(cfg)
        c["train"].update(switches)
        out.append((name, c))
    return out


def cmd_ablate(cfg: dict, data_dir, out: Path, endpoint=None, stream=None) -> list[dict]:
    stream = stream or sys.stdout
    rows = []
    for name, c in ablation_configs(cfg):
        sub = out / name
        sub.mkdir(exist_ok=True)
        (sub / "config.json").write_text(canonical(c), encoding="utf-8")
        train_from_dir(data_dir, c, sub, endpoint)
        res = cmd_eval(sub / "model.wck", data_dir, sub, tracks=False)
        rep = res["report"]
        rows.append({"setting": name, "mAP": rep.mean_ap, "avg": rep.averages})
    head = f"{'setting':<18}" + "".join(f"{t:>7.1f}" for t in rep.thresholds) + f"{'AVG':>8}"
    print(head, file=stream)
    for r in rows:
        print(f"{r['setting']:<18}" + "".join(f"{100 * v:>7.1f}" for v in r["mAP"])
              + f"{100 * r['avg']['0.1:0.7']:>8.1f}", file=stream)
    (out / "ablation.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return rows


# ---------------------------------------------------------------- argparse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="priorloc", description="Weakly supervised action localization with "
                                 "description priors on a synthetic corpus.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; missing keys take their defaults")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")

    p = sub.add_parser("gen-data", help="write the synthetic corpus, description table and manifest")
    common(p)
    p.add_argument("--seed", type=int, help="corpus seed")

    def trainish(p):
        common(p)
        p.add_argument("--data", required=True, help="corpus directory written by gen-data")
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int, help="training seed")
        p.add_argument("--no-ksm", action="store_true", help="drop the key-description matching branch")
        p.add_argument("--no-csr", action="store_true", help="drop the reconstruction branch")
        p.add_argument("--no-distill", action="store_true", help="zero both coupling weights")
        p.add_argument("--no-locloss", action="store_true", help="drop the localization-head loss")
        p.add_argument("--mllm-endpoint", help="HTTP describer URL used instead of the local table")

    p = sub.add_parser("train", help="train and write checkpoints and a metrics log")
    trainish(p)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--no-tracks", action="store_true", help="skip the per-video score-track CSVs")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ablate", help="train and evaluate the four component settings")
    trainish(p)
    return ap


def _merged(args) -> dict:
    cfg = load_config(args.config, args.set)
    if args.command == "gen-data":
        if args.seed is not None:
            cfg["corpus"]["seed"] = args.seed
        return cfg
    t = cfg["train"]
    if args.iterations is not None:
        t["iterations"] = args.iterations
    if args.seed is not None:
        t["seed"] = args.seed
    for flag, key in (("no_ksm", "enable_ksm"), ("no_csr", "enable_csr"), ("no_distill", "enable_distill"),
                      ("no_locloss", "enable_locloss")):
        if getattr(args, flag):
            t[key] = False
    build("train", cfg).validate()
    build("model", cfg).validate()
    return cfg


def _with_data(cfg: dict, data_dir) -> dict:
    """Key the run by the corpus content as well as the settings."""
    data_dir, manifest = load_manifest(data_dir)
    out = copy.deepcopy(cfg)
    out["data_manifest_sha256"] = _sha256(data_dir / "manifest.json")
    out["data_dir"] = str(data_dir.resolve())
    # Input width follows the corpus: RGB and flow streams are concatenated.
    out["model"]["feature_dim"] = 2 * manifest["corpus"]["feature_dim"]
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return 0 if cmd_gradcheck(args.trials, args.seed) else 1
        if args.command == "eval":
            ckpt = Path(args.checkpoint)
            if not ckpt.is_file():
                raise PathError(f"checkpoint {ckpt} does not exist")
            key = {"checkpoint_sha256": _sha256(ckpt), "data_dir": str(Path(args.data).resolve())}
            out = run_dir("eval", key)
            res = cmd_eval(ckpt, args.data, out, tracks=not args.no_tracks)
            sys.stdout.write(res["report"].to_text())
            print(f"describer calls during evaluation: {res['describer_calls']}")
            print(out)
            return 0
        cfg = _merged(args)
        if args.command == "gen-data":
            out = run_dir("data", cfg)
            cmd_gen_data(cfg, out)
            print(out)
            return 0
        cfg = _with_data(cfg, args.data)
        endpoint = args.mllm_endpoint
        if args.command == "train":
            out = run_dir("train", cfg)
            start = time.time()

            def progress(rec):
                if not args.quiet and (rec["iteration"] + 1) % 100 == 0:
                    print(f"iter {rec['iteration'] + 1}  L_match={rec['L_match']:.4f}"
                          + (f"  L_rec={rec['L_rec']:.4f}" if "L_rec" in rec else "")
                          + f"  {time.time() - start:.0f}s", file=sys.stderr)

            train_from_dir(args.data, cfg, out, endpoint, progress)
            print(out / "model.wck")
            return 0
        if args.command == "ablate":
            out = run_dir("ablate", cfg)
            cmd_ablate(cfg, args.data, out, endpoint)
            print(out)
            return 0
    except (PathError, ConfigurationError, CheckpointError, FeatureFormatError, OSError, ValueError,
            RuntimeError) as err:
        print(f"priorloc: error: {err}", file=sys.stderr)
        return 2
    return 1


if __name__ == "__main__":
    sys.exit(main())
