import json

import pytest

from priorloc import cli
from priorloc.corpus import Describer

SMALL = ["--set", "corpus.n_classes=2", "--set", "corpus.n_train=6", "--set", "corpus.n_test=3",
         "--set", "corpus.feature_dim=16", "--set", "corpus.t_min=48", "--set", "corpus.t_max=64",
         "--set", "corpus.instance_min=6", "--set", "corpus.instance_max=12"]
TINY_MODEL = ["--set", "model.embed_dim=8", "--set", "model.attn_hidden=4", "--set", "model.hidden_dim=8",
              "--set", "model.n_context=2", "--set", "model.text_heads=2", "--set", "model.text_ffn=8",
              "--set", "train.batch_size=3", "--set", "train.checkpoint_every=5"]


@pytest.fixture
def runs(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.RUNS_ENV, str(tmp_path / "runs"))
    return tmp_path / "runs"


def run(capsys, *argv):
    code = cli.main(list(argv))
    out = capsys.readouterr()
    return code, out.out.strip().splitlines(), out.err


@pytest.fixture
def corpus_dir(runs, capsys):
    code, lines, _ = run(capsys, "gen-data", *SMALL)
    assert code == 0
    return lines[-1]


def train(capsys, data, *extra):
    code, lines, err = run(capsys, "train", "--data", data, "--quiet", "--iterations", "6", *TINY_MODEL, *extra)
    assert code == 0, err
    return lines[-1]


class TestConfig:
    def test_canonical_round_trip(self, tmp_path):
        cfg = cli.load_config(None, ["train.seed=3", "model.dropout=0.25"])
        path = tmp_path / "c.json"
        path.write_text(cli.canonical(cfg))
        again = cli.load_config(path, [])
        assert cli.canonical(again) == cli.canonical(cfg)
        assert cli.config_hash(again) == cli.config_hash(cfg)

    def test_defaults_match_published_weights(self):
        t = cli.default_config()["train"]
        assert (t["lambda1"], t["lambda2"], t["mu1"], t["lr"]) == (1.5, 1.5, 1.0, 5e-4)

    def test_unknown_key(self):
        with pytest.raises(cli.ConfigurationError):
            cli.load_config(None, ["train.nope=1"])
        with pytest.raises(cli.ConfigurationError):
            cli.load_config(None, ["train.seed"])


class TestGenData:
    def test_outputs(self, corpus_dir):
        from pathlib import Path
        d = Path(corpus_dir)
        manifest = json.loads((d / "manifest.json").read_text())
        assert manifest["n_train"] == 6 and manifest["n_test"] == 3
        assert len(manifest["videos"]) == 9
        assert all((d / v["file"]).is_file() for v in manifest["videos"])
        assert (d / "descriptions.tsv").is_file() and (d / "config.json").is_file()

    def test_idempotent(self, corpus_dir, capsys):
        from pathlib import Path
        before = {p.name: p.read_bytes() for p in Path(corpus_dir).rglob("*") if p.is_file()}
        code, lines, _ = run(capsys, "gen-data", *SMALL)
        assert code == 0 and lines[-1] == corpus_dir
        after = {p.name: p.read_bytes() for p in Path(corpus_dir).rglob("*") if p.is_file()}
        assert before == after

    def test_bad_config_exits_nonzero(self, runs, capsys):
        code, _, err = run(capsys, "gen-data", "--set", "corpus.n_classes=1")
        assert code != 0 and "error" in err


class TestTrainEval:
    def test_log_has_one_line_per_iteration(self, corpus_dir, capsys):
        from pathlib import Path
        ckpt = Path(train(capsys, corpus_dir))
        lines = (ckpt.parent / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 6
        assert (ckpt.parent / "checkpoints" / "iter_000005.wck").is_file()

    def test_same_config_same_bytes(self, corpus_dir, capsys):
        from pathlib import Path
        first = Path(train(capsys, corpus_dir)).read_bytes()
        second = Path(train(capsys, corpus_dir)).read_bytes()
        assert first == second

    def test_emitted_config_reproduces_run(self, corpus_dir, capsys):
        from pathlib import Path
        ckpt = Path(train(capsys, corpus_dir, "--seed", "4"))
        cfg = ckpt.parent / "config.json"
        code, lines, _ = run(capsys, "train", "--data", corpus_dir, "--quiet", "--config", str(cfg))
        assert code == 0 and Path(lines[-1]) == ckpt

    def test_eval_outputs_and_no_describer_calls(self, corpus_dir, capsys):
        from pathlib import Path
        ckpt = train(capsys, corpus_dir)
        before = Describer.total_calls
        code, lines, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", corpus_dir)
        assert code == 0 and Describer.total_calls == before
        assert "describer calls during evaluation: 0" in lines
        out = Path(lines[-1])
        report = json.loads((out / "report.json").read_text())
        assert set(report) == {"thresholds", "mAP", "averages", "per_class"}
        assert all(0.0 <= v <= 1.0 for v in report["mAP"])
        assert (out / "proposals.csv").read_text().startswith("video_id,class,q,t_s,t_e")
        tracks = sorted((out / "tracks").glob("*.csv"))
        assert len(tracks) == 3
        assert tracks[0].read_text().splitlines()[0] == "t,A_KSM,A_CSR,fused"

    def test_eval_ignores_description_table(self, corpus_dir, capsys):
        from pathlib import Path
        ckpt = train(capsys, corpus_dir)
        _, lines, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", corpus_dir, "--no-tracks")
        first = (Path(lines[-1]) / "report.json").read_bytes()
        (Path(corpus_dir) / "descriptions.tsv").unlink()
        _, lines, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", corpus_dir, "--no-tracks")
        assert (Path(lines[-1]) / "report.json").read_bytes() == first

    def test_missing_corpus(self, runs, capsys):
        code, _, err = run(capsys, "train", "--data", str(runs / "absent"))
        assert code != 0 and "manifest" in err

    def test_missing_checkpoint(self, corpus_dir, capsys):
        code, _, err = run(capsys, "eval", "--checkpoint", "nowhere.wck", "--data", corpus_dir)
        assert code != 0 and "checkpoint" in err

    def test_ablation_switches(self, corpus_dir, capsys):
        from priorloc.checkpoint import load_checkpoint
        ckpt = train(capsys, corpus_dir, "--no-csr", "--no-ksm")
        arrays, meta = load_checkpoint(ckpt)
        assert not any(k.startswith("csr.") for k in arrays)
        assert meta["train"]["enable_csr"] is False and meta["train"]["enable_ksm"] is False


class TestGradcheckAndAblate:
    def test_gradcheck_lists_every_op(self, capsys):
        from priorloc.numerics import GRADCHECK_CASES
        code, lines, _ = run(capsys, "gradcheck", "--trials", "2")
        assert code == 0
        for name in GRADCHECK_CASES:
            assert any(line.split()[1] == name for line in lines[:-1])
        assert lines[-1] == f"{len(GRADCHECK_CASES)}/{len(GRADCHECK_CASES)} ops passed"

    def test_gradcheck_failure_exits_nonzero(self, capsys, monkeypatch):
        import priorloc.numerics as nm
        real = nm.run_gradchecks
        monkeypatch.setattr(nm, "run_gradchecks", lambda **kw: [
            s if i else type(s)(s.op_name, s.trials, s.degenerate, 1.0, False) for i, s in enumerate(real(**kw))])
        code, lines, _ = run(capsys, "gradcheck", "--trials", "1")
        assert code == 1 and lines[0].startswith("FAIL")

    def test_ablate_four_rows(self, corpus_dir, capsys):
        from pathlib import Path
        code, lines, err = run(capsys, "ablate", "--data", corpus_dir, "--iterations", "3", *TINY_MODEL)
        assert code == 0, err
        names = [line.split()[0] for line in lines[1:5]]
        assert names == ["Baseline", "Baseline+KSM", "Baseline+CSR", "Baseline+KSM+CSR"]
        rows = json.loads((Path(lines[-1]) / "ablation.json").read_text())
        base = Path(train(capsys, corpus_dir, "--iterations", "3", "--no-ksm", "--no-csr"))
        single = json.loads(cli.cmd_eval(base, corpus_dir, base.parent, tracks=False)["report"].to_json())
        assert rows[0]["mAP"] == single["mAP"]
