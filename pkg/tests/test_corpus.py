import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from priorloc.corpus import (
    CorpusConfig,
    DescriptionPair,
    Describer,
    TemplateDescriber,
    Vocabulary,
    builtin_table,
    decode,
    encode,
    generate_corpus,
    load_feature_file,
    make_prototypes,
    mask_count,
    mask_description,
    read_table,
    split_corpus,
    tokenize,
    write_feature_file,
    write_table,
)
from priorloc.errors import ArgumentError, ConfigurationError, FeatureFormatError

SMALL = dict(n_train=6, n_test=4, feature_dim=48)


def nearest_template_intervals(video, rows, protos, cfg):
    """Independent recovery of planted intervals: label each segment with
    its nearest noiseless template, then read off non-background runs."""
    names, temps = ["bg"], [protos.background]
    for c, row in enumerate(rows[:cfg.n_classes]):
        for i, verb in enumerate(row.verbs):
            amp = cfg.key_amplitude if i == len(row.verbs) // 2 else cfg.side_amplitude
            names.append(c)
            temps.append(protos.background + amp * protos.verbs[verb])
    temps = np.stack(temps)
    feats = np.concatenate([video.rgb, video.flow], axis=1)
    d = ((feats[:, None, :] - temps[None]) ** 2).sum(-1)
    seg = [names[j] for j in d.argmin(axis=1)]
    out, t = [], 0
    while t < len(seg):
        if seg[t] == "bg":
            t += 1
            continue
        s = t
        while t < len(seg) and seg[t] != "bg":
            t += 1
        out.append((seg[s], float(s), float(t)))
    return out


class TestGenerator:
    def test_deterministic(self):
        cfg = CorpusConfig(**SMALL)
        a, b = generate_corpus(cfg), generate_corpus(cfg)
        for x, y in zip(a, b):
            assert x.id == y.id
            np.testing.assert_array_equal(x.rgb, y.rgb)
            np.testing.assert_array_equal(x.flow, y.flow)
            assert x.gt_intervals == y.gt_intervals

    def test_seed_changes_data(self):
        a = generate_corpus(CorpusConfig(**SMALL))
        b = generate_corpus(CorpusConfig(seed=8, **SMALL))
        assert not np.array_equal(a[0].rgb, b[0].rgb)

    def test_default_corpus_shape(self):
        vids = generate_corpus(CorpusConfig())
        train, test = split_corpus(vids)
        assert len(train) == 60 and len(test) == 20
        for v in vids:
            assert 64 <= v.T <= 128
            assert v.rgb.shape == (v.T, 1024) and v.flow.shape == (v.T, 1024)

    def test_label_is_union_of_interval_classes(self):
        for v in generate_corpus(CorpusConfig(**SMALL)):
            assert set(v.positive_classes()) == {c for c, _, _ in v.gt_intervals}

    def test_intervals_disjoint_and_inside(self):
        for v in generate_corpus(CorpusConfig(**SMALL)):
            ivs = sorted(v.gt_intervals, key=lambda g: g[1])
            for c, s, e in ivs:
                assert 0 <= s < e <= v.T
            for (_, _, e0), (_, s1, _) in zip(ivs, ivs[1:]):
                assert s1 - e0 >= 2

    def test_nearest_template_recovers_intervals(self):
        cfg = CorpusConfig(snr=20.0, background_jitter=0.0, **SMALL)
        rows = builtin_table(cfg.n_classes)
        protos = make_prototypes(rows, cfg.seed, cfg.feature_dim)
        for v in generate_corpus(cfg):
            assert nearest_template_intervals(v, rows, protos, cfg) == v.gt_intervals

    @pytest.mark.parametrize("bad", [dict(n_classes=1), dict(t_min=8), dict(t_min=100, t_max=90), dict(snr=0.0),
                                     dict(instance_min=40), dict(confuser_fraction=1.0)])
    def test_invalid_configs(self, bad):
        with pytest.raises(ConfigurationError):
            generate_corpus(CorpusConfig(**{**SMALL, **bad}))


class TestFeatureFile:
    def test_round_trip(self, tmp_path):
        v = generate_corpus(CorpusConfig(**SMALL))[0]
        path = tmp_path / f"{v.id}.wtf"
        write_feature_file(v, path)
        back = load_feature_file(path)
        assert back.id == v.id
        np.testing.assert_array_equal(back.rgb, v.rgb)
        np.testing.assert_array_equal(back.flow, v.flow)
        np.testing.assert_array_equal(back.label, v.label)
        assert back.gt_intervals == v.gt_intervals

    def test_without_ground_truth(self):
        v = generate_corpus(CorpusConfig(**SMALL))[0]
        assert decode(encode(v, include_gt=False)).gt_intervals == []

    def test_zero_length_rejected(self):
        v = generate_corpus(CorpusConfig(**SMALL))[0]
        empty = dataclasses.replace(v, rgb=v.rgb[:0], flow=v.flow[:0], gt_intervals=[])
        with pytest.raises(FeatureFormatError) as err:
            decode(encode(empty))
        assert err.value.offset == 4

    def test_truncated(self):
        buf = encode(generate_corpus(CorpusConfig(**SMALL))[0])
        with pytest.raises(FeatureFormatError, match="expected"):
            decode(buf[:-5])

    def test_bad_magic(self):
        buf = encode(generate_corpus(CorpusConfig(**SMALL))[0])
        with pytest.raises(FeatureFormatError) as err:
            decode(b"XXXX" + buf[4:])
        assert err.value.offset == 0

    def test_trailing_bytes(self):
        buf = encode(generate_corpus(CorpusConfig(**SMALL))[0])
        with pytest.raises(FeatureFormatError):
            decode(buf + b"\0")


class TestDescriptions:
    def setup_method(self):
        self.rows = builtin_table(5)
        self.describer = TemplateDescriber(self.rows)
        self.video = generate_corpus(CorpusConfig(**SMALL))[0]

    def test_complete_is_long_and_has_a_verb(self):
        for c in self.video.positive_classes():
            toks = self.describer.describe_complete(self.video, c)
            assert len(toks) >= 12
            assert set(toks) & set(self.rows[c].verbs)

    def test_key_contains_key_verb(self):
        c = self.video.positive_classes()[0]
        assert self.rows[c].key_verb in self.describer.describe_key(self.video, c)

    def test_class_outside_label_rejected(self):
        absent = next(c for c in range(5) if not self.video.label[c])
        with pytest.raises(ArgumentError):
            self.describer.describe_key(self.video, absent)
        with pytest.raises(ArgumentError):
            self.describer.describe_complete(self.video, 99)

    def test_call_counter(self):
        before = Describer.total_calls
        self.describer.describe_key(self.video, self.video.positive_classes()[0])
        assert Describer.total_calls == before + 1

    def test_verbs_unique_across_classes(self):
        rows = builtin_table(20)
        verbs = [v for r in rows for v in r.verbs]
        assert len(verbs) == len(set(verbs))

    def test_table_round_trip(self, tmp_path):
        write_table(self.rows, tmp_path / "t.tsv")
        assert read_table(tmp_path / "t.tsv") == self.rows

    def test_table_size_bounds(self):
        with pytest.raises(ConfigurationError):
            builtin_table(1)
        with pytest.raises(ConfigurationError):
            builtin_table(21)

    def test_tokenize(self):
        assert tokenize("A Person, [MASK] jumps!") == ["a", "person", "[MASK]", "jumps"]


class TestMasking:
    @given(st.integers(3, 200), st.integers(0, 2**31))
    @settings(max_examples=80, deadline=None)
    def test_mask_count_property(self, m, seed):
        toks = [f"w{i}" for i in range(m)]
        pos = mask_description(toks, np.random.default_rng(seed), verbs={"w0"})
        assert len(pos) == math.ceil(m / 3) == mask_count(m)
        assert len(set(pos)) == len(pos)
        assert all(0 <= p < m for p in pos)

    def test_too_short(self):
        with pytest.raises(ArgumentError):
            mask_description(["a", "b"], np.random.default_rng(0))

    def test_verb_bias_monte_carlo(self):
        # Six tokens, two masks, the verb weighs 2 out of 7. It goes first with
        # probability 2/7; otherwise a weight-1 token went first and the verb
        # has 2 of the remaining 6. Total 11/21.
        toks = ["a", "b", "run", "c", "d", "e"]
        rng = np.random.default_rng(0)
        n = 20000
        hits = sum(2 in mask_description(toks, rng, verbs={"run"}) for _ in range(n))
        expected = 11 / 21
        assert hits / n == pytest.approx(expected, abs=0.02)

    def test_description_pair(self):
        pair = DescriptionPair("v", [], ["a", "b", "c", "d"], [1, 3])
        assert pair.masked_text == ["a", "[MASK]", "c", "[MASK]"]
        assert pair.targets == ["b", "d"]


class TestVocabulary:
    def test_rows_independent_of_vocab_size(self):
        a = Vocabulary(["run", "jump"], seed=3)
        b = Vocabulary(["run", "jump"], seed=3)
        np.testing.assert_array_equal(a.table, b.table)
        assert a.table.shape == (5, 300)

    def test_oov_maps_to_pad(self):
        v = Vocabulary(["run"], seed=0)
        ids = v.ids(["run", "zebra"])
        assert ids[1] == v.stoi["[PAD]"]
        assert v.oov_count == 1

    def test_load_vectors(self, tmp_path):
        v = Vocabulary(["run", "jump", "leap"], seed=0)
        before = v.table.copy()
        lines = [f"run {' '.join(['1.0'] * 300)}", f"jump {' '.join(['-2.0'] * 300)}", "bad 1 2"]
        (tmp_path / "vec.txt").write_text("\n".join(lines) + "\n")
        assert v.load_vectors(tmp_path / "vec.txt") == 2
        np.testing.assert_array_equal(v.table[v.stoi["run"]], np.ones(300))
        np.testing.assert_array_equal(v.table[v.stoi["jump"]], -2 * np.ones(300))
        np.testing.assert_array_equal(v.table[v.stoi["leap"]], before[v.stoi["leap"]])
