import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semgcnn.dataio import (
    ChannelStandardizer,
    SessionFormatError,
    SessionRecording,
    SourceId,
    all_sources,
    holdout_size,
    load_csv_session,
    load_session,
    save_session,
    split,
    window,
    window_count,
    zscore_fit_apply,
)

from oracles import enumerate_offsets



def make_session(n, seed=0, source=SourceId(1, 1, 1)):
    rng = np.random.default_rng(seed)
    ch = rng.standard_normal((4, n)).astype(np.float32)
    labels = rng.integers(0, 6, n).astype(np.uint8)
    return SessionRecording(source, 500.0, ch, labels)


class TestSourceId:
    def test_range_checks(self):
        with pytest.raises(ValueError):
            SourceId(8, 1, 1)
        with pytest.raises(ValueError):
            SourceId(1, 0, 1)

    def test_full_grid_has_224_sources(self):
        assert len(set(all_sources())) == 224


class TestWindow:
    def test_single_window(self):
        ws = window(make_session(75))
        assert len(ws) == 1 and ws.origins.tolist() == [0]

    def test_two_windows(self):
        assert window(make_session(93)).origins.tolist() == enumerate_offsets(93, 75, 18) == [0, 18]

    def test_full_session_count(self):
        assert window_count(450_000) == 24_996

    def test_too_short_is_flagged(self):
        ws = window(make_session(74))
        assert len(ws) == 0 and ws.meta["too_short"]

    def test_data_layout_and_center_label(self):
        s = make_session(500, seed=2)
        ws = window(s)
        for i, o in enumerate(ws.origins):
            np.testing.assert_array_equal(ws.data[i], s.channels[:, o:o + 75].T)
            assert ws.labels[i] == s.labels[o + 37]
        assert ws.data.shape[1:] == (75, 4)
        assert ws.network_input().shape[1:] == (4, 75)

    def test_bad_stride(self):
        with pytest.raises(ValueError):
            window(make_session(100), stride=0)

    @given(st.integers(1, 400), st.integers(1, 40), st.integers(1, 80))
    @settings(max_examples=200, deadline=None)
    def test_count_formula_matches_enumeration(self, n, stride, win_len):
        assert window_count(n, win_len, stride) == len(enumerate_offsets(n, win_len, stride))


class TestSplit:
    def test_sizes_for_100_windows(self):
        sp = split(100, seed=1)
        assert len(sp.test) == 10 and len(sp.fold1) + len(sp.fold2) == 90

    def test_index_arithmetic_oracle(self):
        sp = split(100, seed=5)
        remaining = np.setdiff1d(np.arange(100), sp.test)
        # ranks 1-9, 19-27, 37-45, 55-63, 73-81 (1-based) form fold 1
        ranks1 = [r for start in (1, 19, 37, 55, 73) for r in range(start, start + 9)]
        np.testing.assert_array_equal(sp.fold1, remaining[np.array(ranks1) - 1])
        ranks2 = [r for start in (10, 28, 46, 64, 82) for r in range(start, start + 9)]
        np.testing.assert_array_equal(sp.fold2, remaining[np.array(ranks2) - 1])

    def test_remainder_goes_to_earlier_intervals(self):
        sp = split(107, seed=0)  # 11 held out, 96 left: 6 runs of 10 then 4 of 9
        assert [len(iv) for iv in sp.intervals] == [10] * 6 + [9] * 4

    def test_holdout_rounding(self):
        assert holdout_size(25) == 3  # 2.5 rounds half up
        assert holdout_size(24996) == 2500

    def test_reproducible_and_seed_sensitive(self):
        a, b, c = split(500, seed=3), split(500, seed=3), split(500, seed=4)
        assert a.test.tobytes() == b.test.tobytes() and a.fold1.tobytes() == b.fold1.tobytes()
        assert not np.array_equal(a.test, c.test)

    def test_too_few_windows(self):
        with pytest.raises(ValueError):
            split(9)

    @given(st.integers(11, 3000), st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=100, deadline=None)
    def test_disjoint_cover_and_contiguous_runs(self, m, seed):
        sp = split(m, seed=seed)
        allidx = np.concatenate([sp.test, sp.fold1, sp.fold2])
        assert len(allidx) == m and len(np.unique(allidx)) == m
        assert abs(len(sp.fold1) - len(sp.fold2)) <= 10
        rest = np.setdiff1d(np.arange(m), sp.test)
        rank = {v: i for i, v in enumerate(rest)}
        for fold in (sp.fold1, sp.fold2):
            r = np.array([rank[v] for v in fold])
            assert np.sum(np.diff(r) != 1) + 1 == 5


class TestZScore:
    def test_train_set_is_standardized(self):
        rng = np.random.default_rng(0)
        train = rng.normal(3.0, 2.0, (50, 75, 4))
        (t,), (mean, std) = zscore_fit_apply(train)
        assert np.abs(t.mean(axis=(0, 1))).max() < 1e-10
        assert np.abs(t.std(axis=(0, 1)) - 1).max() < 1e-6

    def test_constant_channel_goes_to_zero(self):
        x = np.ones((5, 75, 4))
        x[..., 1] = np.random.default_rng(0).standard_normal((5, 75))
        (t,), (_, std) = zscore_fit_apply(x)
        assert np.all(t[..., 0] == 0) and std[0] == 1e-8

    def test_other_sets_use_training_statistics(self):
        rng = np.random.default_rng(1)
        train = rng.standard_normal((40, 75, 4))
        val = train + 5.0
        (t, v), (mean, std) = zscore_fit_apply(train, val)
        np.testing.assert_allclose(v, t + 5.0 / std, atol=1e-12)
        assert abs(v.mean() - t.mean()) > 1.0

    def test_empty_training_set(self):
        with pytest.raises(ValueError):
            zscore_fit_apply(np.zeros((0, 75, 4)))

    def test_transformer_matches_function(self):
        x = np.random.default_rng(2).normal(1, 3, (20, 75, 4))
        (t,), _ = zscore_fit_apply(x)
        np.testing.assert_allclose(ChannelStandardizer().fit_transform(x), t)


class TestSessionFile:
    def test_round_trip_bit_exact(self, tmp_path):
        s = make_session(1234, source=SourceId(3, 7, 2))
        save_session(s, tmp_path / "x.semg")
        back = load_session(tmp_path / "x.semg")
        assert back.equals(s)
        assert back.channels.tobytes() == s.channels.tobytes()

    def test_layout_is_documented_little_endian(self, tmp_path):
        s = make_session(3)
        save_session(s, tmp_path / "x.semg")
        raw = (tmp_path / "x.semg").read_bytes()
        assert raw[:4] == b"SEMG"
        header = struct.calcsize("<4sHiiidiq")
        assert len(raw) == header + 3 * 17
        ch1, ch2, ch3, ch4, label = struct.unpack_from("<ffffB", raw, header)
        assert (ch1, label) == (float(s.channels[0, 0]), s.labels[0])

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.semg").write_bytes(b"")
        with pytest.raises(SessionFormatError, match="header"):
            load_session(tmp_path / "e.semg")

    def test_five_channels(self, tmp_path):
        p = tmp_path / "five.semg"
        p.write_bytes(struct.pack("<4sHiiidiq", b"SEMG", 1, 1, 1, 1, 500.0, 5, 0))
        with pytest.raises(SessionFormatError, match="channel count"):
            load_session(p)

    def test_bad_label(self, tmp_path):
        s = make_session(10)
        s.labels[4] = 9
        save_session(s, tmp_path / "l.semg")
        with pytest.raises(SessionFormatError, match="label"):
            load_session(tmp_path / "l.semg")

    def test_truncated_payload(self, tmp_path):
        save_session(make_session(10), tmp_path / "t.semg")
        raw = (tmp_path / "t.semg").read_bytes()
        (tmp_path / "t.semg").write_bytes(raw[:-3])
        with pytest.raises(SessionFormatError, match="n_samples"):
            load_session(tmp_path / "t.semg")

    def test_bad_magic(self, tmp_path):
        save_session(make_session(2), tmp_path / "m.semg")
        raw = bytearray((tmp_path / "m.semg").read_bytes())
        raw[:4] = b"XXXX"
        (tmp_path / "m.semg").write_bytes(bytes(raw))
        with pytest.raises(SessionFormatError, match="magic"):
            load_session(tmp_path / "m.semg")

    def test_csv_import(self, tmp_path):
        rows = ["time,ch1,ch2,ch3,ch4,label"]
        for i in range(6):
            rows.append(f"{i / 500},{i},{i + 1},{i + 2},{i + 3},{i % 6}")
        (tmp_path / "s.csv").write_text("\n".join(rows))
        rec = load_csv_session(tmp_path / "s.csv", SourceId(1, 2, 3))
        assert rec.fs == pytest.approx(500.0)
        assert rec.channels.shape == (4, 6) and rec.labels.tolist() == [0, 1, 2, 3, 4, 5]

    def test_csv_wrong_width(self, tmp_path):
        (tmp_path / "s.csv").write_text("0,1,2,3,0\n")
        with pytest.raises(SessionFormatError, match="channel count"):
            load_csv_session(tmp_path / "s.csv", SourceId(1, 1, 1))
