import struct

import numpy as np
import pytest

from uttenc.dataio import (BadMagicError, BadVersionError, ManifestEntry,
                           TruncatedPayloadError, UttencDataError,
                           load_utterances, read_feature_file, read_manifest,
                           read_scores, write_feature_file, write_manifest,
                           write_scores, write_trainlog)
from uttenc.metrics import TrialScores
from uttenc.rng import Rng
from uttenc.train import TrainLog


class TestFeatureFile:
    def test_round_trip_32bit(self, tmp_path):
        x = Rng(0).normal((300, 64))
        path = tmp_path / "u.fseq"
        write_feature_file(path, x)
        back = read_feature_file(path)
        assert back.shape == (300, 64)
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, x.astype(np.float32).astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "u.fseq"
        path.write_bytes(b"WAVE" + b"\x00" * 16)
        with pytest.raises(BadMagicError, match="bad magic"):
            read_feature_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "u.fseq"
        path.write_bytes(b"FSEQ" + struct.pack("<III", 7, 2, 2) + b"\x00" * 16)
        with pytest.raises(BadVersionError):
            read_feature_file(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "u.fseq"
        # header promises 3 frames x 2 dims = 24 bytes, provide 8
        path.write_bytes(b"FSEQ" + struct.pack("<III", 1, 2, 3) + b"\x00" * 8)
        with pytest.raises(TruncatedPayloadError, match="truncated payload"):
            read_feature_file(path)

    def test_rejects_empty(self, tmp_path):
        with pytest.raises(ValueError):
            write_feature_file(tmp_path / "u.fseq", np.empty((0, 3)))


class TestManifest:
    def test_round_trip(self, tmp_path):
        entries = [ManifestEntry("a/u0.fseq", 0, 120, "short"),
                   ManifestEntry("a/u1.fseq", 2, 900, "long")]
        path = tmp_path / "split.csv"
        write_manifest(path, entries)
        assert read_manifest(path) == entries

    def test_bad_header(self, tmp_path):
        path = tmp_path / "split.csv"
        path.write_text("path,label\nu.fseq,0\n")
        with pytest.raises(UttencDataError, match="header"):
            read_manifest(path)

    def test_load_utterances(self, tmp_path):
        rng = Rng(1)
        entries = []
        for i in range(3):
            x = rng.normal((10 + i, 4))
            write_feature_file(tmp_path / f"u{i}.fseq", x)
            entries.append(ManifestEntry(f"u{i}.fseq", i % 2, 10 + i, "-"))
        write_manifest(tmp_path / "split.csv", entries)
        utts = load_utterances(tmp_path / "split.csv")
        assert [u[2] for u in utts] == ["u0", "u1", "u2"]
        assert [u[1] for u in utts] == [0, 1, 0]
        assert utts[2][0].shape == (12, 4)

    def test_frame_count_mismatch(self, tmp_path):
        write_feature_file(tmp_path / "u.fseq", Rng(2).normal((5, 2)))
        write_manifest(tmp_path / "split.csv",
                       [ManifestEntry("u.fseq", 0, 99, "-")])
        with pytest.raises(UttencDataError, match="mismatch"):
            load_utterances(tmp_path / "split.csv")


class TestScoresFile:
    def test_round_trip_exact(self, tmp_path):
        rng = Rng(3)
        trials = TrialScores(ids=["a", "b", "c"], scores=rng.normal((3, 4)),
                             labels=np.array([0, 3, 1]),
                             buckets=["short", "long", "-"])
        path = tmp_path / "scores.tsv"
        write_scores(path, trials)
        back = read_scores(path)
        assert back.ids == trials.ids
        assert back.buckets == trials.buckets
        np.testing.assert_array_equal(back.labels, trials.labels)
        # %.17g round-trips float64 exactly
        np.testing.assert_array_equal(back.scores, trials.scores)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "scores.tsv"
        path.write_text("foo\tbar\n")
        with pytest.raises(UttencDataError):
            read_scores(path)


class TestTrainlogFile:
    def test_columns(self, tmp_path):
        log = TrainLog(smooth_window=4, steps=[1, 2], raw_loss=[1.5, 1.25],
                       smoothed_loss=[1.5, 1.375], lr=[0.1, 0.1], epoch=[1, 1])
        path = tmp_path / "trainlog.tsv"
        write_trainlog(path, log)
        lines = path.read_text().splitlines()
        assert lines[0] == "step\traw_loss\tsmoothed_loss\tlr\tepoch"
        assert lines[1].split("\t")[0] == "1"
        assert float(lines[2].split("\t")[2]) == 1.375
