"""On-disk formats: FSEQ feature files, manifests, scores and train logs.

FSEQ is the bit-exact ingestion format for frame sequences: magic
"FSEQ", a u32 version, u32 D, u32 L, then L*D little-endian float32
values, frame-major.  Storage is 32-bit; all in-memory compute is 64-bit.
Manifests are UTF-8 CSV with header ``path,label,frames,bucket`` and
paths relative to the manifest location.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import TrialScores


class UttencDataError(Exception):
    """Base class for malformed on-disk data."""


class BadMagicError(UttencDataError):
    pass


class BadVersionError(UttencDataError):
    pass


class TruncatedPayloadError(UttencDataError):
    pass


_FSEQ_MAGIC = b"FSEQ"
_FSEQ_VERSION = 1


def write_feature_file(path, frames: np.ndarray) -> None:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError("frames must be a nonempty (L, D) matrix")
    L, D = x.shape
    with open(path, "wb") as f:
        f.write(_FSEQ_MAGIC)
        f.write(struct.pack("<III", _FSEQ_VERSION, D, L))
        f.write(x.astype("<f4").tobytes())


def read_feature_file(path) -> np.ndarray:
    """Load an FSEQ file as a float64 (L, D) matrix."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != _FSEQ_MAGIC:
        raise BadMagicError("bad magic: not an FSEQ file")
    if len(raw) < 16:
        raise TruncatedPayloadError("truncated FSEQ header")
    version, D, L = struct.unpack("<III", raw[4:16])
    if version != _FSEQ_VERSION:
        raise BadVersionError(f"unsupported FSEQ version {version}")
    if D < 1 or L < 1:
        raise UttencDataError("FSEQ dimensions must be >= 1")
    if len(raw) < 16 + 4 * D * L:
        raise TruncatedPayloadError("truncated payload")
    data = np.frombuffer(raw, dtype="<f4", count=D * L, offset=16)
    return data.reshape(L, D).astype(np.float64)


@dataclass
class ManifestEntry:
    path: str
    label: int
    frames: int
    bucket: str


def write_manifest(path, entries: list) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["path", "label", "frames", "bucket"])
        for e in entries:
            writer.writerow([e.path, e.label, e.frames, e.bucket])


def read_manifest(path) -> list:
    entries = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != ["path", "label", "frames", "bucket"]:
            raise UttencDataError(f"bad manifest header in {path}")
        for row in reader:
            if len(row) != 4:
                raise UttencDataError(f"bad manifest row: {row!r}")
            entries.append(ManifestEntry(path=row[0], label=int(row[1]),
                                         frames=int(row[2]), bucket=row[3]))
    return entries


def load_utterances(manifest_path):
    """Manifest -> list of (frames, label, utterance id, bucket)."""
    base = Path(manifest_path).parent
    out = []
    for e in read_manifest(manifest_path):
        frames = read_feature_file(base / e.path)
        if frames.shape[0] != e.frames:
            raise UttencDataError(f"frame count mismatch for {e.path}")
        uid = Path(e.path).stem
        out.append((frames, e.label, uid, e.bucket))
    return out


# --- scores TSV (consumed by `fuse` / `evaluate`) ------------------------

def write_scores(path, trials: TrialScores) -> None:
    c = trials.num_classes
    with open(path, "w", encoding="utf-8") as f:
        cols = ["id", "label", "bucket"] + [f"score_{i}" for i in range(c)]
        f.write("\t".join(cols) + "\n")
        for i, uid in enumerate(trials.ids):
            bucket = trials.buckets[i] if trials.buckets else "-"
            vals = ["%.17g" % v for v in trials.scores[i]]
            f.write("\t".join([uid, str(int(trials.labels[i])), bucket] + vals) + "\n")


def read_scores(path) -> TrialScores:
    with open(path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n").split("\t")
        if header[:3] != ["id", "label", "bucket"]:
            raise UttencDataError(f"bad scores header in {path}")
        c = len(header) - 3
        ids, labels, buckets, rows = [], [], [], []
        for line in f:
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 + c:
                raise UttencDataError(f"bad scores row: {line!r}")
            ids.append(parts[0])
            labels.append(int(parts[1]))
            buckets.append(parts[2])
            rows.append([float(v) for v in parts[3:]])
    return TrialScores(ids=ids, scores=np.array(rows), labels=np.array(labels),
                       buckets=buckets)


# --- train log TSV -------------------------------------------------------

def write_trainlog(path, log) -> None:
    """TrainLog -> tab-separated (step, raw_loss, smoothed_loss, lr, epoch)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("step\traw_loss\tsmoothed_loss\tlr\tepoch\n")
        for i in range(len(log.steps)):
            f.write("%d\t%.17g\t%.17g\t%.17g\t%d\n" % (
                log.steps[i], log.raw_loss[i], log.smoothed_loss[i],
                log.lr[i], log.epoch[i]))
