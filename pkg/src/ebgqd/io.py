"""Timestamp files, histogram and report serialisation.

Timestamp file layout (little endian)::

    uint64   header length in bytes
    bytes    UTF-8 JSON header
    uint64[] timestamps (ps) of channel 0, then channel 1, ...

The header lists the channel names and per-channel counts, so the body can
be split without delimiters.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .correlator import CorrelationHistogram
from .errors import PreconditionError

FORMAT_VERSION = 1
MAGIC_KEY = "ebgqd-timestamps"


@dataclass
class TimestampFile:
    channels: dict  # name -> int64 array, monotone
    duration_ps: int
    seed: int
    config_hash: str
    extra: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format": MAGIC_KEY,
            "format_version": FORMAT_VERSION,
            "resolution_ps": 1,
            "channels": list(self.channels),
            "counts": [int(len(v)) for v in self.channels.values()],
            "duration_ps": int(self.duration_ps),
            "seed": int(self.seed),
            "config_hash": self.config_hash,
            **({"extra": self.extra} if self.extra else {}),
        }


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a resolved configuration."""
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()


def write_timestamps(path, tf: TimestampFile, csv_mirror: bool = False) -> Path:
    path = Path(path)
    for name, t in tf.channels.items():
        t = np.asarray(t)
        if len(t) and (t[0] < 0 or np.any(np.diff(t) < 0)):
            raise PreconditionError(f"channel {name} is not monotone and non-negative")
    head = canonical_json(tf.header()).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for t in tf.channels.values():
            fh.write(np.asarray(t, dtype="<u8").tobytes())
    if csv_mirror:
        with open(path.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["channel", "time_ps"])
            for name, t in tf.channels.items():
                w.writerows((name, int(x)) for x in t)
    return path


def read_timestamps(path) -> TimestampFile:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode())
        if header.get("format") != MAGIC_KEY:
            raise PreconditionError(f"{path} is not a timestamp file")
        body = np.frombuffer(fh.read(), dtype="<u8")
    channels = {}
    start = 0
    for name, count in zip(header["channels"], header["counts"]):
        channels[name] = body[start : start + count].astype(np.int64)
        start += count
    if start != len(body):
        raise PreconditionError(f"{path}: body length does not match header counts")
    return TimestampFile(channels, header["duration_ps"], header["seed"], header["config_hash"], header.get("extra", {}))


def write_histogram_csv(path, hist: CorrelationHistogram):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau_ps", "counts"])
        for tau, c in zip(hist.centers, hist.counts):
            w.writerow([f"{tau:.1f}", int(c)])


def histogram_to_dict(hist: CorrelationHistogram) -> dict:
    return {
        "bin_width_ps": int(hist.bin_width),
        "tau_min_ps": int(hist.tau_min),
        "tau_max_ps": int(hist.tau_max),
        "total_pairs": int(hist.total_pairs),
        "meta": hist.meta,
        "counts": [int(c) for c in hist.counts],
    }


def histogram_from_dict(d: dict) -> CorrelationHistogram:
    return CorrelationHistogram(
        d["bin_width_ps"],
        d["tau_min_ps"],
        d["tau_max_ps"],
        np.asarray(d["counts"], dtype=np.int64),
        d.get("total_pairs", int(sum(d["counts"]))),
        d.get("meta", {}),
    )


def write_histogram_json(path, hist: CorrelationHistogram):
    Path(path).write_text(json.dumps(histogram_to_dict(hist), indent=1) + "\n")


def read_histogram_json(path) -> CorrelationHistogram:
    return histogram_from_dict(json.loads(Path(path).read_text()))


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_columns_csv(path, header, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in zip(*columns):
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v
