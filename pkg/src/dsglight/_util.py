"""Shared plumbing: seeded RNG streams, atomic file writes, worker caps."""

import json
import os
import tempfile

import numpy as np

# Stable stream labels so every consumer of a --seed draws from its own
# counter-based substream instead of sharing one mutable generator.
_STREAMS = {
    "dataset": 1,
    "train": 2,
    "init": 3,
    "synthetic": 4,
    "extractor": 5,
}


def make_rng(seed, stream=0):
    """Counter-based generator for ``seed``; ``stream`` may be an int or a label."""
    if isinstance(stream, str):
        stream = _STREAMS[stream]
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream)])
    return np.random.Generator(np.random.Philox(ss))


def worker_count():
    """Worker cap from DSGLIGHT_THREADS; defaults to 1 (fully deterministic)."""
    raw = os.environ.get("DSGLIGHT_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def atomic_write_bytes(path, payload):
    """Write ``payload`` to ``path`` via a temp file + rename; no partial files."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2) + "\n")
