"""Shared plumbing: seeded RNG streams, stable file writing, hashing."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
import zlib

import numpy as np

# Named sub-streams derived from one user-facing seed.  Each stream gets an
# independent generator so adding draws to one stage never perturbs another.
STREAMS = ("data", "init", "dropout", "shuffle", "bootstrap", "probe")


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Return the named child generator of ``seed``.

    The child is keyed by a CRC of the stream name so the mapping is stable
    across runs and across processes.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def seed_lineage(seed: int) -> dict:
    """Describe how named sub-streams are derived from the root seed."""
    return {
        "root_seed": int(seed),
        "streams": {name: zlib.crc32(name.encode("utf-8")) for name in STREAMS},
        "scheme": "SeedSequence(entropy=root_seed, spawn_key=(crc32(name),))",
    }


def atomic_write_text(path: str, text: str) -> None:
    """Write ``text`` to ``path`` via a temp file + rename in one directory."""
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path: str, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def fmt_float(x) -> str:
    """Shortest round-trip decimal form; used for byte-stable CSV output."""
    return repr(float(x))
