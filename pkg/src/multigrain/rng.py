"""Deterministic random-number streams.

Every stochastic choice in the package draws from a named Philox stream
derived from a single run seed. Philox is counter-based, so streams are
cheap to create, independent by construction, and their states serialize
into checkpoints for exact resume.
"""

from __future__ import annotations

import zlib

import numpy as np


def _stream_entropy(seed: int, name: str) -> np.random.SeedSequence:
    # crc32 gives a stable cross-platform hash of the stream name
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(key,))


class RngHub:
    """Registry of named generators sharing one base seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """Return the generator for ``name``, creating it on first use."""
        gen = self._streams.get(name)
        if gen is None:
            gen = np.random.Generator(np.random.Philox(_stream_entropy(self.seed, name)))
            self._streams[name] = gen
        return gen

    def state(self) -> dict:
        """JSON-serializable snapshot of every stream created so far."""
        out = {"seed": self.seed, "streams": {}}
        for name, gen in self._streams.items():
            out["streams"][name] = _state_to_json(gen.bit_generator.state)
        return out

    def load_state(self, snapshot: dict) -> None:
        self.seed = int(snapshot["seed"])
        for name, raw in snapshot.get("streams", {}).items():
            gen = self.stream(name)
            gen.bit_generator.state = _state_from_json(raw)


def _state_to_json(state: dict) -> dict:
    out = {}
    for key, val in state.items():
        if isinstance(val, dict):
            out[key] = _state_to_json(val)
        elif isinstance(val, np.ndarray):
            out[key] = {"__ndarray__": val.dtype.str, "values": [int(x) for x in val.ravel()]}
        elif isinstance(val, (np.integer,)):
            out[key] = int(val)
        else:
            out[key] = val
    return out


def _state_from_json(raw: dict) -> dict:
    out = {}
    for key, val in raw.items():
        if isinstance(val, dict) and "__ndarray__" in val:
            out[key] = np.array(val["values"], dtype=np.dtype(val["__ndarray__"]))
        elif isinstance(val, dict):
            out[key] = _state_from_json(val)
        else:
            out[key] = val
    return out


def derived_rng(*entropy: int) -> np.random.Generator:
    """One-shot generator keyed by a tuple of integers.

    Used where determinism must not depend on consumption order, e.g.
    per-epoch batch shuffles and per-sample corpus draws.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(e) for e in entropy])))
