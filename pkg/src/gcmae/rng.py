"""Named, seedable random streams.

Every source of randomness in a run (parameter init, mask sampling, batch
order, bank init, negative sampling, ...) gets its own PCG64 stream derived
from the run seed plus a stream name. Streams are independent, so consuming
one never perturbs another; this is what makes ablations (e.g. disabling the
contrastive branch) leave the remaining trajectory bit-identical.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str) -> int:
    # stable across platforms and interpreter runs, unlike hash()
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, name: str, worker: int | None = None) -> np.random.Generator:
    """Return the PCG64 stream identified by (seed, name[, worker]).

    ``worker`` derives a per-worker child stream so parallel loaders can draw
    independently while staying reproducible.
    """
    entropy = [int(seed), _name_key(name)]
    if worker is not None:
        entropy.append(int(worker))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def generator_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a generator's position."""
    state = gen.bit_generator.state
    return {
        "bit_generator": state["bit_generator"],
        "state": str(state["state"]["state"]),
        "inc": str(state["state"]["inc"]),
        "has_uint32": state["has_uint32"],
        "uinteger": state["uinteger"],
    }


def restore_generator(snapshot: dict) -> np.random.Generator:
    """Rebuild a generator from a `generator_state` snapshot."""
    if snapshot["bit_generator"] != "PCG64":
        raise ValueError(f"unsupported bit generator {snapshot['bit_generator']!r}")
    gen = np.random.Generator(np.random.PCG64())
    gen.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(snapshot["state"]), "inc": int(snapshot["inc"])},
        "has_uint32": snapshot["has_uint32"],
        "uinteger": snapshot["uinteger"],
    }
    return gen


def draw_seed(gen: np.random.Generator) -> int:
    """Draw a fresh 63-bit seed from a stream (e.g. one per mask plan)."""
    return int(gen.integers(0, 2**63))
