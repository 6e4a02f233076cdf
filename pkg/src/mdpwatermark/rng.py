"""Deterministic random-stream derivation.

All randomness in this package flows through numpy's PCG64 generator,
seeded through a ``SeedSequence`` whose entropy is the tuple
``(root_seed, *tags)``.  Trajectory replicates use the tags
``(replicate, role)`` where ``role`` separates the plant/controller
stream from the attacker stream, so

* the same ``(root_seed, replicate)`` always reproduces the same
  trajectory, regardless of how many other replicates ran before it, and
* the attacker's draws are independent of the plant's draws but still
  derived from the single root seed.

Simulation code draws a fixed per-step budget of uniforms (two plant
uniforms and two attacker uniforms per step, generated as ``(horizon, 2)``
blocks).  Keeping the draw pattern positional makes the compiled and
pure-Python simulation paths consume bit-identical random numbers.
"""

from __future__ import annotations

import numpy as np

# Stream roles within one replicate.
PLANT_STREAM = 0
ATTACKER_STREAM = 1

# Tag used when an experiment needs to derive sub-experiment root seeds
# (e.g. one root per point of a beta sweep).
_SUBRUN_TAG = 0x5EED


def stream(root_seed: int, *tags: int) -> np.random.Generator:
    """Return the PCG64 generator identified by ``(root_seed, *tags)``."""
    return np.random.default_rng(np.random.SeedSequence((int(root_seed),) + tuple(int(t) for t in tags)))


def replicate_streams(root_seed: int, replicate: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Plant and attacker generators for one trajectory replicate."""
    return (
        stream(root_seed, replicate, PLANT_STREAM),
        stream(root_seed, replicate, ATTACKER_STREAM),
    )


def derive_root(root_seed: int, index: int) -> int:
    """Derive a sub-experiment root seed from a parent root seed.

    Used by batch drivers (sweeps, companion runs) so that sub-runs get
    disjoint replicate streams while remaining reproducible from the
    single configured seed.
    """
    return int(np.random.SeedSequence((int(root_seed), _SUBRUN_TAG, int(index))).generate_state(1)[0])
