"""JSON (de)serialization of the matrix-valued model objects.

Reference layout: a JSON object with the dimensions and a ``rows`` array
of arrays of numbers, e.g. ``{"n": 2, "m": 2, "rows": [[...], ...]}``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .attack import AttackMatrix
from .mdp import CostFunction, Policy, TransitionKernel


def kernel_to_dict(R: TransitionKernel) -> dict:
    return {"n": R.n, "m": R.m, "rows": R.matrix.tolist()}


def kernel_from_dict(d: dict) -> TransitionKernel:
    return TransitionKernel(n=int(d["n"]), m=int(d["m"]), matrix=np.asarray(d["rows"], dtype=float))


def policy_to_dict(g: Policy) -> dict:
    return {"n": g.n, "m": g.m, "rows": g.matrix.tolist()}


def policy_from_dict(d: dict) -> Policy:
    g = Policy(np.asarray(d["rows"], dtype=float))
    if "n" in d and (g.n, g.m) != (int(d["n"]), int(d["m"])):
        raise ValueError("policy dimensions disagree with its rows")
    return g


def attack_matrix_to_dict(phi: AttackMatrix) -> dict:
    return {"n": phi.n, "rows": phi.matrix.tolist()}


def attack_matrix_from_dict(d: dict) -> AttackMatrix:
    return AttackMatrix(n=int(d["n"]), matrix=np.asarray(d["rows"], dtype=float))


def cost_to_dict(h: CostFunction) -> dict:
    n, m = h.matrix.shape
    return {"n": n, "m": m, "rows": h.matrix.tolist()}


def cost_from_dict(d: dict) -> CostFunction:
    return CostFunction(np.asarray(d["rows"], dtype=float))


def jsonable(obj):
    """Recursively replace non-finite floats with strings for strict JSON."""
    if isinstance(obj, dict):
        return {k: jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def save_json(obj: dict, path) -> None:
    Path(path).write_text(json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())
