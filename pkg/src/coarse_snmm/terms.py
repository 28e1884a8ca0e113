"""Named feature terms for regression designs.

A term is a product of factors separated by ``*``.  A factor is a variable
name, ``name^2`` (square) or ``sqrt(name)``.  The literal ``1`` is the
intercept.  Examples: ``"cd4"``, ``"cd4^2"``, ``"injdrug*cd4*k_minus_m_1"``.

Variables are looked up in a *context*: a mapping from name to 1-d array,
all of the same length.  The row builders in :mod:`coarse_snmm.pipeline`
provide ``cd4``/``y`` (outcome at month m), ``cd4_base`` (outcome at the
patient's first month), ``m``, ``k``, ``k_minus_m``, ``k_minus_m_1`` and
every schema covariate evaluated at month m.
"""
from __future__ import annotations

import re
from typing import Mapping, Sequence

import numpy as np

_SQRT = re.compile(r"^sqrt\((\w+)\)$")
_POW = re.compile(r"^(\w+)\^(\d+)$")

ALIASES = {"y": "cd4"}


class TermError(ValueError):
    pass


def _factor(token: str, context: Mapping[str, np.ndarray]) -> np.ndarray:
    token = token.strip()
    match = _SQRT.match(token)
    if match:
        return np.sqrt(_lookup(match.group(1), context))
    match = _POW.match(token)
    if match:
        return _lookup(match.group(1), context) ** int(match.group(2))
    return _lookup(token, context)


def _lookup(name: str, context: Mapping[str, np.ndarray]) -> np.ndarray:
    name = ALIASES.get(name, name)
    try:
        return np.asarray(context[name], dtype=float)
    except KeyError:
        raise TermError(f"unknown variable {name!r} in feature term") from None


def evaluate_term(term: str, context: Mapping[str, np.ndarray], size: int) -> np.ndarray:
    if term.strip() == "1":
        return np.ones(size)
    out = np.ones(size)
    for token in term.split("*"):
        out = out * _factor(token, context)
    return out


def design_matrix(terms: Sequence[str], context: Mapping[str, np.ndarray], size: int) -> np.ndarray:
    """Evaluate ``terms`` column by column; returns a column-major (size, len(terms)) array."""
    out = np.empty((size, len(terms)), order="F")
    for j, t in enumerate(terms):
        out[:, j] = evaluate_term(t, context, size)
    return out


def variables(terms: Sequence[str]) -> set[str]:
    """Variable names referenced by ``terms`` (aliases resolved)."""
    names = set()
    for term in terms:
        if term.strip() == "1":
            continue
        for token in term.split("*"):
            token = token.strip()
            match = _SQRT.match(token) or _POW.match(token)
            name = match.group(1) if match else token
            names.add(ALIASES.get(name, name))
    return names

