"""Polynomial observable dictionaries.

A dictionary maps a state x in R^n to the vector of its monomials
Psi(x) in R^N. The first n entries are always the coordinate functions
x_1, ..., x_n themselves, so the state can be read back from a lifted
vector by truncation. Remaining terms follow in graded-lexicographic
order; an optional constant term, when enabled, sits last so it never
disturbs the identity prefix.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

MultiIndex = tuple[int, ...]


def _unit_index(n: int, i: int) -> MultiIndex:
    e = [0] * n
    e[i] = 1
    return tuple(e)


@dataclass(frozen=True)
class PolynomialDictionary:
    """Ordered monomial basis over R^n.

    Parameters
    ----------
    n : state dimension.
    terms : exponent tuples, one per dictionary entry. The first n must be
        the unit indices e_1..e_n; a zero tuple (constant) may only appear
        as the very last term and only with include_constant set.
    max_degree : largest total degree among the terms.
    include_constant : whether the trailing constant term is present.
    """

    n: int
    terms: tuple[MultiIndex, ...]
    max_degree: int
    include_constant: bool = False

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"state dimension must be >= 1, got {self.n}")
        if len(self.terms) < self.n:
            raise ValueError("dictionary must contain at least the n unit terms")
        for i in range(self.n):
            if self.terms[i] != _unit_index(self.n, i):
                raise ValueError(
                    f"terms[{i}] = {self.terms[i]} breaks the identity prefix; "
                    f"expected {_unit_index(self.n, i)}"
                )
        seen = set()
        for k, e in enumerate(self.terms):
            if len(e) != self.n:
                raise ValueError(f"terms[{k}] has {len(e)} exponents, expected {self.n}")
            if any(p < 0 for p in e):
                raise ValueError(f"terms[{k}] = {e} has a negative exponent")
            if sum(e) == 0 and not (self.include_constant and k == len(self.terms) - 1):
                raise ValueError("constant term only allowed last, with include_constant")
            if e in seen:
                raise ValueError(f"duplicate term {e}")
            seen.add(e)

    @property
    def size(self) -> int:
        return len(self.terms)

    @cached_property
    def _exponents(self) -> np.ndarray:
        return np.array(self.terms, dtype=np.int64)


def build_dictionary(
    n: int, max_degree: int, include_constant: bool = False
) -> PolynomialDictionary:
    """All monomials of total degree 1..max_degree over R^n.

    Terms are ordered by total degree, lexicographically within a degree
    (x1^d first), so the degree-1 block is exactly the identity prefix.
    The constant term, if requested, is appended last. Without it the size
    is C(n + max_degree, max_degree) - 1.
    """
    if n < 1:
        raise ValueError(f"state dimension must be >= 1, got {n}")
    if max_degree < 1:
        raise ValueError(f"max_degree must be >= 1, got {max_degree}")
    terms: list[MultiIndex] = []
    for degree in range(1, max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(n), degree):
            e = [0] * n
            for i in combo:
                e[i] += 1
            terms.append(tuple(e))
    if include_constant:
        terms.append(tuple([0] * n))
    return PolynomialDictionary(
        n=n, terms=tuple(terms), max_degree=max_degree, include_constant=include_constant
    )


def dictionary_from_terms(
    n: int, terms: list[MultiIndex] | tuple[MultiIndex, ...]
) -> PolynomialDictionary:
    """Dictionary with an explicit term list (identity prefix still required)."""
    terms = tuple(tuple(int(p) for p in e) for e in terms)
    include_constant = bool(terms) and sum(terms[-1]) == 0
    max_degree = max(sum(e) for e in terms)
    return PolynomialDictionary(
        n=n, terms=terms, max_degree=max_degree, include_constant=include_constant
    )


def expected_size(n: int, max_degree: int, include_constant: bool = False) -> int:
    """C(n + d, d) - 1 monomials of degree 1..d, plus the optional constant."""
    total = math.comb(n + max_degree, max_degree) - 1
    return total + (1 if include_constant else 0)


def lift(dictionary: PolynomialDictionary, x: np.ndarray) -> np.ndarray:
    """Evaluate Psi(x) in R^N. The first n entries equal x exactly."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dictionary.n,):
        raise ValueError(f"state shape {x.shape} does not match n={dictionary.n}")
    # prod over x_i ** e_i; exponent 0 contributes an exact 1.0 factor and
    # exponent 1 an exact x_i, so the identity prefix is bitwise.
    return np.prod(x[np.newaxis, :] ** dictionary._exponents, axis=1)


def lift_matrix(dictionary: PolynomialDictionary, states: np.ndarray) -> np.ndarray:
    """Column-stack Psi over many states: (count, n) -> (N, count)."""
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != dictionary.n:
        raise ValueError(
            f"states shape {states.shape} does not match (count, {dictionary.n})"
        )
    # (count, N, n) -> prod over the exponent axis, then transpose.
    powers = states[:, np.newaxis, :] ** dictionary._exponents[np.newaxis, :, :]
    return np.prod(powers, axis=2).T


def reconstruct(lifted: np.ndarray, n: int) -> np.ndarray:
    """Read the state back off the identity prefix of a lifted vector."""
    lifted = np.asarray(lifted)
    if lifted.shape[0] < n:
        raise ValueError(f"lifted vector of length {lifted.shape[0]} cannot hold n={n}")
    return lifted[:n]


def dictionary_to_dict(dictionary: PolynomialDictionary) -> dict:
    return {
        "n": dictionary.n,
        "max_degree": dictionary.max_degree,
        "include_constant": dictionary.include_constant,
        "terms": [list(e) for e in dictionary.terms],
    }


def dictionary_from_dict(payload: dict) -> PolynomialDictionary:
    return PolynomialDictionary(
        n=int(payload["n"]),
        terms=tuple(tuple(int(p) for p in e) for e in payload["terms"]),
        max_degree=int(payload["max_degree"]),
        include_constant=bool(payload["include_constant"]),
    )


def save_dictionary(path: str, dictionary: PolynomialDictionary) -> None:
    with open(path, "w") as fh:
        json.dump(dictionary_to_dict(dictionary), fh, indent=2)


def load_dictionary(path: str) -> PolynomialDictionary:
    with open(path) as fh:
        return dictionary_from_dict(json.load(fh))
