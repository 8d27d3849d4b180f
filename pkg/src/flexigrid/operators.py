"""Lower and upper transition rate operators given by extremal generators.

A lower operator is stored as the list of its extremal matrices; applying it
to a function ``f`` is one stacked sparse product followed by a row-wise
minimum.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .exceptions import DimensionMismatch, StepTooLarge


class LowerOperator:
    """Lower transition rate operator of a set of generators.

    Parameters
    ----------
    family : sequence of Generator
        Extremal members over one common state space.  A single member gives
        an ordinary (precise) chain.

    Attributes
    ----------
    norm : float
        Operator norm, see :func:`operator_norm`.
    """

    def __init__(self, family, tag=None):
        family = list(family)
        if not family:
            raise ValueError("a lower operator needs at least one generator")
        space = family[0].space
        n = family[0].n
        for g in family[1:]:
            if g.space is not space and len(g.space) != n:
                raise DimensionMismatch("family members live on different state spaces")
            if g.n != n:
                raise DimensionMismatch("family members have different sizes")
        self.family = tuple(family)
        self.space = space
        self.n = n
        self.tag = tag or "+".join(g.tag for g in family)
        self._stacked = sp.vstack([g.matrix for g in family], format="csr")
        self._min_diagonal = np.min([g.diagonal() for g in family], axis=0)
        self.norm = operator_norm(self)

    @property
    def is_precise(self) -> bool:
        return len(self.family) == 1

    def __len__(self):
        return len(self.family)

    def __repr__(self):
        return f"LowerOperator({self.tag!r}, members={len(self.family)}, n={self.n})"

    def _check(self, f):
        f = np.asarray(f, dtype=float)
        if f.shape != (self.n,):
            raise DimensionMismatch(f"expected a vector of length {self.n}, got shape {f.shape}")
        return f

    def apply_lower(self, f):
        """Componentwise minimum of ``Q f`` over the family."""
        f = self._check(f)
        if self.is_precise:
            return self.family[0].matrix @ f
        return (self._stacked @ f).reshape(len(self.family), self.n).min(axis=0)

    def apply_upper(self, f):
        """Conjugate upper operator, ``-apply_lower(-f)``."""
        return -self.apply_lower(-self._check(f))

    def upper_rates(self):
        """Sparse matrix of the largest rate of every transition over the family."""
        out = self.family[0].matrix.copy()
        for g in self.family[1:]:
            out = out.maximum(g.matrix)
        return out


def apply_lower(op, f):
    return op.apply_lower(f)


def apply_upper(op, f):
    return op.apply_upper(f)


def operator_norm(op) -> float:
    """Norm of a lower transition rate operator.

    This is ``2 * max_x |[Q_lower 1_x](x)|``, i.e. twice the largest exit rate
    over the family.  The factor 2 makes ``I + delta * Q_lower`` a lower
    transition operator exactly when ``delta <= 2 / norm``, which is the step
    range the iterative solvers accept.
    """
    return 2.0 * float(np.max(np.abs(op._min_diagonal))) if op.n else 0.0


def transient_lower_expectation(op, f, horizon, steps):
    """Approximate the lower expectation of `f` after `horizon` time units.

    Returns ``(I + (horizon / steps) Q_lower)^steps f``.

    Raises
    ------
    StepTooLarge
        If ``horizon / steps >= 2 / norm``.
    """
    if horizon < 0:
        raise ValueError("horizon must be non-negative")
    if steps < 1:
        raise ValueError("steps must be at least 1")
    g = op._check(f).copy()
    if horizon == 0:
        return g
    h = horizon / steps
    if op.norm > 0 and h >= 2.0 / op.norm:
        raise StepTooLarge(f"step {h} is not below 2/norm = {2.0 / op.norm}")
    for _ in range(steps):
        g = g + h * op.apply_lower(g)
    return g
