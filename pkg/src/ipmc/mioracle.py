"""Exact information measures over small discrete joint distributions.

All quantities are computed by full enumeration of the probability table
and reported in bits.  Two deliberately independent code paths exist for
mutual information: the entropy combination H(A) + H(B) - H(AB) and a
direct KL divergence between the joint and the product of marginals;
their agreement is itself a checkable identity.

Sign convention for the three-way interaction:
    I(A;B;C) = I(A;B) - I(A;B|C)
so the XOR triple comes out at exactly -1 bit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, FormatError

_MAX_CELLS = int(1e7)
_PROB_TOL = 1e-12
_NEG_CLIP = 1e-12


@dataclass(frozen=True)
class DiscreteJoint:
    names: tuple[str, ...]
    table: np.ndarray

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.float64)
        if table.ndim != len(self.names):
            raise ConfigError(
                f"table rank {table.ndim} does not match {len(self.names)} variables"
            )
        if table.size > _MAX_CELLS:
            raise DomainError(f"joint has {table.size} cells, above the {_MAX_CELLS} cap")
        if np.any(table < 0.0):
            raise DomainError("probabilities must be non-negative")
        if abs(float(table.sum()) - 1.0) > _PROB_TOL:
            raise DomainError(f"probabilities sum to {table.sum()!r}, not 1")
        object.__setattr__(self, "table", table)
        object.__setattr__(self, "names", tuple(self.names))

    def axes_of(self, variables: tuple[str, ...]) -> tuple[int, ...]:
        try:
            return tuple(self.names.index(v) for v in variables)
        except ValueError as exc:
            raise ConfigError(f"unknown variable among {variables}") from exc

    def marginal(self, variables) -> np.ndarray:
        """Marginal table over `variables`, axes in the requested order."""
        variables = _as_group(variables)
        axes = self.axes_of(variables)
        drop = tuple(i for i in range(len(self.names)) if i not in axes)
        marg = self.table.sum(axis=drop) if drop else self.table
        current = tuple(sorted(axes))
        perm = [current.index(a) for a in axes]
        return np.transpose(marg, perm) if perm != list(range(len(axes))) else marg


def _as_group(variables) -> tuple[str, ...]:
    if isinstance(variables, str):
        return (variables,)
    return tuple(variables)


def _entropy_of_table(table: np.ndarray) -> float:
    p = table.reshape(-1)
    nz = p > 0.0
    return float(-np.sum(p[nz] * np.log2(p[nz])))


def _entropy(joint: DiscreteJoint, *groups) -> float:
    variables = tuple(v for g in groups for v in _as_group(g))
    return _entropy_of_table(joint.marginal(variables))


def _clip(value: float) -> float:
    if -_NEG_CLIP < value < 0.0:
        return 0.0
    return value


def info_measure(joint: DiscreteJoint, kind: str, *variables) -> float:
    """Exact entropy (H), MI (I), conditional MI (CMI/CMI2) or interaction (INT).

    Variable arguments may be names or groups of names.  H takes any
    number of groups (joint entropy); I takes (A, B); CMI takes (A, B, C);
    CMI2 takes (A, B, C, D) and conditions on both C and D; INT takes
    (A, B, C).  All results are in bits.
    """
    if kind == "H":
        if not variables:
            raise ConfigError("H needs at least one variable")
        return _entropy(joint, *variables)
    if kind == "I":
        a, b = variables
        return _clip(_entropy(joint, a) + _entropy(joint, b) - _entropy(joint, a, b))
    if kind == "CMI":
        a, b, c = variables
        return _cmi(joint, a, b, _as_group(c))
    if kind == "CMI2":
        a, b, c, d = variables
        return _cmi(joint, a, b, _as_group(c) + _as_group(d))
    if kind == "INT":
        a, b, c = variables
        return info_measure(joint, "I", a, b) - info_measure(joint, "CMI", a, b, c)
    raise ConfigError(f"unknown measure kind {kind!r}")


def _cmi(joint: DiscreteJoint, a, b, cond: tuple[str, ...]) -> float:
    value = (
        _entropy(joint, a, cond)
        + _entropy(joint, b, cond)
        - _entropy(joint, a, b, cond)
        - _entropy(joint, cond)
    )
    return _clip(value)


def kl_identity_check(joint: DiscreteJoint, a, b) -> float:
    """|I(A;B) - D_KL(P_AB || P_A P_B)| via two independent code paths."""
    a, b = _as_group(a), _as_group(b)
    via_entropy = info_measure(joint, "I", a, b)
    p_ab = joint.marginal(a + b)
    p_a = joint.marginal(a).reshape(-1)
    p_b = joint.marginal(b).reshape(-1)
    flat = p_ab.reshape(len(p_a), len(p_b))
    product = np.outer(p_a, p_b)
    nz = flat > 0.0
    via_kl = float(np.sum(flat[nz] * np.log2(flat[nz] / product[nz])))
    return abs(via_entropy - via_kl)


def assumption1_audit(
    joint: DiscreteJoint,
    x: str,
    t: str,
    views: list[str],
    epsilons: list[float],
) -> dict:
    """Per-view residual task information I(X;T|V_i) against its bound.

    Also reports I(X;T | all views) to exhibit how jointly conditioning on
    every view shrinks the residual.
    """
    if len(views) != len(epsilons):
        raise ConfigError("need one epsilon per view")
    per_view = []
    for v, eps in zip(views, epsilons):
        value = info_measure(joint, "CMI", x, t, v)
        per_view.append(
            {"view": v, "residual": value, "epsilon": eps, "passes": value <= eps}
        )
    return {
        "per_view": per_view,
        "residual_all_views": info_measure(joint, "CMI", x, t, tuple(views)),
    }


def definition1_report(joint: DiscreteJoint, y="Y", x="X", v1="V1", v2="V2") -> dict:
    """The four target quantities plus the entropy-decomposition terms."""
    terms = {
        "i_y_x_given_v1v2": info_measure(joint, "CMI2", y, x, v1, v2),
        "i_y_v1_given_xv2": info_measure(joint, "CMI2", y, v1, x, v2),
        "i_y_v2_given_xv1": info_measure(joint, "CMI2", y, v2, x, v1),
        "interaction_y_v1_v2": info_measure(joint, "INT", y, v1, v2),
    }
    shared = info_measure(joint, "INT", x, v1, v2)
    terms["h_y"] = info_measure(joint, "H", y)
    terms["i_x_v1_v2"] = shared
    terms["decomposition_sum"] = (
        shared
        + terms["i_y_x_given_v1v2"]
        + terms["i_y_v1_given_xv2"]
        + terms["i_y_v2_given_xv1"]
    )
    return terms


def read_joint_csv(path) -> DiscreteJoint:
    """Load a joint from CSV: one column per variable plus a final `p` column.

    Symbol columns may hold arbitrary strings; alphabets are the sorted
    unique symbols.  Duplicate assignments accumulate.  The probabilities
    must sum to 1 within 1e-6 and are renormalized exactly.
    """
    with open(path, "r", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip().lower() != "p":
            raise FormatError("joint CSV needs variable columns and a trailing 'p' column")
        names = tuple(h.strip() for h in header[:-1])
        if not names:
            raise FormatError("joint CSV has no variable columns")
        rows = []
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise FormatError(f"row {line!r} does not match the header")
            try:
                prob = float(line[-1])
            except ValueError as exc:
                raise FormatError(f"bad probability {line[-1]!r}") from exc
            rows.append((tuple(s.strip() for s in line[:-1]), prob))
    if not rows:
        raise FormatError("joint CSV has no probability rows")
    alphabets = [sorted({r[0][i] for r in rows}) for i in range(len(names))]
    table = np.zeros([len(a) for a in alphabets])
    index = [{s: k for k, s in enumerate(a)} for a in alphabets]
    for symbols, prob in rows:
        table[tuple(index[i][s] for i, s in enumerate(symbols))] += prob
    total = float(table.sum())
    if abs(total - 1.0) > 1e-6:
        raise FormatError(f"probabilities sum to {total}, expected 1")
    return DiscreteJoint(names, table / total)
