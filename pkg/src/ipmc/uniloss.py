"""Instance tier: the unified pair-loss family over similarity sets.

Five forms share one skeleton, a double sum over (positive pair,
negative pair) exponents wrapped in log(1 + .)/gamma:

  hinge               max-margin cut-off at zero (the gamma -> inf limit)
  softened            log-sum-exp smoothing with margin
  leveraged           per-similarity weights alpha emphasizing pairs far
                      from their optimum, with interval factors
  unified             the closed form whose decision boundary is the
                      circle (s_pos - 1)^2 + s_neg^2 = 2 delta^2
  unified-attenuated  leveraged form with alpha replaced by
                      [alpha^tau_dec / phi_dec + 1]_+ on both branches

Because the exponent separates into a positive-side and a negative-side
term, the double sum factorizes: the loss is softplus(logsumexp of
negative logits + logsumexp of positive logits) / gamma.  Empty sets
contribute nothing inside the log, so the loss of an empty side is 0.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import diffmath as dm
from .errors import ConfigError, DomainError

log = logging.getLogger(__name__)

MODES = ("hinge", "softened", "leveraged", "unified", "unified-attenuated")

_SIM_TOL = 1e-9


@dataclass(frozen=True)
class LossConfig:
    """Hyper-parameters of the pair loss; margin is the hinge/softened lambda."""

    gamma: float = 32.0
    delta: float = 0.35
    margin: float = 0.25
    phi_dec: float = 6.0
    tau_dec: float = 1.0
    mode: str = "unified"
    scale: float = 1.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ConfigError("gamma must be positive")
        if not (0.0 < self.delta < 0.5):
            raise ConfigError("delta must lie in (0, 0.5)")
        if self.phi_dec <= 0 or self.tau_dec <= 0:
            raise ConfigError("phi_dec and tau_dec must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.scale <= 0:
            raise ConfigError("scale must be positive")

    # derived optimums and targets, never stored independently
    @property
    def o_pos(self) -> float:
        return 1.0 + self.delta

    @property
    def o_neg(self) -> float:
        return -self.delta

    @property
    def delta_pos(self) -> float:
        return 1.0 - self.delta

    @property
    def delta_neg(self) -> float:
        return self.delta


def _validate_unit_range(values: np.ndarray, name: str) -> np.ndarray:
    if values.size and (
        np.any(values < -_SIM_TOL) or np.any(values > 1.0 + _SIM_TOL)
    ):
        raise DomainError(f"{name} similarities outside [0, 1]")
    return np.clip(values, 0.0, 1.0)


def _as_array(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).reshape(-1)


def hinge_loss(s_pos, s_neg, margin: float) -> float:
    """Worst-pair margin violation, cut off at zero."""
    s_pos, s_neg = _as_array(s_pos), _as_array(s_neg)
    if s_pos.size == 0 or s_neg.size == 0:
        log.warning("hinge_loss over an empty similarity set; returning 0")
        return 0.0
    return float(max(0.0, np.max(s_neg) - np.min(s_pos) + margin))


def _power(a: dm.Node, exponent: float) -> dm.Node:
    if exponent == 1.0:
        return a
    return dm.exp(dm.mul(dm.constant(exponent), dm.log(a)))


def _logit_nodes(s_pos: dm.Node, s_neg: dm.Node, cfg: LossConfig):
    """Per-mode positive/negative logit vectors (already scaled by gamma)."""
    g = cfg.gamma
    if cfg.mode == "softened":
        return dm.mul(dm.constant(-g), s_pos), dm.mul(
            dm.constant(g), s_neg + cfg.margin
        )
    if cfg.mode == "unified":
        lp = dm.mul(dm.constant(g), dm.square(s_pos - 1.0) - cfg.delta**2)
        ln = dm.mul(dm.constant(g), dm.square(s_neg) - cfg.delta**2)
        return lp, ln
    alpha_p = dm.relu(dm.constant(cfg.o_pos) - s_pos)
    alpha_n = dm.relu(s_neg - cfg.o_neg)
    if cfg.mode == "unified-attenuated":
        alpha_p = dm.relu(_power(alpha_p, cfg.tau_dec) / cfg.phi_dec + 1.0)
        alpha_n = dm.relu(_power(alpha_n, cfg.tau_dec) / cfg.phi_dec + 1.0)
    lp = dm.mul(dm.constant(-g), dm.mul(alpha_p, s_pos - cfg.delta_pos))
    ln = dm.mul(dm.constant(g), dm.mul(alpha_n, s_neg - cfg.delta_neg))
    return lp, ln


def pair_loss_node(s_pos: dm.Node, s_neg: dm.Node, cfg: LossConfig) -> dm.Node:
    """Differentiable loss over similarity vectors (empty side => constant 0)."""
    if s_pos.value.size == 0 or s_neg.value.size == 0:
        return dm.constant(0.0)
    if cfg.mode == "hinge":
        # true subgradient: only the extremal pair carries gradient
        i = int(np.argmin(s_pos.value))
        j = int(np.argmax(s_neg.value))
        worst = dm.gather_rows(s_neg, [j]) - dm.gather_rows(s_pos, [i]) + cfg.margin
        return dm.mul(dm.constant(cfg.scale), dm.reduce_sum(dm.relu(worst)))
    lp, ln = _logit_nodes(s_pos, s_neg, cfg)
    core = dm.softplus(dm.logsumexp(lp) + dm.logsumexp(ln))
    return dm.mul(dm.constant(cfg.scale / cfg.gamma), core)


def softened_loss(s_pos, s_neg, margin: float, gamma: float) -> float:
    """log(1 + sum exp(gamma (s_neg - s_pos + margin))) / gamma."""
    s_pos, s_neg = _as_array(s_pos), _as_array(s_neg)
    if s_pos.size == 0 or s_neg.size == 0:
        return 0.0
    cfg = LossConfig(gamma=gamma, margin=margin, mode="softened")
    return float(
        pair_loss_node(dm.constant(s_pos), dm.constant(s_neg), cfg).value
    )


def unified_loss(s_pos, s_neg, cfg: LossConfig) -> float:
    """Evaluate the configured loss mode over similarity sets in [0, 1]."""
    s_pos = _validate_unit_range(_as_array(s_pos), "positive")
    s_neg = _validate_unit_range(_as_array(s_neg), "negative")
    if cfg.mode == "hinge":
        return cfg.scale * hinge_loss(s_pos, s_neg, cfg.margin)
    return float(pair_loss_node(dm.constant(s_pos), dm.constant(s_neg), cfg).value)


def algebraic_equivalence_check(s_pos, s_neg, delta: float, gamma: float) -> float:
    """|leveraged - unified| on the same sets; exact algebra up to rounding."""
    lev = unified_loss(s_pos, s_neg, LossConfig(gamma=gamma, delta=delta, mode="leveraged"))
    uni = unified_loss(s_pos, s_neg, LossConfig(gamma=gamma, delta=delta, mode="unified"))
    return abs(lev - uni)
