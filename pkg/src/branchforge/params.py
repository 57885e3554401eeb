"""Run parameters: exponent hierarchy, gates, and derived quantities.

The construction is governed by a small ladder of exponents. Everything
downstream assumes the relations checked in validate(); runs refuse to start
otherwise. The two derived exponents are

    holder_kappa = beta2 / 4        third-derivative Hoelder exponent
    graph_decay  = b + gamma0       decay rate of (generator - manifold)

and the two refinement gates at a square of half-side ell and annulus scale d:

    excess gate   excess_gate * m0      * d^(2*gamma0 - 2 + 2*delta1) * ell^(2 - 2*delta1)
    height gate   height_gate * m0^(1/4) * d^(gamma0/2 - beta2)        * ell^(1 + beta2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from .errors import ConfigViolation


@dataclass(frozen=True)
class Params:
    # branching order of the domain, sheet multiplicity, codimension
    qbar: int = 2
    q: int = 1
    n: int = 2
    # separation / horn exponents of the admissible branching, 1 < b < a
    b: float = 2.5
    a: float = 3.0
    # regularity exponent of the branching (C^{3,alpha_bar} away from 0)
    alpha_bar: float = 0.2
    # decay exponent of the input smallness assumption
    gamma: float = 0.2
    # working exponent ladder
    gamma0: float = 0.04
    beta0: float = 0.25
    beta2: float = 0.002
    delta1: float = 0.0002
    # ball scale (r_L = sqrt(2) * ball_scale * ell) and first refined depth
    ball_scale: float = 4.0
    start_depth: int = 13
    # gate constants for the excess / height stopping conditions
    excess_gate: float = 1.0
    height_gate: float = 1.0

    @property
    def holder_kappa(self) -> float:
        return self.beta2 / 4.0

    @property
    def graph_decay(self) -> float:
        return self.b + self.gamma0

    @property
    def ambient_dim(self) -> int:
        return 2 + self.n

    def ball_radius(self, ell: float) -> float:
        """r_L for a square of half-side ell."""
        return math.sqrt(2.0) * self.ball_scale * ell

    def excess_threshold(self, m0: float, d: float, ell: float) -> float:
        return (self.excess_gate * m0
                * d ** (2 * self.gamma0 - 2 + 2 * self.delta1)
                * ell ** (2 - 2 * self.delta1))

    def height_threshold(self, m0: float, d: float, ell: float) -> float:
        return (self.height_gate * m0 ** 0.25
                * d ** (self.gamma0 / 2 - self.beta2)
                * ell ** (1 + self.beta2))


# Relation names are stable identifiers: the CLI reports them on exit code 2
# and the tests key on them.
def validate(p: Params) -> list[str]:
    """Return the list of violated relation names (empty iff admissible)."""
    bad = []

    if not (isinstance(p.qbar, int) and p.qbar >= 2):
        bad.append("branch-order")
    if not (isinstance(p.q, int) and p.q >= 1):
        bad.append("sheet-count")
    if not (isinstance(p.n, int) and p.n >= 2):
        bad.append("codimension")
    if not (1.0 < p.b < p.a):
        bad.append("horn-ordering")
    if not (0.0 < p.alpha_bar < 1.0):
        bad.append("regularity-range")
    if not (0.0 < p.gamma < 1.0):
        bad.append("decay-range")

    # gamma0 sits under five ceilings at once
    if bad:
        return bad  # later relations would divide by junk
    gamma0_cap = min(p.gamma, p.alpha_bar, p.a - p.b,
                     p.b - (1 + p.b) / 2, math.log2(6 / 5))
    if not (0.0 < p.gamma0 < gamma0_cap):
        bad.append("gamma0-window")

    beta2_cap = min(p.gamma0 / 4, p.a / p.b - 1, p.alpha_bar / 2,
                    p.beta0 * p.gamma0 / 2)
    if not (0.0 < p.beta2 < beta2_cap):
        bad.append("beta2-window")
    if not (p.b > (1 + p.b) / 2 * (1 + p.beta2)):
        bad.append("separation-growth")
    if not (p.delta1 > 0 and p.beta2 - 2 * p.delta1 >= p.beta2 / 3):
        bad.append("threshold-slack")
    if not (p.beta0 * (2 - 2 * p.delta1) - 2 * p.delta1 >= 2 * p.beta2):
        bad.append("lipschitz-slack")
    if not (0.0 < p.beta0 < 1.0):
        bad.append("beta0-range")
    if not (p.ball_scale >= 4.0):
        bad.append("ball-scale-floor")
    if not (isinstance(p.start_depth, int)
            and math.sqrt(2.0) * p.ball_scale * 2.0 ** (10 - p.start_depth) <= 1.0):
        bad.append("ball-depth")
    if not (p.alpha_bar < 1.0 / (2 * p.qbar)):
        bad.append("chart-regularity")
    if not (p.excess_gate > 0 and p.height_gate > 0):
        bad.append("gate-positivity")
    return bad


def require_valid(p: Params) -> Params:
    bad = validate(p)
    if bad:
        raise ConfigViolation("parameter relations violated: " + ", ".join(bad))
    return p


def from_dict(d: dict) -> Params:
    """Build Params from a plain dict, rejecting unknown keys."""
    known = {f.name for f in fields(Params)}
    unknown = set(d) - known
    if unknown:
        raise ConfigViolation("unknown parameter keys: " + ", ".join(sorted(unknown)))
    clean = {}
    for k, v in d.items():
        if k in ("qbar", "q", "n", "start_depth"):
            if not float(v).is_integer():
                raise ConfigViolation(f"parameter {k} must be an integer")
            clean[k] = int(v)
        else:
            clean[k] = float(v)
    return Params(**clean)
