"""Principal-branch Lambert W and radius-bandwidth matching."""

import math
from dataclasses import dataclass

INV_E = math.exp(-1.0)
_MAX_ITER = 50


def lambert_w0(z: float) -> float:
    """Principal branch W0: the w >= -1 solving w * exp(w) = z, for z >= -1/e.

    Halley iteration from a branch-aware starting point.
    """
    z = float(z)
    if math.isnan(z):
        raise ValueError("lambert_w0 of NaN")
    if z < -INV_E:
        # allow the rounding of -1/e itself
        if z < -INV_E * (1.0 + 4e-16):
            raise ValueError(f"lambert_w0 is real only for z >= -1/e, got {z}")
        return -1.0
    if z == 0.0:
        return 0.0
    if math.isinf(z):
        return math.inf

    if z < -0.25:
        # series about the branch point in p = sqrt(2 (e z + 1))
        p = math.sqrt(max(2.0 * (math.e * z + 1.0), 0.0))
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    elif z < 3.0:
        w = math.log1p(z) * (1.0 - math.log1p(math.log1p(z)) / (2.0 + math.log1p(z)))
    else:
        lz = math.log(z)
        w = lz - math.log(lz)

    tol = 1e-14 * max(1.0, abs(z))
    for _ in range(_MAX_ITER):
        if w <= -1.0:
            w = -1.0 + 1e-15
        ew = math.exp(w)
        f = w * ew - z
        if abs(f) <= tol:
            break
        wp1 = w + 1.0
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w -= step
        if abs(step) <= 4e-16 * (1.0 + abs(w)):
            break
    return max(w, -1.0)


@dataclass(frozen=True)
class MatchingProblem:
    """Match the shield force alpha (r - d) to the Gaussian MMD force at d = d0."""

    alpha: float
    lambda_g: float
    r: float
    d0: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.lambda_g > 0 and self.r > 0):
            raise ValueError("alpha, lambda_g and r must be positive")
        if not 0.0 < self.d0 < self.r:
            raise ValueError(f"d0 must lie in (0, r) = (0, {self.r}), got {self.d0}")

    @property
    def argument(self) -> float:
        """alpha (r - d0) d0 / (4 lambda_g); feasible iff <= 1/e."""
        return self.alpha * (self.r - self.d0) * self.d0 / (4.0 * self.lambda_g)

    @property
    def feasible(self) -> bool:
        return self.argument <= INV_E


def match_bandwidth(p: MatchingProblem) -> float:
    """Bandwidth sigma at which both force magnitudes coincide at d0.

    sigma^2 = d0^2 / (-2 W0(-alpha (r - d0) d0 / (4 lambda_g))).
    """
    a = p.argument
    if a > INV_E:
        raise ValueError(
            f"infeasible matching: alpha (r - d0) d0 / (4 lambda_g) = {a:.6g} > 1/e"
        )
    s = -lambert_w0(-a)
    return p.d0 / math.sqrt(2.0 * s)


def spell_magnitude(alpha: float, r: float, d: float) -> float:
    return alpha * max(r - d, 0.0)


def gaussian_force_magnitude(lambda_g: float, sigma: float, d: float) -> float:
    """|lambda * grad| of the one-to-one MMD energy at distance d."""
    return lambda_g * 2.0 * d / sigma ** 2 * math.exp(-d * d / (2.0 * sigma ** 2))


def matching_residual(p: MatchingProblem, sigma: float) -> float:
    """Relative gap in alpha (r - d0) = lambda (2 d0 / sigma^2) exp(-d0^2 / (2 sigma^2)).

    Written as (r - d0) sigma^2 exp(d0^2 / (2 sigma^2)) = 2 lambda d0 / alpha.
    """
    lhs = (p.r - p.d0) * sigma ** 2 * math.exp(p.d0 ** 2 / (2.0 * sigma ** 2))
    rhs = 2.0 * p.lambda_g * p.d0 / p.alpha
    return abs(lhs - rhs) / abs(rhs)


def display_residual(p: MatchingProblem, sigma: float) -> float:
    """Same gap against the variant with 2 lambda / (alpha d0) on the right.

    That variant differs from the force balance by a factor d0^2, so at a
    matched sigma this equals |d0^2 - 1|.
    """
    lhs = (p.r - p.d0) * sigma ** 2 * math.exp(p.d0 ** 2 / (2.0 * sigma ** 2))
    rhs = 2.0 * p.lambda_g / (p.alpha * p.d0)
    return abs(lhs - rhs) / abs(rhs)


def positive_argument_sigma(r: float, d0: float) -> float:
    """sigma = d0 / (2 W0((r - d0) d0 / 4)), the alternate alpha = lambda = 1 form."""
    return d0 / (2.0 * lambert_w0((r - d0) * d0 / 4.0))
