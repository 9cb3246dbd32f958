"""Concave reward families, experiment instance generators, and the noisy gradient oracle.

Every reward function lives on [0, 1], is concave, non-decreasing, and worth 0
at 0 (diminishing returns).  Families carry closed-form values and gradients
plus regularity metadata: a Lipschitz bound on the gradient, a smoothness bound
when available, and the sharpness exponent ``beta`` of the family when it is
known.  Metadata is never estimated from data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "RewardModelError",
    "DomainError",
    "SimplexError",
    "RewardFunction",
    "NoiseModel",
    "InstanceSpec",
    "make_linear",
    "make_quadratic",
    "make_c_alpha",
    "make_zero_pad",
    "make_custom",
    "make_experiment_pair_beta2",
    "make_calpha_profile_pair",
    "make_lower_bound_instance",
    "make_instance",
    "noisy_gradient",
    "pair_value",
    "pair_grad",
    "make_appendix_beta2_instance",
    "make_calpha_experiment_instance",
    "make_linear_gap_instance",
    "make_quadratic_k4_instance",
    "make_lower_bound_pair_instance",
]


class RewardModelError(ValueError):
    """Invalid family parameter or malformed instance."""


class DomainError(RewardModelError):
    """Evaluation point outside [0, 1]."""


class SimplexError(RewardModelError):
    """Allocation vector is not on the probability simplex."""


_DOMAIN_SLACK = 1e-12
_SIMPLEX_TOL = 1e-9


def _check_domain(x):
    arr = np.asarray(x, dtype=float)
    if np.any(arr < -_DOMAIN_SLACK) or np.any(arr > 1.0 + _DOMAIN_SLACK):
        raise DomainError("evaluation point outside [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def _match(x, out):
    """Return a float for scalar input, an ndarray otherwise."""
    if np.ndim(x) == 0:
        return float(out)
    return np.asarray(out, dtype=float)


@dataclass(frozen=True)
class RewardFunction:
    """One resource's reward: concave, non-decreasing, f(0) = 0 on [0, 1].

    ``lipschitz_L`` bounds \\|f'\\| on [0, 1].  ``known_beta``/``known_c`` record
    the sharpness exponent and constant when the family implies them.
    Instances are immutable and safe to share across threads.
    """

    family: str
    params: tuple
    lipschitz_L: float
    smooth_Lprime: float | None = None
    known_beta: float | None = None
    known_c: float | None = None
    _value: Callable = field(repr=False, compare=False, default=None)
    _grad: Callable = field(repr=False, compare=False, default=None)

    def eval(self, x):
        """Value f(x) for x in [0, 1] (scalar or array)."""
        arr = _check_domain(x)
        return _match(x, self._value(arr))

    def grad(self, x):
        """Gradient f'(x) >= 0 for x in [0, 1] (scalar or array)."""
        arr = _check_domain(x)
        return _match(x, self._grad(arr))


def make_linear(slope: float) -> RewardFunction:
    """Linear resource f(x) = slope * x with slope >= 0."""
    if not slope >= 0.0:
        raise RewardModelError("linear slope must be >= 0")
    s = float(slope)
    return RewardFunction(
        family="linear",
        params=(s,),
        lipschitz_L=s,
        smooth_Lprime=0.0,
        known_beta=math.inf,
        _value=lambda x: s * x,
        _grad=lambda x: np.full_like(x, s),
    )


def make_quadratic(a: float, b: float) -> RewardFunction:
    """Concave quadratic f(x) = -a x^2 + b x with b >= 2a >= 0.

    The constraint keeps f non-decreasing on [0, 1].  Strictly concave
    members (a > 0) have sharpness exponent 2.
    """
    if not (a >= 0.0 and b >= 2.0 * a):
        raise RewardModelError("quadratic requires b >= 2a >= 0")
    a = float(a)
    b = float(b)
    return RewardFunction(
        family="quadratic",
        params=(a, b),
        lipschitz_L=b,
        smooth_Lprime=2.0 * a,
        known_beta=2.0 if a > 0 else math.inf,
        known_c=1.0 / (4.0 * a) if a > 0 else None,
        _value=lambda x: (-a * x + b) * x,
        _grad=lambda x: -2.0 * a * x + b,
    )


def make_c_alpha(theta: float, gamma: float, alpha: float) -> RewardFunction:
    """Member of the shifted-power class f(x) = theta (gamma - x)^alpha - theta gamma^alpha.

    Requires theta <= 0, gamma >= 1, alpha > 1; the sharpness exponent of the
    class is alpha / (alpha - 1).
    """
    if not theta <= 0.0:
        raise RewardModelError("c_alpha requires theta <= 0")
    if not gamma >= 1.0:
        raise RewardModelError("c_alpha requires gamma >= 1")
    if not alpha > 1.0:
        raise RewardModelError("c_alpha requires alpha > 1")
    theta = float(theta)
    gamma = float(gamma)
    alpha = float(alpha)
    amp = -theta  # >= 0
    if alpha >= 2.0 or gamma > 1.0:
        lprime = amp * alpha * (alpha - 1.0) * max(gamma, gamma - 1.0) ** (alpha - 2.0)
    else:
        lprime = None  # curvature unbounded at x = 1 when gamma = 1 and alpha < 2
    return RewardFunction(
        family="c_alpha",
        params=(theta, gamma, alpha),
        lipschitz_L=amp * alpha * gamma ** (alpha - 1.0),
        smooth_Lprime=lprime,
        known_beta=alpha / (alpha - 1.0),
        _value=lambda x: theta * (gamma - x) ** alpha - theta * gamma**alpha,
        _grad=lambda x: amp * alpha * (gamma - x) ** (alpha - 1.0),
    )


def make_zero_pad() -> RewardFunction:
    """Constant-zero resource used to pad a resource set to a power of two."""
    return RewardFunction(
        family="zero-pad",
        params=(),
        lipschitz_L=0.0,
        smooth_Lprime=0.0,
        _value=lambda x: np.zeros_like(x),
        _grad=lambda x: np.zeros_like(x),
    )


_CUSTOM_GRID = np.linspace(0.0, 1.0, 257)


def make_custom(
    value_fn: Callable,
    grad_fn: Callable,
    lipschitz_L: float,
    smooth_Lprime: float | None = None,
    known_beta: float | None = None,
    known_c: float | None = None,
    params: tuple = (),
) -> RewardFunction:
    """Wrap closures as a reward function, validating the shape on a grid.

    The closures must be vectorized over numpy arrays.  Validation is eager:
    value 0 at 0, non-decreasing, concave (non-increasing gradient), and the
    gradient bound are all checked at construction time.
    """
    f = RewardFunction(
        family="custom",
        params=params,
        lipschitz_L=float(lipschitz_L),
        smooth_Lprime=smooth_Lprime,
        known_beta=known_beta,
        known_c=known_c,
        _value=value_fn,
        _grad=grad_fn,
    )
    vals = f.eval(_CUSTOM_GRID)
    grads = f.grad(_CUSTOM_GRID)
    if abs(vals[0]) > _DOMAIN_SLACK:
        raise RewardModelError("custom reward must satisfy f(0) = 0")
    if np.any(np.diff(vals) < -_DOMAIN_SLACK):
        raise RewardModelError("custom reward must be non-decreasing")
    if np.any(np.diff(grads) > 1e-9):
        raise RewardModelError("custom reward must be concave")
    if np.any(np.abs(grads) > lipschitz_L + 1e-9):
        raise RewardModelError("custom reward gradient exceeds lipschitz_L")
    return f


def make_experiment_pair_beta2() -> tuple[RewardFunction, RewardFunction]:
    """The cubic pair whose split profile f1(x) + f2(1-x) peaks at 0.4 like -(x-0.4)^2.

    Both members are shifted cubics normalized to 0 at 0; the pair-level
    sharpness exponent is exactly 2 with constant 1/4.
    """
    f1 = make_c_alpha(-5.0 / 48.0, 2.0, 3.0)
    f2 = make_c_alpha(-5.0 / 48.0, 11.0 / 5.0, 3.0)
    # the pair profile is quadratic around its peak, so exponent 2 overrides
    # the generic alpha/(alpha-1) tag of the cubic family
    f1 = replace(f1, known_beta=2.0, known_c=0.25)
    f2 = replace(f2, known_beta=2.0, known_c=0.25)
    return f1, f2


def make_calpha_profile_pair(
    alpha: float = 3.0, xstar: float = 0.4, scale: float = 3.0
) -> tuple[RewardFunction, RewardFunction]:
    """Piecewise power pair whose split profile equals -scale * |x - xstar|^alpha.

    Each member rises as a power of distance to its own saturation point and
    is flat beyond it, which keeps both concave and C^1 while the pair profile
    has a peak of order alpha at xstar (sharpness exponent alpha/(alpha-1)).
    """
    if not alpha > 1.0:
        raise RewardModelError("profile pair requires alpha > 1")
    if not 0.0 < xstar < 1.0:
        raise RewardModelError("profile pair requires 0 < xstar < 1")
    if not scale > 0.0:
        raise RewardModelError("profile pair requires scale > 0")
    alpha = float(alpha)
    scale = float(scale)
    beta = alpha / (alpha - 1.0)
    known_c = scale ** (1.0 - beta) * alpha ** (-beta)

    def one_side(saturation: float) -> RewardFunction:
        m = float(saturation)

        def value(x):
            d = np.clip(m - x, 0.0, None)
            return scale * (m**alpha - d**alpha)

        def grad(x):
            d = np.clip(m - x, 0.0, None)
            return scale * alpha * d ** (alpha - 1.0)

        return RewardFunction(
            family="custom",
            params=(alpha, m, scale),
            lipschitz_L=scale * alpha * m ** (alpha - 1.0),
            smooth_Lprime=(
                scale * alpha * (alpha - 1.0) * m ** (alpha - 2.0) if alpha >= 2.0 else None
            ),
            known_beta=beta,
            known_c=known_c,
            _value=value,
            _grad=grad,
        )

    return one_side(xstar), one_side(1.0 - xstar)


def make_lower_bound_instance(
    beta: float, horizon: int
) -> tuple[tuple[RewardFunction, RewardFunction], tuple[RewardFunction, RewardFunction]]:
    """Two nearly indistinguishable pairs whose profiles peak at 0 and at gamma.

    With gamma = T^{(1-beta)/2}, the gradients of matching members differ by
    at most O(T^{-1/2}) in sup norm while the profile optima are gamma apart,
    which is what makes the family hard at horizon T.  Every returned function
    is normalized to 0 at 0 and completed with a common linear slope so that
    all four are concave and non-decreasing; the common slope shifts each pair
    profile by a constant only.
    """
    if not 1.0 < beta <= 2.0:
        raise RewardModelError("lower-bound pairs require beta in (1, 2]")
    if not horizon >= 2:
        raise RewardModelError("lower-bound pairs require horizon >= 2")
    beta = float(beta)
    t_hor = float(horizon)
    q = beta / (beta - 1.0)
    s = 1.0 / (beta - 1.0)
    gamma = t_hor ** ((1.0 - beta) / 2.0)
    gs = gamma**s  # equals T^{-1/2}
    half = gamma / 2.0
    slope = q * gs  # common completion slope

    def pos(x):
        return np.clip(x, 0.0, None)

    def g_val(x):
        return np.where(x <= gamma, -pos(x) ** q, -q * gs * x + (q - 1.0) * gamma**q)

    def g_grad(x):
        return np.where(x <= gamma, -q * pos(x) ** s, -q * gs)

    def gt_val(x):
        return np.where(
            x <= 2.0 * gamma,
            -np.abs(x - gamma) ** q,
            -q * gs * x + (2.0 * q - 1.0) * gamma**q,
        )

    def gt_grad(x):
        return np.where(
            x <= 2.0 * gamma,
            -q * np.sign(x - gamma) * np.abs(x - gamma) ** s,
            -q * gs,
        )

    def h_val(x):
        mid = pos(gamma - x) ** q - pos(x) ** q
        return np.where(
            x <= half,
            2.0 * q * half**s * (half - x),
            np.where(x <= gamma, mid, -q * gs * x + (q - 1.0) * gamma**q),
        )

    def h_grad(x):
        mid = -q * (pos(gamma - x) ** s + pos(x) ** s)
        return np.where(x <= half, -2.0 * q * half**s, np.where(x <= gamma, mid, -q * gs))

    def build(val_parts, grad_parts, lipschitz):
        base = 0.0
        for sign_, part, flip in val_parts:
            base += sign_ * float(part(np.asarray(1.0 if flip else 0.0)))

        def value(x):
            out = slope * x - base
            for sign_, part, flip in val_parts:
                arg = 1.0 - x if flip else x
                out = out + sign_ * part(arg)
            return out

        def grad(x):
            out = np.full_like(x, slope)
            for sign_, part, flip in grad_parts:
                if flip:
                    out = out - sign_ * part(1.0 - x)
                else:
                    out = out + sign_ * part(x)
            return out

        return RewardFunction(
            family="piecewise-lower-bound",
            params=(beta, horizon),
            lipschitz_L=lipschitz,
            smooth_Lprime=2.0 * q * s * gamma ** (s - 1.0) if s >= 1.0 else None,
            known_beta=beta,
            _value=value,
            _grad=grad,
        )

    f1 = build([], [], lipschitz=slope)
    f2 = build([(1.0, g_val, True)], [(1.0, g_grad, True)], lipschitz=2.0 * q * gs)
    f1t = build(
        [(1.0, gt_val, False), (-1.0, g_val, False), (1.0, h_val, False)],
        [(1.0, gt_grad, False), (-1.0, g_grad, False), (1.0, h_grad, False)],
        lipschitz=2.0 * q * gs,
    )
    f2t = build(
        [(1.0, g_val, True), (-1.0, h_val, True)],
        [(1.0, g_grad, True), (-1.0, h_grad, True)],
        lipschitz=2.0 * q * gs,
    )
    return (f1, f2), (f1t, f2t)


def pair_value(f1: RewardFunction, f2: RewardFunction, x) -> float:
    """Reward of the two-resource split (x, 1-x)."""
    return f1.eval(x) + f2.eval(1.0 - np.asarray(x, dtype=float))


def pair_grad(f1: RewardFunction, f2: RewardFunction, x) -> float:
    """Gradient of the split profile x -> f1(x) + f2(1-x)."""
    return f1.grad(x) - f2.grad(1.0 - np.asarray(x, dtype=float))


# ---------------------------------------------------------------------------
# noise and instances
# ---------------------------------------------------------------------------

_NOISE_KINDS = ("uniform", "rademacher", "zero")


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean bounded observation noise added to each gradient coordinate.

    ``half_width`` is the support half-width, capped at 1 so draws stay in
    [-1, 1].  The "zero" kind disables noise entirely, which runners exploit
    to decide gradient signs from a single exact sample.
    """

    kind: str = "uniform"
    half_width: float = 1.0

    def __post_init__(self):
        if self.kind not in _NOISE_KINDS:
            raise RewardModelError(f"unknown noise kind: {self.kind!r}")
        if not 0.0 <= self.half_width <= 1.0:
            raise RewardModelError("noise half_width must be in [0, 1]")

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or self.half_width == 0.0

    def draw(self, rng: np.random.Generator, size=None):
        if self.is_zero:
            return 0.0 if size is None else np.zeros(size)
        if self.kind == "uniform":
            return rng.uniform(-self.half_width, self.half_width, size)
        # rademacher
        signs = rng.integers(0, 2, size) * 2 - 1
        return self.half_width * signs


@dataclass(frozen=True)
class InstanceSpec:
    """A complete experiment: K reward functions, noise law, horizon, confidence, seed."""

    functions: tuple[RewardFunction, ...]
    noise: NoiseModel
    horizon: int
    confidence: float
    seed: int = 0

    def __post_init__(self):
        if len(self.functions) < 2:
            raise RewardModelError("an instance needs at least two resources")
        if not (isinstance(self.horizon, (int, np.integer)) and self.horizon >= 2):
            raise RewardModelError("horizon must be an integer >= 2")
        if not 0.0 < self.confidence < 1.0:
            raise RewardModelError("confidence must lie in (0, 1)")

    @property
    def k(self) -> int:
        return len(self.functions)

    @property
    def max_lipschitz(self) -> float:
        return max(f.lipschitz_L for f in self.functions)

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)

    def with_seed(self, seed: int) -> "InstanceSpec":
        return replace(self, seed=int(seed))


def make_instance(
    functions: Sequence[RewardFunction],
    horizon: int,
    noise: NoiseModel | None = None,
    confidence: float | None = None,
    seed: int = 0,
) -> InstanceSpec:
    """Build an InstanceSpec with the defaults: uniform unit noise, confidence 2/T^2."""
    horizon = int(horizon)
    if confidence is None:
        confidence = 2.0 / horizon**2
    if noise is None:
        noise = NoiseModel()
    return InstanceSpec(
        functions=tuple(functions),
        noise=noise,
        horizon=horizon,
        confidence=float(confidence),
        seed=int(seed),
    )


def noisy_gradient(
    instance: InstanceSpec, allocation, rng: np.random.Generator
) -> np.ndarray:
    """One noisy observation of the K gradient coordinates at a simplex point.

    Draws K i.i.d. noise values from the instance's noise model and advances
    ``rng`` deterministically.
    """
    alloc = np.asarray(allocation, dtype=float)
    if alloc.shape != (instance.k,):
        raise SimplexError(f"allocation must have shape ({instance.k},)")
    if np.any(alloc < -_SIMPLEX_TOL) or abs(float(alloc.sum()) - 1.0) > _SIMPLEX_TOL:
        raise SimplexError("allocation is not on the simplex")
    clipped = np.clip(alloc, 0.0, 1.0)
    grads = np.array([f.grad(x) for f, x in zip(instance.functions, clipped)])
    return grads + instance.noise.draw(rng, instance.k)


# ---------------------------------------------------------------------------
# named experiment instances
# ---------------------------------------------------------------------------


def make_appendix_beta2_instance(
    horizon: int,
    noise: NoiseModel | None = None,
    confidence: float | None = None,
    seed: int = 0,
) -> InstanceSpec:
    """K = 2 cubic pair with quadratic profile peak at 0.4 (exponent 2)."""
    return make_instance(make_experiment_pair_beta2(), horizon, noise, confidence, seed)


def make_calpha_experiment_instance(
    horizon: int,
    alpha: float = 3.0,
    xstar: float = 0.4,
    scale: float = 3.0,
    noise: NoiseModel | None = None,
    confidence: float | None = None,
    seed: int = 0,
) -> InstanceSpec:
    """K = 2 piecewise power pair with exponent alpha/(alpha-1) at the profile peak."""
    return make_instance(
        make_calpha_profile_pair(alpha, xstar, scale), horizon, noise, confidence, seed
    )


def make_linear_gap_instance(
    horizon: int,
    gap: float = 0.5,
    top: float = 1.0,
    noise: NoiseModel | None = None,
    confidence: float | None = None,
    seed: int = 0,
) -> InstanceSpec:
    """Two linear resources with slope gap ``gap``; all mass belongs on the first."""
    if not 0.0 < gap <= top:
        raise RewardModelError("linear gap requires 0 < gap <= top")
    fns = (make_linear(top), make_linear(top - gap))
    return make_instance(fns, horizon, noise, confidence, seed)


def make_quadratic_k4_instance(
    horizon: int,
    a: float = 1.0,
    b: float = 2.0,
    k: int = 4,
    noise: NoiseModel | None = None,
    confidence: float | None = None,
    seed: int = 0,
) -> InstanceSpec:
    """K identical concave quadratics; the optimum is the uniform split."""
    fns = tuple(make_quadratic(a, b) for _ in range(int(k)))
    return make_instance(fns, horizon, noise, confidence, seed)


def make_lower_bound_pair_instance(
    horizon: int,
    beta: float = 1.5,
    variant: str = "base",
    noise: NoiseModel | None = None,
    confidence: float | None = None,
    seed: int = 0,
) -> InstanceSpec:
    """One of the two nearly indistinguishable hard pairs at the given exponent."""
    base, tilde = make_lower_bound_instance(beta, int(horizon))
    if variant == "base":
        fns = base
    elif variant == "tilde":
        fns = tilde
    else:
        raise RewardModelError("variant must be 'base' or 'tilde'")
    return make_instance(fns, horizon, noise, confidence, seed)
