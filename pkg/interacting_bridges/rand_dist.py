"""
Exact samplers and densities for the one-dimensional building blocks.

Conventions (fixed everywhere in the package):

- Gamma(shape, rate): density rate^shape x^(shape-1) e^(-rate x) / Gamma(shape).
- GIG(q, a, b): density proportional to t^(q-1) exp(-(a t + b / t) / 2).
  With this convention the hitting-time density of drifted Brownian motion is
  GIG(-1/2, eta^2, theta^2); that pairing is the anchor every other identity is
  tested against.
- IG(mu, lambda): mean mu, shape lambda.

Random streams are (seed, stream_id) pairs mapped onto Philox counter-based
generators, so every replica chunk has its own reproducible stream.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import special, stats

from scripts.utils.utils import get_logger
from .errors import ParameterError

logger = get_logger('rand_dist')

_HALF_LOG_PI_OVER_2 = 0.5 * np.log(np.pi / 2.0)


#########################################################################
##############               Streams                 ####################
#########################################################################


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by (seed, stream_id)."""
    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        if int(self.seed) < 0 or int(self.stream_id) < 0:
            raise ParameterError("seed and stream_id must be nonnegative integers")
        object.__setattr__(self, 'seed', int(self.seed))
        object.__setattr__(self, 'stream_id', int(self.stream_id))

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of this stream."""
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        return np.random.Generator(np.random.Philox(sequence))

    def child(self, offset: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + int(offset))

    def as_dict(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id}


RandomSource = Union[RngStream, np.random.Generator]


def as_generator(rng: RandomSource) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    raise ParameterError(f"expected an RngStream or numpy Generator, got {type(rng).__name__}")


def _scalar_or_array(values: NDArray[np.float64], size) -> Union[float, NDArray[np.float64]]:
    return float(values) if size is None else values


def _positive(name: str, value: float, strict: bool = True) -> float:
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        raise ParameterError(f"{name} must be {'> 0' if strict else '>= 0'}, got {value}")
    return value


#########################################################################
##############       Inverse Gaussian / Gamma        ####################
#########################################################################


def ig_density(t: ArrayLike, theta: float, eta: float) -> Union[float, NDArray[np.float64]]:
    """
    Hitting-time density of 0 for theta + B(t) - eta t:
    theta / sqrt(2 pi t^3) exp(-(theta - eta t)^2 / (2 t)).
    """
    theta = _positive("theta", theta)
    eta = _positive("eta", eta, strict=False)
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0)):
        raise ParameterError("ig_density requires t > 0")
    values = theta / np.sqrt(2.0 * np.pi * t_arr ** 3) * np.exp(-(theta - eta * t_arr) ** 2 / (2.0 * t_arr))
    return float(values) if values.ndim == 0 else values


def ig_distribution(theta: float, eta: float):
    """Frozen scipy law of the hitting time: IG(theta/eta, theta^2), or Levy(theta^2) at eta = 0."""
    theta = _positive("theta", theta)
    eta = _positive("eta", eta, strict=False)
    if eta == 0.0:
        return stats.levy(scale=theta ** 2)
    return stats.invgauss(1.0 / (theta * eta), scale=theta ** 2)


def ig_cdf(t: ArrayLike, theta: float, eta: float):
    return ig_distribution(theta, eta).cdf(t)


def sample_ig(mu: float, lam: float, rng: RandomSource, size: Optional[int] = None):
    """
    IG(mu, lambda) variates by transformation with multiple roots.

    The smaller root of the quadratic is written in a cancellation-free form;
    a uniform then selects it with probability mu / (mu + x), else mu^2 / x.
    """
    gen = as_generator(rng)
    mu_arr = np.asarray(mu, dtype=float)
    lam_arr = np.asarray(lam, dtype=float)
    if np.any(~(mu_arr > 0)) or np.any(~(lam_arr > 0)):
        raise ParameterError("sample_ig requires mu > 0 and lambda > 0")
    shape = np.broadcast(mu_arr, lam_arr).shape if size is None else size

    y = gen.standard_normal(shape) ** 2
    z = gen.random(shape)
    mu_y = mu_arr * y
    root = np.sqrt(4.0 * mu_y * lam_arr + mu_y * mu_y)
    with np.errstate(invalid='ignore', divide='ignore'):
        x = np.where(y > 0, 4.0 * mu_arr * mu_arr * lam_arr * y / (root + mu_y) ** 2, mu_arr)
    samples = np.where(z <= mu_arr / (mu_arr + x), x, mu_arr * mu_arr / x)
    return float(samples) if np.ndim(samples) == 0 else samples


def sample_gamma(shape: float, rate: float, rng: RandomSource, size: Optional[int] = None):
    """Gamma(shape, rate) variates (Marsaglia-Tsang rejection inside numpy)."""
    shape = _positive("shape", shape)
    rate = _positive("rate", rate)
    samples = as_generator(rng).gamma(shape, 1.0 / rate, size=size)
    return _scalar_or_array(samples, size)


#########################################################################
##############              Bessel K                 ####################
#########################################################################


def _half_integer_order(q: float) -> Optional[int]:
    """n when |q| = n + 1/2 for n in {0, 1, 2}, else None."""
    doubled = 2.0 * abs(float(q))
    if doubled in (1.0, 3.0, 5.0):
        return int(doubled) // 2
    return None


def _half_integer_factor(order: int, x: NDArray[np.float64]) -> NDArray[np.float64]:
    if order == 0:
        return np.ones_like(x)
    if order == 1:
        return 1.0 + 1.0 / x
    return 1.0 + 3.0 / x + 3.0 / (x * x)


def _check_bessel_argument(x: ArrayLike) -> NDArray[np.float64]:
    x_arr = np.asarray(x, dtype=float)
    if np.any(~(x_arr > 0)):
        raise ParameterError("bessel_k requires x > 0")
    return x_arr


def bessel_k(q: float, x: ArrayLike):
    """Modified Bessel function of the second kind K_q(x); closed forms at q = ±1/2, ±3/2, ±5/2."""
    x_arr = _check_bessel_argument(x)
    order = _half_integer_order(q)
    if order is not None:
        values = np.sqrt(np.pi / (2.0 * x_arr)) * np.exp(-x_arr) * _half_integer_factor(order, x_arr)
    else:
        values = special.kv(abs(float(q)), x_arr)
    return float(values) if values.ndim == 0 else values


def log_bessel_k(q: float, x: ArrayLike):
    """log K_q(x), overflow-free for large x."""
    x_arr = _check_bessel_argument(x)
    order = _half_integer_order(q)
    if order is not None:
        values = _HALF_LOG_PI_OVER_2 - 0.5 * np.log(x_arr) - x_arr + np.log(_half_integer_factor(order, x_arr))
    else:
        values = np.log(special.kve(abs(float(q)), x_arr)) - x_arr
    return float(values) if values.ndim == 0 else values


#########################################################################
##############                 GIG                   ####################
#########################################################################


@dataclass(frozen=True)
class GigParams:
    """GIG(q, a, b); a zero parameter is the Gamma (b = 0) or inverse-Gamma (a = 0) limit."""
    q: float
    a: float
    b: float

    def __post_init__(self) -> None:
        q, a, b = float(self.q), float(self.a), float(self.b)
        if not (np.isfinite(q) and np.isfinite(a) and np.isfinite(b)) or a < 0 or b < 0:
            raise ParameterError(f"inadmissible GIG parameters (q={q}, a={a}, b={b})")
        admissible = (a > 0 and b > 0) or (a == 0 and q < 0 and b > 0) or (b == 0 and q > 0 and a > 0)
        if not admissible:
            logger.error(f"Inadmissible GIG parameters q={q}, a={a}, b={b}")
            raise ParameterError(f"inadmissible GIG parameters (q={q}, a={a}, b={b})")
        object.__setattr__(self, 'q', q)
        object.__setattr__(self, 'a', a)
        object.__setattr__(self, 'b', b)

    def reciprocal(self) -> "GigParams":
        """Law of 1/X when X ~ GIG(q, a, b)."""
        return GigParams(-self.q, self.b, self.a)


def gig_log_density(t: ArrayLike, p: GigParams):
    t_arr = np.asarray(t, dtype=float)
    if np.any(~(t_arr > 0)):
        raise ParameterError("gig_density requires t > 0")
    q, a, b = p.q, p.a, p.b
    if a > 0 and b > 0:
        log_norm = 0.5 * q * np.log(a / b) - np.log(2.0) - log_bessel_k(q, np.sqrt(a * b))
        values = log_norm + (q - 1.0) * np.log(t_arr) - 0.5 * (a * t_arr + b / t_arr)
    elif b == 0:
        rate = 0.5 * a
        values = q * np.log(rate) - special.gammaln(q) + (q - 1.0) * np.log(t_arr) - rate * t_arr
    else:
        shape, scale = -q, 0.5 * b
        values = shape * np.log(scale) - special.gammaln(shape) - (shape + 1.0) * np.log(t_arr) - scale / t_arr
    return float(values) if np.ndim(values) == 0 else values


def gig_density(t: ArrayLike, p: GigParams):
    """(a/b)^(q/2) / (2 K_q(sqrt(ab))) t^(q-1) exp(-(a t + b/t)/2), with Gamma / inverse-Gamma limits."""
    values = np.exp(gig_log_density(t, p))
    return float(values) if np.ndim(values) == 0 else values


def gig_distribution(p: GigParams):
    """Frozen scipy law matching GigParams under the package convention."""
    if p.a > 0 and p.b > 0:
        return stats.geninvgauss(p.q, np.sqrt(p.a * p.b), scale=np.sqrt(p.b / p.a))
    if p.b == 0:
        return stats.gamma(p.q, scale=2.0 / p.a)
    return stats.invgamma(-p.q, scale=0.5 * p.b)


def gig_cdf(t: ArrayLike, p: GigParams):
    return gig_distribution(p).cdf(t)


def sample_gig(p: GigParams, rng: RandomSource, size: Optional[int] = None):
    """GIG variates: ratio-of-uniforms (scipy geninvgauss) inside, exact Gamma draws at the limits."""
    gen = as_generator(rng)
    if p.a > 0 and p.b > 0:
        samples = gig_distribution(p).rvs(size=size, random_state=gen)
    elif p.b == 0:
        samples = gen.gamma(p.q, 2.0 / p.a, size=size)
    else:
        samples = 1.0 / gen.gamma(-p.q, 2.0 / p.b, size=size)
    return _scalar_or_array(np.asarray(samples, dtype=float), size)


#########################################################################
##############            Bessel bridges             ####################
#########################################################################


def _validate_grid(grid: ArrayLike, end: Optional[float] = None) -> NDArray[np.float64]:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.shape[0] < 2:
        raise ParameterError("time grid must be 1-D with at least two points")
    if grid[0] != 0.0:
        raise ParameterError("time grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ParameterError("time grid must be strictly increasing")
    if end is not None:
        if not np.isclose(grid[-1], end, rtol=1e-12, atol=0.0):
            raise ParameterError(f"time grid must end at t0={end}, ends at {grid[-1]}")
        grid = grid.copy()
        grid[-1] = end
    return grid


def sample_bessel3_bridge(theta: float, t0: float, grid: ArrayLike, rng: RandomSource,
                          size: Optional[int] = None) -> NDArray[np.float64]:
    """
    3-dimensional Bessel bridge from theta to 0 on [0, t0], exact at the grid points.

    Norm of a 3-D Brownian bridge from (theta, 0, 0) to the origin, each
    coordinate advanced by Gaussian conditioning on the endpoint.
    Returns shape (len(grid),), or (size, len(grid)) when size is given.
    """
    theta = _positive("theta", theta)
    t0 = _positive("t0", t0)
    grid = _validate_grid(grid, end=t0)
    gen = as_generator(rng)

    n_paths = 1 if size is None else int(size)
    n_points = grid.shape[0]
    position = np.zeros((n_paths, 3))
    position[:, 0] = theta
    out = np.empty((n_paths, n_points))
    out[:, 0] = theta

    for k in range(1, n_points - 1):
        remaining = t0 - grid[k - 1]
        h = grid[k] - grid[k - 1]
        mean = position * (1.0 - h / remaining)
        std = np.sqrt(h * (t0 - grid[k]) / remaining)
        position = mean + std * gen.standard_normal((n_paths, 3))
        out[:, k] = np.sqrt(np.sum(position * position, axis=1))
    out[:, -1] = 0.0

    return out[0] if size is None else out


def sample_bessel3_process(x0: float, grid: ArrayLike, rng: RandomSource,
                           size: Optional[int] = None) -> NDArray[np.float64]:
    """BES(3) from x0, exact at the grid points: norm of 3-D Brownian motion from (x0, 0, 0)."""
    x0 = _positive("x0", x0, strict=False)
    grid = _validate_grid(grid)
    gen = as_generator(rng)

    n_paths = 1 if size is None else int(size)
    steps = np.sqrt(np.diff(grid))[None, :, None] * gen.standard_normal((n_paths, grid.shape[0] - 1, 3))
    position = np.concatenate([np.zeros((n_paths, 1, 3)), np.cumsum(steps, axis=1)], axis=1)
    position[:, :, 0] += x0
    out = np.sqrt(np.sum(position * position, axis=2))
    return out[0] if size is None else out


def bridge_marginal_pit(value: ArrayLike, theta: ArrayLike, t0: ArrayLike, s: float) -> NDArray[np.float64]:
    """
    Probability-integral transform of X(s) for a Bessel bridge from theta to 0 on [0, t0].

    X(s)^2 / v with v = s (t0 - s) / t0 is non-central chi-square with 3 degrees of
    freedom and non-centrality theta^2 (t0 - s) / (s t0).
    """
    value = np.asarray(value, dtype=float)
    theta = np.asarray(theta, dtype=float)
    t0 = np.asarray(t0, dtype=float)
    if np.any(t0 <= s) or s <= 0:
        raise ParameterError("bridge_marginal_pit needs 0 < s < t0")
    variance = s * (t0 - s) / t0
    noncentrality = theta * theta * (t0 - s) / (s * t0)
    return stats.ncx2.cdf(value * value / variance, 3, noncentrality)


def matsumoto_yor_laws(theta: float, eta: float, convention: str = "anchored") -> Tuple[Tuple[GigParams, GigParams], Tuple[GigParams, GigParams]]:
    """
    Product laws of the one-dimensional Matsumoto-Yor property as GIG parameters.

    Returns ((law of 1/T0, law of T1 - T0), (law of 1/T0 - 1/T1, law of T1)).
    Gamma(1/2, rate r) is GIG(1/2, 2r, 0).

    - ``anchored``: derived under the hitting-time density; T0 ~ GIG(-1/2, eta^2, theta^2).
    - ``halved``: the printed parameters read literally, GIG arguments halved and the
      Gamma rates taken as theta^2 / eta^2.
    """
    theta = _positive("theta", theta)
    eta = _positive("eta", eta)
    t2, e2 = theta * theta, eta * eta
    if convention == "anchored":
        first = (GigParams(0.5, t2, e2), GigParams(0.5, e2, 0.0))
        second = (GigParams(0.5, t2, 0.0), GigParams(0.5, e2, t2))
    elif convention == "halved":
        first = (GigParams(0.5, t2 / 2.0, e2 / 2.0), GigParams(0.5, 2.0 * t2, 0.0))
        second = (GigParams(0.5, 2.0 * e2, 0.0), GigParams(0.5, e2 / 2.0, t2 / 2.0))
    else:
        raise ParameterError(f"unknown convention {convention!r}; use 'anchored' or 'halved'")
    return first, second
