"""Link families, the quasi-likelihood objective, its coefficient gradient,
the closed-form BLUP for the random effect, and variance-component updates.

The objective for coefficients ``beta_star`` (p x M, one column per region)
at a fixed random-effect vector ``b`` is

    ql = (1/phi) * sum_i  I(y_i, mu_i) / alpha_i  -  0.5 * b' b / sigma_b2,

where ``I(y, mu)`` is the quasi-likelihood integral of ``(y - u) / v(u)``
from y to mu, evaluated in closed form per family, and
``mu_i = h(x_i' beta^{(m_i)} + z_i' b)``.  For the Gaussian identity family
the integral is ``-(y - mu)^2 / 2``, so ql reduces to the penalized
least-squares criterion.

The random effect is never fit by gradient steps: given the fixed part it
has the exact maximizer

    b_hat = Sigma_b Z' (Sigma_eps + Z Sigma_b Z')^{-1} (y - fixed),

computed here through the equivalent q x q system
``(Z' Z / sigma_eps2 + I / sigma_b2) b_hat = Z' r / sigma_eps2`` so no
N x N matrix is ever formed.  Variance components use a method-of-moments
update (the source model treats them as known, so this scheme is this
package's own choice).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset
from .errors import NumericalError
from .tree import RegionAssignment, RegressionTree

SIGMA_EPS2_FLOOR = 1e-8
SIGMA_B2_DEAD = 1e-12  # below this the random effect is treated as absent


def _xlogy(x, y):
    """x * log(y) with the 0 * log(0) = 0 convention."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    out = np.zeros(x.shape)
    nz = x != 0
    out[nz] = x[nz] * np.log(y[nz])
    return out


@dataclass(frozen=True)
class LinkFamily:
    """A GLM family: link g, inverse h, derivative g', variance function v,
    the closed-form quasi-likelihood integral, dispersion phi, and a prior
    weight alpha (scalar, broadcast over observations)."""

    name: str
    link: Callable
    inverse: Callable
    dlink: Callable
    variance: Callable
    quasi_integral: Callable  # I(y, mu) = int_y^mu (y - u) / v(u) du
    dispersion: float = 1.0
    alpha: float = 1.0


def _gauss_integral(y, mu):
    return -0.5 * (y - mu) ** 2


def _poisson_integral(y, mu):
    # int_y^mu (y - u)/u du = y log(mu/y) - (mu - y), with y log y -> 0 at 0
    return _xlogy(y, mu) - _xlogy(y, y) - (mu - y)


def _bernoulli_integral(y, mu):
    return (
        _xlogy(y, mu)
        + _xlogy(1.0 - y, 1.0 - mu)
        - _xlogy(y, y)
        - _xlogy(1.0 - y, 1.0 - y)
    )


def _logit(mu):
    return np.log(mu / (1.0 - mu))


def _expit(eta):
    return 1.0 / (1.0 + np.exp(-np.asarray(eta, dtype=float)))


GAUSSIAN = LinkFamily(
    "gaussian",
    link=lambda mu: mu,
    inverse=lambda eta: eta,
    dlink=lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
    variance=lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
    quasi_integral=_gauss_integral,
)

POISSON = LinkFamily(
    "poisson",
    link=np.log,
    inverse=np.exp,
    dlink=lambda mu: 1.0 / np.asarray(mu, dtype=float),
    variance=lambda mu: np.asarray(mu, dtype=float),
    quasi_integral=_poisson_integral,
)

BERNOULLI = LinkFamily(
    "bernoulli",
    link=_logit,
    inverse=_expit,
    dlink=lambda mu: 1.0 / (np.asarray(mu) * (1.0 - np.asarray(mu))),
    variance=lambda mu: np.asarray(mu) * (1.0 - np.asarray(mu)),
    quasi_integral=_bernoulli_integral,
)

FAMILIES = {f.name: f for f in (GAUSSIAN, POISSON, BERNOULLI)}


def get_family(name: str) -> LinkFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(FAMILIES)}") from None


@dataclass
class GtimmModel:
    """Fitted tree-informed mixed model."""

    beta_star: np.ndarray  # (p, M); column m-1 = coefficients of region m
    b_hat: np.ndarray  # (q,)
    sigma_b2: float
    sigma_eps2: float
    tree: RegressionTree
    family: str = "gaussian"
    history: list = field(default_factory=list, repr=False, compare=False)
    selected_leaves: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.beta_star = np.asarray(self.beta_star, dtype=float)
        self.b_hat = np.asarray(self.b_hat, dtype=float)
        if self.beta_star.ndim != 2:
            raise ValueError("beta_star must be p x M")
        if self.beta_star.shape[1] != self.tree.leaf_count:
            raise ValueError(
                f"beta_star has {self.beta_star.shape[1]} columns, "
                f"tree has {self.tree.leaf_count} leaves"
            )
        if not (np.all(np.isfinite(self.beta_star)) and np.all(np.isfinite(self.b_hat))):
            raise ValueError("model parameters must be finite")
        get_family(self.family)

    @property
    def n_regions(self) -> int:
        return self.beta_star.shape[1]


@dataclass(frozen=True)
class QuasiState:
    """Per-observation snapshot at the current parameters."""

    mu: np.ndarray
    residual: np.ndarray  # y - mu
    weight: np.ndarray  # diagonal of the GLM weight matrix W
    loglik: float


def fixed_part_eta(beta_star: np.ndarray, X: np.ndarray, region: np.ndarray) -> np.ndarray:
    """Row-wise x_i' beta^{(m_i)} for 1-based region indices."""
    return np.einsum("ij,ji->i", X, beta_star[:, region - 1])


def linear_predictor(model: GtimmModel, x: np.ndarray, region: int, z: np.ndarray) -> float:
    """eta = x' beta^{(region)} + z' b_hat for a single observation."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z, dtype=float)
    if not 1 <= region <= model.n_regions:
        raise ValueError(f"region must be in 1..{model.n_regions}, got {region}")
    if x.shape != (model.beta_star.shape[0],):
        raise ValueError(f"x must have length {model.beta_star.shape[0]}")
    if z.shape != model.b_hat.shape:
        raise ValueError(f"z must have length {model.b_hat.shape[0]}")
    return float(x @ model.beta_star[:, region - 1] + z @ model.b_hat)


def _penalty(b_hat: np.ndarray, sigma_b2: float) -> float:
    if sigma_b2 <= 0:
        if np.any(b_hat != 0.0):
            raise NumericalError("penalty undefined: sigma_b2 = 0 with nonzero b_hat")
        return 0.0
    return 0.5 * float(b_hat @ b_hat) / sigma_b2


def quasi_loglik(model: GtimmModel, d: Dataset, r: RegionAssignment) -> float:
    """Laplace-approximated log quasi-likelihood at the model's parameters."""
    fam = get_family(model.family)
    eta = fixed_part_eta(model.beta_star, d.X, r.region) + d.Z @ model.b_hat
    mu = fam.inverse(eta)
    data_term = float(np.sum(fam.quasi_integral(d.y, mu) / fam.alpha)) / fam.dispersion
    return data_term - _penalty(model.b_hat, model.sigma_b2)


def quasi_state(model: GtimmModel, d: Dataset, r: RegionAssignment) -> QuasiState:
    fam = get_family(model.family)
    eta = fixed_part_eta(model.beta_star, d.X, r.region) + d.Z @ model.b_hat
    mu = fam.inverse(eta)
    weight = 1.0 / (fam.dispersion * fam.alpha * fam.variance(mu) * fam.dlink(mu) ** 2)
    return QuasiState(mu, d.y - mu, weight, quasi_loglik(model, d, r))


def ql_gradient_beta(
    model: GtimmModel,
    d: Dataset,
    r: RegionAssignment,
    region: int,
    batch: np.ndarray,
) -> np.ndarray:
    """Gradient of the quasi-likelihood w.r.t. beta^{(region)} over a batch.

    Sums (y - mu) / (alpha v(mu) g'(mu)) * x over the batch members that lie
    in the region, divided by the dispersion.  Batch indices outside the
    region are ignored; an empty effective batch gives the zero vector.
    """
    if not 1 <= region <= model.n_regions:
        raise ValueError(f"region must be in 1..{model.n_regions}, got {region}")
    fam = get_family(model.family)
    batch = np.asarray(batch, dtype=int)
    members = batch[r.region[batch] == region]
    if members.size == 0:
        return np.zeros(model.beta_star.shape[0])
    X = d.X[members]
    eta = X @ model.beta_star[:, region - 1] + d.Z[members] @ model.b_hat
    mu = fam.inverse(eta)
    score = (d.y[members] - mu) / (fam.alpha * fam.variance(mu) * fam.dlink(mu))
    return X.T @ score / fam.dispersion


def blup(
    beta_star: np.ndarray,
    d: Dataset,
    r: RegionAssignment,
    sigma_b2: float,
    sigma_eps2: float,
    family: str = "gaussian",
) -> np.ndarray:
    """Closed-form best linear unbiased predictor of the random effect.

    Solves the q x q system (Z'Z/sigma_eps2 + I/sigma_b2) b = Z' e /
    sigma_eps2, equivalent to Sigma_b Z' (Sigma_eps + Z Sigma_b Z')^{-1} e.
    For the identity link, e = y - fixed part; otherwise e is the working
    residual (y - h(eta_fixed)) * g'(h(eta_fixed)) on the predictor scale.
    Returns the zero vector when sigma_b2 = 0.
    """
    if sigma_eps2 <= 0:
        raise ValueError("sigma_eps2 must be > 0")
    q = d.q
    if sigma_b2 <= SIGMA_B2_DEAD:
        return np.zeros(q)
    fam = get_family(family)
    eta_fixed = fixed_part_eta(np.asarray(beta_star, dtype=float), d.X, r.region)
    if fam.name == "gaussian":
        resid = d.y - eta_fixed
    else:
        mu = fam.inverse(eta_fixed)
        resid = (d.y - mu) * fam.dlink(mu)
    A = d.Z.T @ d.Z / sigma_eps2 + np.eye(q) / sigma_b2
    rhs = d.Z.T @ resid / sigma_eps2
    try:
        out = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("singular BLUP system") from exc
    if not np.all(np.isfinite(out)):
        raise NumericalError("non-finite BLUP solution")
    return out


def update_variance_components(
    d: Dataset,
    r: RegionAssignment,
    beta_star: np.ndarray,
    b_hat: np.ndarray,
    sigma_b2_prev: float,
    sigma_eps2_prev: float,
) -> tuple[float, float]:
    """Method-of-moments update of (sigma_b2, sigma_eps2).

    sigma_eps2 is the full-model residual SSE over N - p*M (floored at
    1e-8).  sigma_b2 re-inflates the mean squared BLUP by the average
    inverse shrinkage factor (sigma_eps2 + n_g sigma_b2) / (n_g sigma_b2)
    evaluated at the previous iterate; once the previous sigma_b2 hits
    zero the random effect stays dead.
    """
    beta_star = np.asarray(beta_star, dtype=float)
    b_hat = np.asarray(b_hat, dtype=float)
    n, p = d.X.shape
    m = beta_star.shape[1]
    dof = n - p * m
    if dof <= 0:
        raise NumericalError(
            f"cannot estimate sigma_eps2: N={n} <= p*M={p * m} parameters"
        )
    resid = d.y - fixed_part_eta(beta_star, d.X, r.region) - d.Z @ b_hat
    sigma_eps2 = max(float(resid @ resid) / dof, SIGMA_EPS2_FLOOR)

    if sigma_b2_prev <= SIGMA_B2_DEAD:
        return 0.0, sigma_eps2
    mean_b2 = float(np.mean(b_hat**2))
    if mean_b2 == 0.0:
        return 0.0, sigma_eps2
    n_g = (d.Z != 0).sum(axis=0)
    present = n_g > 0
    inflate = (sigma_eps2_prev + n_g[present] * sigma_b2_prev) / (n_g[present] * sigma_b2_prev)
    sigma_b2 = max(mean_b2 * float(np.mean(inflate)), 0.0)
    return sigma_b2, sigma_eps2
