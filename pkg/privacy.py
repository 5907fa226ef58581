"""User-level differential privacy for federated training.

Each sampled client's delta is clipped to L2 norm S before upload. The server
averages the clipped deltas, takes the alpha2 step and adds Gaussian noise
with std z * 2S/M (the sensitivity of the average when one user's data is
replaced). A Renyi-DP accountant tracks the subsampled Gaussian mechanism
and converts to (epsilon, delta).
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import pandas as pd
from scipy import optimize, special
from tqdm import tqdm

from federation import (
    FederationError,
    _trace_frame,
    checkpoint_path,
    meta_update,
    run_round,
    sample_clients,
    train,
    usable_clients,
)
from linalg import RngStream, gaussian_draw, laplace_draw
from model import save_params

logger = logging.getLogger(__name__)

MECHANISMS = ("gaussian", "laplace")
BOUNDS = ("without-replacement", "poisson")
CHARGING = ("per-client", "per-round")

BASE_ORDERS = (1.25, 1.5, 1.75, 2, 2.5, 3, 4, 5, 6, 8, 16, 32, 64, 128, 256, 512)
DEFAULT_ORDERS = tuple(sorted(set(BASE_ORDERS) | set(range(2, 65))))

# above this order the without-replacement bound switches to the O(alpha) form
_MAX_EXACT_ORDER = 256
_MAX_FRAC_TERMS = 1000


class PrivacyError(ValueError):
    """Raised on invalid DP settings or a violated clipping bound."""


@dataclass(frozen=True)
class DpConfig:
    """clip_bound is S and noise_scale is z; q defaults to M/N at training time."""

    clip_bound: float = 1.0
    noise_scale: float = 1.0
    delta: float = 1e-4
    q: float = None
    mechanism: str = "gaussian"
    epsilon: float = None
    bound: str = "without-replacement"
    charging: str = "per-client"

    def validate(self):
        if not self.clip_bound > 0:
            raise PrivacyError(f"clip bound S must be > 0, got {self.clip_bound}")
        if self.noise_scale < 0:
            raise PrivacyError(f"noise scale z must be >= 0, got {self.noise_scale}")
        if self.q is not None and not 0 < self.q <= 1:
            raise PrivacyError(f"sampling ratio q must be in (0, 1], got {self.q}")
        if not 0 < self.delta < 1:
            raise PrivacyError(f"delta must be in (0, 1), got {self.delta}")
        if self.mechanism not in MECHANISMS:
            raise PrivacyError(f"unknown mechanism {self.mechanism!r}")
        if self.mechanism == "laplace" and not (self.epsilon and self.epsilon > 0):
            raise PrivacyError("the Laplace mechanism needs a positive epsilon budget")
        if self.bound not in BOUNDS:
            raise PrivacyError(f"unknown RDP bound {self.bound!r}")
        if self.charging not in CHARGING:
            raise PrivacyError(f"unknown accountant charging {self.charging!r}")
        return self


# --- clipping and noise ----------------------------------------------------

def clip(delta, s):
    """delta * min(1, s / ||delta||)."""
    if not s > 0:
        raise PrivacyError(f"clip bound must be > 0, got {s}")
    if delta.norm <= s:
        return delta
    values = delta.values * (s / delta.norm)
    return replace(delta, values=values, norm=float(np.linalg.norm(values)))


def sensitivity_bound(s, m):
    """Sensitivity of the mean of m clipped deltas under replacement of one user: 2S/M."""
    if m < 1:
        raise PrivacyError("sensitivity needs at least one client per round")
    return 2.0 * s / m


def laplace_scale(dp, m, rounds):
    """Per-coordinate Laplace scale with the budget split evenly across rounds."""
    if rounds < 1:
        raise PrivacyError("Laplace calibration needs at least one round")
    return sensitivity_bound(dp.clip_bound, m) / (dp.epsilon / rounds)


def perturb(aggregate_step, dp, m, rng, rounds=None):
    aggregate_step = np.asarray(aggregate_step, dtype=np.float64)
    if dp.mechanism == "gaussian":
        sigma = dp.noise_scale * sensitivity_bound(dp.clip_bound, m)
        return aggregate_step + gaussian_draw(rng, sigma, aggregate_step.size)
    if dp.mechanism == "laplace":
        return aggregate_step + laplace_draw(rng, laplace_scale(dp, m, rounds), aggregate_step.size)
    raise PrivacyError(f"unknown mechanism {dp.mechanism!r}")


# --- log-space helpers -----------------------------------------------------

def _log_add(logx, logy):
    a, b = min(logx, logy), max(logx, logy)
    if a == -np.inf:
        return b
    return math.log1p(math.exp(a - b)) + b


def _log_sub_sign(logx, logy):
    """log|exp(logx) - exp(logy)| and whether the difference is non-negative."""
    if logx > logy:
        return True, logx + math.log1p(-math.exp(logy - logx))
    if logx < logy:
        return False, logy + math.log1p(-math.exp(logx - logy))
    return True, -np.inf


def _log_comb(n, k):
    return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(n - k + 1)


def _log_erfc(x):
    return math.log(2) + special.log_ndtr(-x * 2 ** 0.5)


def _diff_in_log(vec, signs, n):
    for j in range(n):
        if signs[j] == signs[j + 1]:
            signs[j], vec[j] = _log_sub_sign(vec[j + 1], vec[j])
            if not signs[j + 1]:
                signs[j] = not signs[j]
        else:
            vec[j] = _log_add(vec[j], vec[j + 1])
            signs[j] = signs[j + 1]


def _forward_diffs(fun, n):
    """Log-magnitudes of the forward differences of exp(fun) at 0, orders 0..n+1."""
    values = np.zeros(n + 3)
    signs = np.ones(n + 3, dtype=bool)
    deltas = np.zeros(n + 2)
    for i in range(1, n + 3):
        values[i] = fun(float(i - 1))
    for i in range(n + 2):
        _diff_in_log(values, signs, n + 2 - i)
        deltas[i] = values[0]
    return deltas


# --- subsampled Gaussian RDP -----------------------------------------------

def _log_a_without_replacement(q, sigma, alpha):
    """log of the moment bound for integer alpha under fixed-size sampling."""
    if alpha == 1:
        return 0.0

    def cgf(x):
        return x * (x + 1) / (2.0 * sigma ** 2)

    def gaussian(x):
        return x / (2.0 * sigma ** 2)

    log_a = 0.0
    second = 2 * math.log(q) + _log_comb(alpha, 2) + min(
        math.log(4) + gaussian(2.0) + math.log1p(-math.exp(-gaussian(2.0))),
        gaussian(2.0) + math.log(2),
    )
    log_a = _log_add(log_a, second)
    deltas = _forward_diffs(cgf, alpha) if alpha <= _MAX_EXACT_ORDER else None
    for i in range(3, alpha + 1):
        s = math.log(2) + cgf(i - 1)
        if deltas is not None:
            lo = deltas[int(2 * math.floor(i / 2.0)) - 1]
            hi = deltas[int(2 * math.ceil(i / 2.0)) - 1]
            s = min(s, math.log(4) + 0.5 * (lo + hi))
        log_a = _log_add(log_a, s + i * math.log(q) + _log_comb(alpha, i))
    return float(log_a)


def _log_a_poisson_int(q, sigma, alpha):
    log_a = -np.inf
    log1mq = math.log1p(-q)
    for i in range(alpha + 1):
        s = _log_comb(alpha, i) + i * math.log(q) + (alpha - i) * log1mq + (i * i - i) / (2 * sigma ** 2)
        log_a = _log_add(log_a, s)
    return float(log_a)


def _log_a_poisson_frac(q, sigma, alpha):
    log_a0 = log_a1 = -np.inf
    z0 = sigma ** 2 * math.log(1 / q - 1) + 0.5
    log1mq = math.log1p(-q)
    last_s0 = last_s1 = -np.inf
    for i in range(_MAX_FRAC_TERMS):
        log_coef = _log_comb(alpha, i)
        j = alpha - i
        log_s0 = (log_coef + i * math.log(q) + j * log1mq + (i * i - i) / (2 * sigma ** 2)
                  + math.log(0.5) + _log_erfc((i - z0) / (math.sqrt(2) * sigma)))
        log_s1 = (log_coef + j * math.log(q) + i * log1mq + (j * j - j) / (2 * sigma ** 2)
                  + math.log(0.5) + _log_erfc((z0 - j) / (math.sqrt(2) * sigma)))
        log_a0 = _log_add(log_a0, log_s0)
        log_a1 = _log_add(log_a1, log_s1)
        total = _log_add(log_a0, log_a1)
        if log_s0 < last_s0 and log_s1 < last_s1 and max(log_s0, log_s1) < total - 30:
            return total
        last_s0, last_s1 = log_s0, log_s1
    logger.warning("fractional-order RDP did not converge (q=%g, z=%g, alpha=%g)", q, sigma, alpha)
    return np.inf


@lru_cache(maxsize=4096)
def rdp_subsampled_gaussian(q, z, alpha, bound="without-replacement"):
    """RDP at order alpha of one access to the subsampled Gaussian mechanism (sensitivity 1)."""
    if bound not in BOUNDS:
        raise PrivacyError(f"unknown RDP bound {bound!r}")
    if q == 0:
        return 0.0
    if z == 0 or math.isinf(alpha):
        return math.inf
    if q == 1:
        return alpha / (2.0 * z ** 2)
    if bound == "poisson":
        if float(alpha).is_integer():
            return _log_a_poisson_int(q, z, int(alpha)) / (alpha - 1)
        return _log_a_poisson_frac(q, z, alpha) / (alpha - 1)
    if float(alpha).is_integer():
        return _log_a_without_replacement(q, z, int(alpha)) / (alpha - 1)
    # interpolate the log-moments of the neighbouring integer orders
    lo, hi = math.floor(alpha), math.ceil(alpha)
    t = alpha - lo
    x = _log_a_without_replacement(q, z, lo)
    y = _log_a_without_replacement(q, z, hi)
    return ((1 - t) * x + t * y) / (alpha - 1)


@dataclass(frozen=True)
class PrivacyAccountant:
    """Accumulated RDP of the training run, one composition per DP round.

    accesses_per_step is how many subsampled-mechanism accesses one round is
    charged (M for per-client charging, 1 for per-round).
    """

    q: float
    z: float
    compositions: int = 0
    rdp_orders: tuple = DEFAULT_ORDERS
    rdp_values: tuple = ()
    accesses_per_step: int = 1
    bound: str = "without-replacement"
    pure_epsilon_per_step: float = None

    @classmethod
    def start(cls, q, z, orders=DEFAULT_ORDERS, accesses_per_step=1, bound="without-replacement",
              pure_epsilon_per_step=None):
        if not 0 < q <= 1:
            raise PrivacyError(f"sampling ratio q must be in (0, 1], got {q}")
        if z < 0:
            raise PrivacyError(f"noise scale z must be >= 0, got {z}")
        orders = tuple(float(a) for a in orders)
        if any(a <= 1 for a in orders):
            raise PrivacyError("RDP orders must be > 1")
        return cls(q, z, 0, orders, (0.0,) * len(orders), accesses_per_step, bound, pure_epsilon_per_step)

    def step_rdp(self):
        return np.array([rdp_subsampled_gaussian(self.q, self.z, a, self.bound) for a in self.rdp_orders]) \
            * self.accesses_per_step

    def to_frame(self):
        return pd.DataFrame({"order": self.rdp_orders, "rdp": self.rdp_values})


def accountant_step(acc, steps=1):
    increment = acc.step_rdp() * steps
    values = tuple(float(v) for v in np.asarray(acc.rdp_values) + increment)
    return replace(acc, compositions=acc.compositions + steps, rdp_values=values)


def epsilon(acc, delta):
    """min over orders of rdp(alpha) + log(1/delta)/(alpha-1); infinite at delta = 0."""
    if delta == 0:
        return math.inf
    if not 0 < delta < 1:
        raise PrivacyError(f"delta must be in (0, 1), got {delta}")
    if acc.pure_epsilon_per_step is not None:
        return acc.pure_epsilon_per_step * acc.compositions
    orders = np.asarray(acc.rdp_orders)
    eps = np.asarray(acc.rdp_values) + math.log(1 / delta) / (orders - 1)
    best = int(np.argmin(eps))
    if acc.compositions and np.isfinite(eps[best]) and best in (0, len(orders) - 1):
        logger.warning("optimal RDP order %.2f lies at the edge of the order grid", orders[best])
    return float(eps[best])


def epsilon_after(q, z, rounds, delta, accesses_per_step=1, bound="without-replacement", orders=DEFAULT_ORDERS):
    acc = PrivacyAccountant.start(q, z, orders, accesses_per_step, bound)
    return epsilon(accountant_step(acc, rounds), delta)


def calibrate_noise(target_epsilon, delta, q, rounds, accesses_per_step=1, bound="without-replacement"):
    """Smallest noise scale z whose run of ``rounds`` stays within target_epsilon."""
    if not target_epsilon > 0:
        raise PrivacyError("target epsilon must be > 0")

    def gap(z):
        return epsilon_after(q, z, rounds, delta, accesses_per_step, bound) - target_epsilon

    lo, hi = 0.25, 1.0
    while gap(lo) < 0:
        lo /= 2
        if lo < 1e-3:
            raise PrivacyError(f"epsilon {target_epsilon} is reachable with almost no noise")
    while gap(hi) > 0:
        hi *= 2
        if hi > 1e4:
            raise PrivacyError(f"epsilon {target_epsilon} is not reachable")
    z = optimize.brentq(gap, lo, hi, xtol=1e-6)
    logger.info("calibrated z=%.4f for epsilon=%.3g at delta=%g", z, target_epsilon, delta)
    return float(z)


def accountant_table(n, m_list, z, rounds, deltas, charging="per-client", bound="without-replacement"):
    """Epsilon grid with one row per q = M/N and one column per delta."""
    rows = {}
    for m in m_list:
        accesses = m if charging == "per-client" else 1
        acc = accountant_step(PrivacyAccountant.start(m / n, z, accesses_per_step=accesses, bound=bound), rounds)
        rows[f"{m}/{n}"] = {f"{d:g}": epsilon(acc, d) for d in deltas}
    frame = pd.DataFrame.from_dict(rows, orient="index")
    frame.index.name = "q"
    return frame


# --- DP training -----------------------------------------------------------

def _dp_rounds(theta, clients, cfg, dp, mode, catalog, q, checkpoint_dir, progress):
    m = cfg.clients_per_round
    accesses = m if dp.charging == "per-client" else 1
    pure = None
    if dp.mechanism == "laplace":
        pure = dp.epsilon / max(cfg.rounds, 1)
    acc = PrivacyAccountant.start(q, dp.noise_scale, accesses_per_step=accesses, bound=dp.bound,
                                  pure_epsilon_per_step=pure)
    sampler = RngStream(cfg.seed, "sampling")
    noise_rng = RngStream(cfg.seed, "noise")
    tolerance = dp.clip_bound * (1 + 1e-9)
    losses = []

    for r in tqdm(range(cfg.rounds), desc=f"train-dp[{mode}]", disable=not progress):
        chosen = sample_clients(sampler, len(clients), m)
        deltas = run_round(theta, clients, chosen, cfg, mode, r, catalog, postprocess=lambda d: clip(d, dp.clip_bound))
        for d in deltas:
            if d.norm > tolerance:
                raise PrivacyError(f"round {r + 1}: client {d.client_id} uploaded a delta of norm {d.norm}")
        theta = meta_update(theta, deltas, cfg.server_lr)
        noise = perturb(np.zeros(theta.size), dp, m, noise_rng, cfg.rounds)
        if np.any(noise):
            theta = theta.with_vector(theta.flatten() + noise)
        acc = accountant_step(acc)
        losses.append(float(np.nanmean([d.loss for d in deltas])))
        if checkpoint_dir and cfg.checkpoint_every and (r + 1) % cfg.checkpoint_every == 0:
            save_params(theta, checkpoint_path(checkpoint_dir, r + 1), {"round": r + 1, "mode": f"dp-{mode}"})
    return theta, _trace_frame(losses), acc


def train_dp(clients, cfg, dp, mode, theta0, catalog=None, pretrain_cfg=None, checkpoint_dir=None, progress=True):
    """DP federated training.

    one-stage runs DP rounds on the supervised loss only. two-stage first
    pretrains the item and session parameters with noiseless federated SSL,
    then runs DP rounds on the joint loss. The accountant only counts DP
    rounds. Returns (theta, loss trace, accountant).
    """
    if mode not in ("one-stage", "two-stage"):
        raise PrivacyError(f"unknown DP training mode {mode!r}")
    dp.validate()
    clients = list(clients)
    cfg.validate(len(clients))
    q = dp.q if dp.q is not None else cfg.clients_per_round / len(clients)

    theta = theta0
    if mode == "two-stage":
        pretrain_cfg = pretrain_cfg or cfg
        ssl_clients = usable_clients(clients, "ssl-only")
        if len(ssl_clients) < pretrain_cfg.clients_per_round:
            raise FederationError(f"only {len(ssl_clients)} clients have sessions to pretrain on")
        theta, _ = train(ssl_clients, pretrain_cfg, "ssl-only", theta, catalog, progress=progress)
        logger.info("SSL pretraining finished after %d rounds", pretrain_cfg.rounds)

    local_mode = "dssm" if mode == "one-stage" else "joint"
    theta, trace, acc = _dp_rounds(theta, clients, cfg, dp, local_mode, catalog, q, checkpoint_dir, progress)
    if dp.mechanism == "gaussian":
        logger.info("DP training spent epsilon=%.4f at delta=%g", epsilon(acc, dp.delta), dp.delta)
    return theta, trace, acc
