"""Material decomposition solvers.

`mle_decompose` runs a per-projection grid search over the calibration
domain followed by prox refinements with a large sigma (a Newton-like
maximum-likelihood polish).  `run_mace` balances the detector agent against
a prior agent with the relaxed Mann iteration

    p1 <- 2H(p) - p ; p' <- F(p1) ; p1 <- 2p' - p1 ; p <- (1-rho)p + rho*p1

returning the final detector-agent output p'.  Each F application is the
partial-update proximal map warm-started at the previous F output.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .detector import ProxParams, _exp_neg, detector_agent_apply
from .errors import NumericError, ToolkitError
from .priors import apply_prior, clip_prior

_DIVERGED_SPAN_FACTOR = 1.0  # rows beyond domain inflated by one full span are suspect


@dataclass(frozen=True)
class MleConfig:
    """Grid-search initialization plus refinement settings for the MLE."""

    grid_points: tuple = (41, 41)
    n_iter: int = 100
    sigma: float = 1.0e3
    n_sub: int = 1
    epsilon: float = 1.0e-3

    def __post_init__(self):
        if self.n_iter < 1:
            raise ToolkitError("mle config: need at least one refinement iteration")
        if any(g < 1 for g in self.grid_points):
            raise ToolkitError("mle config: grid needs at least one point per material")


@dataclass(frozen=True)
class MaceConfig:
    """Equilibrium solver settings: step rho, iteration count, prox strength, prior."""

    prior: object
    rho: float = 0.8
    n_iter: int = 20
    sigma: float = 1.0
    n_sub: int = 1
    epsilon: float = 1.0e-3
    init: object = None  # MleConfig, explicit (M, L) sinogram, or None for default MLE

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise ToolkitError("mace config: rho must lie strictly inside (0, 1)")
        if self.n_iter < 1:
            raise ToolkitError("mace config: need at least one iteration")


@dataclass
class SolveResult:
    p: np.ndarray
    residuals: list = field(default_factory=list)
    consensus: np.ndarray = None
    flagged_rows: np.ndarray = None
    seconds: float = 0.0


def equilibrium_residual(f_out: np.ndarray, h_out: np.ndarray) -> float:
    """Relative disagreement ||F_out - H_out|| / ||H_out|| of the two agents."""
    denom = float(np.linalg.norm(h_out))
    diff = float(np.linalg.norm(np.asarray(f_out) - np.asarray(h_out)))
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / denom


def mann_iterate(p_init: np.ndarray, f_agent, h_agent, rho: float, n_iter: int):
    """Relaxed fixed-point iteration over two agents; returns a SolveResult.

    `f_agent` and `h_agent` map arrays to arrays of the same shape.  The
    returned `p` is the final F output; `consensus` is the final relaxed
    state, and `residuals` tracks the per-iteration agent disagreement.
    """
    p = np.array(p_init, dtype=float, copy=True)
    p_f = p
    residuals = []
    for i in range(n_iter):
        h_out = h_agent(p)
        p1 = 2.0 * h_out - p
        p_f = f_agent(p1)
        p1 = 2.0 * p_f - p1
        p = (1.0 - rho) * p + rho * p1
        if not np.all(np.isfinite(p)):
            raise NumericError(f"mace: non-finite state at iteration {i}")
        residuals.append(equilibrium_residual(p_f, h_out))
    return SolveResult(p=p_f, residuals=residuals, consensus=p)


def _grid_search(t_sino: np.ndarray, drf, grid_points) -> np.ndarray:
    """Exhaustive minimization of sum_k exp(-phi_k) + phi_k * t_k per row."""
    axes = [np.linspace(lo, up, n) for lo, up, n in
            zip(drf.domain.lower, drf.domain.upper, grid_points)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)        # (G, L)
    m_rows = t_sino.shape[0]
    if drf.n_channels == 1:
        phi = drf.eval(pts, channel=0)                        # (G, K)
        att = _exp_neg(phi).sum(axis=1)                       # (G,)
        loss = att[None, :] + t_sino @ phi.T                  # (M, G)
        best = np.argmin(loss, axis=1)
        return pts[best]
    n_chan = drf.n_channels
    if m_rows % n_chan:
        raise ToolkitError("mle: sinogram rows not divisible by channel count")
    out = np.empty((m_rows, pts.shape[1]))
    phi_c = np.stack([drf.eval(pts, channel=c) for c in range(n_chan)])  # (C, G, K)
    att_c = _exp_neg(phi_c).sum(axis=2)                       # (C, G)
    n_views = m_rows // n_chan
    t3 = t_sino.reshape(n_views, n_chan, -1)
    for v in range(n_views):
        loss = att_c + np.einsum("ck,cgk->cg", t3[v], phi_c)
        out[v * n_chan:(v + 1) * n_chan] = pts[np.argmin(loss, axis=1)]
    return out


def _diverged_rows(p: np.ndarray, domain) -> np.ndarray:
    lo = domain.lower - _DIVERGED_SPAN_FACTOR * domain.span
    up = domain.upper + _DIVERGED_SPAN_FACTOR * domain.span
    bad = ~np.all(np.isfinite(p), axis=1)
    bad |= np.any((p < lo) | (p > up), axis=1)
    return np.nonzero(bad)[0]


def mle_decompose(t_sino: np.ndarray, air_totals: np.ndarray, drf,
                  cfg: MleConfig = MleConfig()) -> SolveResult:
    """Maximum-likelihood pathlengths per projection row.

    Grid search over the calibration domain seeds `cfg.n_iter` partial-update
    refinements with both the tether and the linearization at the current
    iterate.  Rows that leave twice the calibration domain (or go non-finite)
    are re-run through the equilibrium solver with a clip prior.
    """
    t_sino = np.atleast_2d(np.asarray(t_sino, dtype=float))
    air = np.broadcast_to(np.asarray(air_totals, dtype=float), (t_sino.shape[0],))
    t0 = time.perf_counter()
    p0 = _grid_search(t_sino, drf, cfg.grid_points)
    p = p0.copy()
    params = ProxParams(sigma=cfg.sigma, n_sub=cfg.n_sub, epsilon=cfg.epsilon)
    for _ in range(cfg.n_iter):
        p = detector_agent_apply(p, t_sino, air, drf, params, p_prime=p,
                                 on_nonfinite="hold")
    flagged = _diverged_rows(p, drf.domain)
    if flagged.size:
        channels = (flagged % drf.n_channels) if drf.n_channels > 1 else np.zeros_like(flagged)
        # moderate prox strength here: the refinement sigma is deliberately huge
        # and would let the rescue's detector steps overshoot the clip prior
        sub_mace = MaceConfig(prior=clip_prior(drf.domain), rho=0.8, n_iter=25,
                              sigma=1.0, n_sub=1, epsilon=cfg.epsilon)
        redo = _run_mace_rows(t_sino[flagged], air[flagged], drf, sub_mace,
                              p_init=p0[flagged], sino_shape=(flagged.size, 1),
                              channels=channels)
        p[flagged] = redo.p
    return SolveResult(p=p, flagged_rows=flagged, seconds=time.perf_counter() - t0)


def _run_mace_rows(t_sino, air, drf, cfg: MaceConfig, p_init, sino_shape, channels=None):
    params = ProxParams(sigma=cfg.sigma, n_sub=cfg.n_sub, epsilon=cfg.epsilon)
    state = {"p_prime": np.array(p_init, dtype=float, copy=True)}

    def f_agent(q):
        out = detector_agent_apply(q, t_sino, air, drf, params,
                                   p_prime=state["p_prime"], channels=channels)
        state["p_prime"] = out
        return out

    def h_agent(q):
        return apply_prior(cfg.prior, q, sino_shape)

    return mann_iterate(p_init, f_agent, h_agent, cfg.rho, cfg.n_iter)


def run_mace(t_sino: np.ndarray, air_totals: np.ndarray, drf, cfg: MaceConfig,
             sino_shape=None) -> SolveResult:
    """Consensus-equilibrium decomposition of a transmission sinogram.

    `sino_shape` (n_views, n_channels) tells the prior how to lay rows out in
    the sinogram plane; it defaults to a single row of channels.  `cfg.init`
    may be an MleConfig (default: MleConfig(n_iter=15)), or an explicit
    starting sinogram.
    """
    t_sino = np.atleast_2d(np.asarray(t_sino, dtype=float))
    air = np.broadcast_to(np.asarray(air_totals, dtype=float), (t_sino.shape[0],))
    if sino_shape is None:
        sino_shape = (1, t_sino.shape[0])
    if sino_shape[0] * sino_shape[1] != t_sino.shape[0]:
        raise ToolkitError("mace: sino_shape does not match row count")
    t0 = time.perf_counter()
    init = cfg.init
    if init is None:
        init = MleConfig(n_iter=15)
    if isinstance(init, MleConfig):
        p_init = mle_decompose(t_sino, air, drf, init).p
    else:
        p_init = np.asarray(init, dtype=float)
        if p_init.shape != (t_sino.shape[0], drf.n_materials):
            raise ToolkitError("mace: init sinogram shape mismatch")
    result = _run_mace_rows(t_sino, air, drf, cfg, p_init, sino_shape)
    result.seconds = time.perf_counter() - t0
    return result
