"""Polynomial detector response calibration.

The detector response function (DRF) maps basis-material pathlengths p to
per-bin values phi(p) = -log(lambda(p) / lambda_air_total).  It is measured
on a slab grid and fitted, per detector channel and bin, as a tensor-product
polynomial of order P in each material coordinate.  Coefficients are stored
against an explicit basis descriptor (monomials in pathlengths divided by a
per-material scale) so evaluation is unambiguous; the scaled basis keeps the
order-4 fit well-conditioned over the full 0-40 cm x 0-5 cm domain.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .arrayio import array_from_bytes, array_to_bytes
from .errors import NumericError, PhotonStarvationError, ToolkitError
from .simulate import expected_counts, sample_poisson


@dataclass(frozen=True)
class CalibrationDomain:
    """Per-material pathlength bounds (cm) spanned by the calibration."""

    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        up = np.asarray(self.upper, dtype=float)
        if lo.shape != up.shape or lo.ndim != 1:
            raise ToolkitError("calibration domain: lower/upper must be equal-length vectors")
        if np.any(lo > up):
            raise ToolkitError("calibration domain: lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def n_materials(self) -> int:
        return self.lower.size

    @property
    def span(self) -> np.ndarray:
        return self.upper - self.lower

    def clip(self, p: np.ndarray) -> np.ndarray:
        return np.clip(p, self.lower, self.upper)


DEFAULT_DOMAIN = CalibrationDomain(lower=np.zeros(2), upper=np.array([40.0, 5.0]))


@dataclass(frozen=True)
class CalibrationDesign:
    """Slab pathlength grid: points (S, L) in cm, plus repeat count per point."""

    pathlength_points: np.ndarray = field(repr=False)
    repeats_per_point: int = 100

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.pathlength_points, dtype=float))
        if self.repeats_per_point < 1:
            raise ToolkitError("calibration design: repeats must be >= 1")
        object.__setattr__(self, "pathlength_points", pts)

    @property
    def n_points(self) -> int:
        return self.pathlength_points.shape[0]


def default_design(domain: CalibrationDomain = DEFAULT_DOMAIN, points_per_axis=(9, 9),
                   repeats: int = 100) -> CalibrationDesign:
    """Regular grid over the domain, including 0 and the per-material maxima."""
    axes = [np.linspace(lo, up, n) for lo, up, n in
            zip(domain.lower, domain.upper, points_per_axis)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return CalibrationDesign(pathlength_points=pts, repeats_per_point=repeats)


def _monomial_powers(order: int, n_materials: int) -> np.ndarray:
    """Exponent tuples for the tensor-product basis, (n_coef, L)."""
    grids = np.meshgrid(*[np.arange(order + 1)] * n_materials, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


@dataclass(frozen=True)
class DrfPolynomial:
    """Per-channel polynomial detector response phi(p) and its gradient.

    `theta` has shape (n_channels, K, n_coef) with n_coef = (order+1)^L;
    coefficient j multiplies prod_l (p_l / basis_scale_l) ** powers[j, l].
    A single-channel model (n_channels = 1) applies to every sinogram row.
    """

    theta: np.ndarray = field(repr=False)
    order: int
    n_materials: int
    domain: CalibrationDomain
    basis_scale: np.ndarray = field(repr=False)
    bin_edges: np.ndarray = field(repr=False, default=None)
    fit_residual: float = float("nan")

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=float)
        if theta.ndim == 2:
            theta = theta[None]
        n_coef = (self.order + 1) ** self.n_materials
        if theta.ndim != 3 or theta.shape[2] != n_coef:
            raise ToolkitError(f"drf: theta must be (channels, bins, {n_coef})")
        if not np.all(np.isfinite(theta)):
            raise ToolkitError("drf: coefficients must be finite")
        scale = np.asarray(self.basis_scale, dtype=float)
        if scale.shape != (self.n_materials,) or np.any(scale <= 0):
            raise ToolkitError("drf: basis scale must be positive per material")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "basis_scale", scale)
        object.__setattr__(self, "_powers", _monomial_powers(self.order, self.n_materials))
        if self.bin_edges is not None:
            object.__setattr__(self, "bin_edges", np.asarray(self.bin_edges, dtype=float))

    @property
    def n_channels(self) -> int:
        return self.theta.shape[0]

    @property
    def n_bins(self) -> int:
        return self.theta.shape[1]

    def _basis(self, p: np.ndarray) -> np.ndarray:
        """Monomial values, shape p.shape[:-1] + (n_coef,)."""
        s = p / self.basis_scale
        pw = self._powers  # (n_coef, L)
        out = np.ones(p.shape[:-1] + (pw.shape[0],))
        for l in range(self.n_materials):
            out *= s[..., l, None] ** pw[:, l]
        return out

    def _basis_grad(self, p: np.ndarray) -> np.ndarray:
        """d(basis)/dp, shape p.shape[:-1] + (n_coef, L)."""
        s = p / self.basis_scale
        pw = self._powers
        out = np.ones(p.shape[:-1] + pw.shape)
        for l in range(self.n_materials):
            col = s[..., l, None]
            for m in range(self.n_materials):
                e = pw[:, l] - (1 if m == l else 0)
                term = np.where(e < 0, 0.0, col ** np.maximum(e, 0))
                if m == l:
                    term = term * pw[:, l] / self.basis_scale[l]
                out[..., m] *= term
        return out

    def eval(self, p, channel: int = 0) -> np.ndarray:
        """phi(p) for one detector channel; p is (..., L), result (..., K)."""
        p = np.asarray(p, dtype=float)
        return self._basis(p) @ self.theta[channel].T

    def grad(self, p, channel: int = 0) -> np.ndarray:
        """Exact Jacobian d phi / dp, shape (..., K, L)."""
        p = np.asarray(p, dtype=float)
        bg = self._basis_grad(p)  # (..., n_coef, L)
        return np.einsum("kc,...cl->...kl", self.theta[channel], bg)

    def _channel_theta(self, n_rows: int, channels) -> np.ndarray:
        if self.n_channels == 1:
            return None
        if channels is None:
            if n_rows % self.n_channels:
                raise ToolkitError("drf: sinogram rows not divisible by channel count")
            return None
        return np.asarray(channels, dtype=int)

    def eval_sino(self, p: np.ndarray, channels=None) -> np.ndarray:
        """phi for a stack of projection rows (M, L) -> (M, K).

        Without explicit `channels` the rows are assumed row-major
        (view, channel) over all detector channels.
        """
        p = np.asarray(p, dtype=float)
        basis = self._basis(p)  # (M, n_coef)
        ch = self._channel_theta(p.shape[0], channels)
        if self.n_channels == 1:
            return basis @ self.theta[0].T
        if ch is not None:
            return np.einsum("mc,mkc->mk", basis, self.theta[ch])
        c = self.n_channels
        v = p.shape[0] // c
        b = basis.reshape(v, c, -1).transpose(1, 0, 2)          # (C, V, n_coef)
        out = np.matmul(b, self.theta.transpose(0, 2, 1))       # (C, V, K)
        return out.transpose(1, 0, 2).reshape(p.shape[0], -1)

    def grad_sino(self, p: np.ndarray, channels=None) -> np.ndarray:
        """Jacobians for a stack of rows (M, L) -> (M, K, L)."""
        p = np.asarray(p, dtype=float)
        bg = self._basis_grad(p)  # (M, n_coef, L)
        ch = self._channel_theta(p.shape[0], channels)
        if self.n_channels == 1:
            return np.einsum("kc,mcl->mkl", self.theta[0], bg)
        if ch is not None:
            return np.einsum("mkc,mcl->mkl", self.theta[ch], bg)
        c = self.n_channels
        v = p.shape[0] // c
        out = np.empty((v, c, self.n_bins, self.n_materials))
        bgr = bg.reshape(v, c, bg.shape[1], bg.shape[2])
        for l in range(self.n_materials):
            g = bgr[..., l].transpose(1, 0, 2)                   # (C, V, n_coef)
            out[..., l] = np.matmul(g, self.theta.transpose(0, 2, 1)).transpose(1, 0, 2)
        return out.reshape(p.shape[0], self.n_bins, self.n_materials)


def measure_drf(mean_counts: np.ndarray, air_total: float) -> np.ndarray:
    """Empirical DRF samples: -log of air-normalized mean counts.

    `mean_counts` is (S, K) or (channels, S, K); zero counts indicate photon
    starvation and raise, naming the offending (point, bin).
    """
    counts = np.asarray(mean_counts, dtype=float)
    if air_total <= 0:
        raise ToolkitError("measure_drf: air total must be positive")
    bad = np.argwhere(counts <= 0)
    if bad.size:
        where = tuple(int(i) for i in bad[0])
        raise PhotonStarvationError(
            f"measure_drf: zero mean counts at point/bin {where}; "
            "increase dose or repeats for this slab point"
        )
    return -np.log(counts / air_total)


def fit_drf(points: np.ndarray, phi_hat: np.ndarray, order: int = 4,
            domain: CalibrationDomain = DEFAULT_DOMAIN, bin_edges=None,
            basis: str = "scaled") -> DrfPolynomial:
    """Least-squares polynomial fit of measured DRF samples.

    `points` is (S, L) with matching `phi_hat` (S, K) for a single channel,
    or (C, S, L) with (C, S, K) for per-channel fits.  Requires at least
    (order+1)^L distinct points and a full-rank design.
    """
    points = np.asarray(points, dtype=float)
    phi_hat = np.asarray(phi_hat, dtype=float)
    if points.ndim == 2:
        points, phi_hat = points[None], phi_hat[None]
    n_chan, n_pts, n_mat = points.shape
    n_coef = (order + 1) ** n_mat
    if n_pts < n_coef:
        raise NumericError(
            f"fit_drf: {n_pts} sample points cannot determine {n_coef} coefficients"
        )
    if basis == "scaled":
        scale = np.where(domain.upper > 0, domain.upper, 1.0)
    elif basis == "raw":
        scale = np.ones(n_mat)
    else:
        raise ToolkitError(f"fit_drf: unknown basis {basis!r}")
    probe = DrfPolynomial(theta=np.zeros((1, 1, n_coef)), order=order, n_materials=n_mat,
                          domain=domain, basis_scale=scale)
    theta = np.empty((n_chan, phi_hat.shape[2], n_coef))
    worst = 0.0
    for c in range(n_chan):
        design = probe._basis(points[c])
        coef, _, rank, _ = np.linalg.lstsq(design, phi_hat[c], rcond=None)
        if rank < n_coef:
            raise NumericError(
                f"fit_drf: rank-deficient design (rank {rank} < {n_coef}); "
                "add or spread calibration points"
            )
        theta[c] = coef.T
        worst = max(worst, float(np.abs(design @ coef - phi_hat[c]).max()))
    return DrfPolynomial(theta=theta, order=order, n_materials=n_mat, domain=domain,
                         basis_scale=scale, bin_edges=bin_edges, fit_residual=worst)


@dataclass(frozen=True)
class SlabScans:
    """Averaged slab-scan measurements ready for measure_drf/fit_drf."""

    points: np.ndarray = field(repr=False)       # (C, S, L) effective pathlengths
    mean_counts: np.ndarray = field(repr=False)  # (C, S, K)
    air_total: float = 0.0


def slab_scan_protocol(spectrum, materials, design: CalibrationDesign, geometry,
                       air_counts_total: float = 1.0e6, noise: bool = True,
                       seed: int = 0) -> SlabScans:
    """Simulate the slab calibration protocol for every detector channel.

    Slabs sit perpendicular to the iso-ray, so the channel at fan angle gamma
    sees an effective pathlength p_s / cos(gamma).  Each design point is
    scanned `repeats_per_point` times and averaged; the average of R
    independent Poisson(lam) draws is sampled as Poisson(R * lam) / R, which
    has the identical distribution.
    """
    dose = air_counts_total / spectrum.total_fluence
    gamma = geometry.fan_angles()
    n_chan = geometry.n_channels
    pts = design.pathlength_points                       # (S, L)
    eff = pts[None, :, :] / np.cos(gamma)[:, None, None]  # (C, S, L)
    lam = expected_counts(spectrum, materials, eff.reshape(-1, pts.shape[1]), dose)
    lam = lam.reshape(n_chan, design.n_points, -1)
    if noise:
        rep = design.repeats_per_point
        total = sample_poisson((rep * lam).reshape(n_chan * design.n_points, -1), seed)
        mean = total.reshape(lam.shape).astype(float) / rep
    else:
        mean = lam
    return SlabScans(points=eff, mean_counts=mean, air_total=air_counts_total)


def calibrate_drf(spectrum, materials, design: CalibrationDesign, geometry,
                  order: int = 4, domain: CalibrationDomain = DEFAULT_DOMAIN,
                  air_counts_total: float = 1.0e6, noise: bool = True,
                  seed: int = 0) -> DrfPolynomial:
    """Full calibration: slab scans -> empirical DRF -> per-channel fit."""
    scans = slab_scan_protocol(spectrum, materials, design, geometry,
                               air_counts_total=air_counts_total, noise=noise, seed=seed)
    phi_hat = measure_drf(scans.mean_counts, scans.air_total)
    return fit_drf(scans.points, phi_hat, order=order, domain=domain,
                   bin_edges=spectrum.bin_edges)


# --- calibration container: structured-text header + binary coefficients ---

_HEADER_SENTINEL = b"\n\x00"


def save_calibration(path, drf: DrfPolynomial):
    meta = {
        "format": "PCMD-CAL",
        "version": 1,
        "order": drf.order,
        "n_materials": drf.n_materials,
        "n_channels": drf.n_channels,
        "n_bins": drf.n_bins,
        "basis": {"kind": "monomial", "scale": drf.basis_scale.tolist()},
        "domain": {"lower": drf.domain.lower.tolist(), "upper": drf.domain.upper.tolist()},
        "bin_edges": None if drf.bin_edges is None else drf.bin_edges.tolist(),
        "fit_residual": None if np.isnan(drf.fit_residual) else drf.fit_residual,
    }
    blob = array_to_bytes(drf.theta, labels=["channel", "bin", "coefficient"])
    with open(path, "wb") as fh:
        fh.write(json.dumps(meta, indent=1).encode("utf-8"))
        fh.write(_HEADER_SENTINEL)
        fh.write(blob)


def load_calibration(path) -> DrfPolynomial:
    with open(path, "rb") as fh:
        buf = fh.read()
    cut = buf.find(_HEADER_SENTINEL)
    if cut < 0:
        raise ToolkitError(f"{path}: not a calibration container")
    meta = json.loads(buf[:cut].decode("utf-8"))
    if meta.get("format") != "PCMD-CAL" or meta.get("version") != 1:
        raise ToolkitError(f"{path}: unsupported calibration format/version")
    theta, _ = array_from_bytes(buf[cut + len(_HEADER_SENTINEL):])
    domain = CalibrationDomain(lower=np.asarray(meta["domain"]["lower"]),
                               upper=np.asarray(meta["domain"]["upper"]))
    edges = meta.get("bin_edges")
    resid = meta.get("fit_residual")
    return DrfPolynomial(theta=theta, order=meta["order"], n_materials=meta["n_materials"],
                         domain=domain, basis_scale=np.asarray(meta["basis"]["scale"]),
                         bin_edges=None if edges is None else np.asarray(edges),
                         fit_residual=float("nan") if resid is None else float(resid))
