"""Filtered backprojection and virtual mono-energy synthesis.

2D parallel-beam FBP with a Ram-Lak filter (optional Hann apodization);
fan-beam data are rebinned to parallel geometry first.  Material images are
combined pixelwise with tabulated attenuation to form mono-energetic images,
optionally in the modified Hounsfield convention (air 0, water 1000).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ToolkitError
from .geometry import FAN, PARALLEL, ImageGrid, rebin_fan_to_parallel
from .materials import load_material


@dataclass(frozen=True)
class MaterialImage:
    """Fractional-volume image, (n_x, n_y, L); noise may push values negative."""

    values: np.ndarray = field(repr=False)
    grid: ImageGrid = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 3:
            raise ToolkitError("material image: values must be (n_x, n_y, L)")
        if not np.all(np.isfinite(v)):
            raise ToolkitError("material image: values must be finite")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class MonoImage:
    """Virtual mono-energetic image at `energy` keV (1/cm, or HU+1000)."""

    values: np.ndarray = field(repr=False)
    energy: float = 70.0
    hounsfield: bool = False
    grid: ImageGrid = None


def _ramp_response(n_pad: int, spacing: float, hann: bool) -> np.ndarray:
    """Frequency response of the band-limited ramp (spatial-kernel construction)."""
    k = np.zeros(n_pad)
    n = np.arange(1, n_pad // 2, 2)
    k[0] = 1.0 / (4.0 * spacing**2)
    k[n] = -1.0 / (np.pi * n * spacing) ** 2
    k[-n] = -1.0 / (np.pi * n * spacing) ** 2
    resp = np.real(np.fft.fft(k))
    if hann:
        f = np.fft.fftfreq(n_pad)
        resp *= 0.5 * (1.0 + np.cos(2.0 * np.pi * f))
    return resp


def fbp_reconstruct(sino: np.ndarray, geometry, grid: ImageGrid,
                    hann: bool = False) -> np.ndarray:
    """Reconstruct one sinogram channel: (M,) rays -> (n_x, n_y) image.

    Projections are ramp-filtered in the frequency domain (zero-padded to the
    next power of two >= 2x channels) and accumulated by linearly-interpolated
    backprojection in a fixed view order, so outputs are bit-stable.
    """
    sino = np.asarray(sino, dtype=float)
    if geometry.mode == FAN:
        geometry, sino = rebin_fan_to_parallel(sino, geometry)
    if geometry.mode != PARALLEL:
        raise ToolkitError("fbp: unsupported geometry mode")
    v, c = geometry.n_views, geometry.n_channels
    if sino.shape != (v * c,):
        raise ToolkitError(f"fbp: expected {v * c} rays, got {sino.shape}")
    span = np.ptp(geometry.angles)
    if span < np.pi - np.pi / v - 1e-9:
        raise ToolkitError("fbp: insufficient angular coverage (need half a rotation)")
    proj = sino.reshape(v, c)
    n_pad = 1 << int(np.ceil(np.log2(max(2 * c, 4))))
    resp = _ramp_response(n_pad, geometry.spacing, hann)
    filt = np.real(np.fft.ifft(np.fft.fft(proj, n=n_pad, axis=1) * resp[None, :], axis=1))
    filt = filt[:, :c] * geometry.spacing

    xs, ys = grid.pixel_centers()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    s_ch = geometry.channel_offsets()
    img = np.zeros((grid.n_x, grid.n_y))
    for j in range(v):
        theta = geometry.angles[j]
        s_pix = gx * np.cos(theta) + gy * np.sin(theta)
        img += np.interp(s_pix.ravel(), s_ch, filt[j], left=0.0, right=0.0).reshape(img.shape)
    return img * (np.pi / v)


def reconstruct_materials(p_sino: np.ndarray, geometry, grid: ImageGrid,
                          hann: bool = False) -> MaterialImage:
    """FBP each material channel of a pathlength sinogram (M, L)."""
    p_sino = np.asarray(p_sino, dtype=float)
    chans = [fbp_reconstruct(p_sino[:, l], geometry, grid, hann=hann)
             for l in range(p_sino.shape[1])]
    return MaterialImage(values=np.stack(chans, axis=2), grid=grid)


def synthesize_mono(image: MaterialImage, materials, energy_kev: float,
                    hounsfield: bool = False) -> MonoImage:
    """Pixelwise sum of material fractions weighted by attenuation at one energy.

    With `hounsfield`, values are reported as 1000 * mu / mu_water(E), the
    modified scale on which air is 0 and water is 1000.
    """
    if len(materials) != image.values.shape[2]:
        raise ToolkitError("synthesize_mono: one material per image channel required")
    mu = np.array([m.mu_at(energy_kev) for m in materials])
    out = image.values @ mu
    if hounsfield:
        out = 1000.0 * out / load_material("water").mu_at(energy_kev)
    return MonoImage(values=out, energy=float(energy_kev), hounsfield=hounsfield,
                     grid=image.grid)


def basis_change(image: MaterialImage, matrix: np.ndarray) -> MaterialImage:
    """Apply an invertible linear map to each pixel's material-fraction vector."""
    matrix = np.asarray(matrix, dtype=float)
    if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] != image.values.shape[2]:
        raise ToolkitError("basis_change: matrix must be square, one row per material")
    if abs(np.linalg.det(matrix)) < 1e-300:
        raise ToolkitError("basis_change: matrix is singular")
    return MaterialImage(values=image.values @ matrix.T, grid=image.grid)
