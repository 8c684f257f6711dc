import numpy as np
import pytest

from pcmd.errors import ToolkitError
from pcmd.geometry import ImageGrid, ScanGeometry, project_image
from pcmd.materials import conversion_matrix, equivalent_fractions, load_material
from pcmd.phantom import Disk, Phantom
from pcmd.recon import (MaterialImage, basis_change, fbp_reconstruct, reconstruct_materials,
                        synthesize_mono)


@pytest.fixture(scope="module")
def desk_geometry():
    return ScanGeometry(mode="parallel", n_views=360, n_channels=256, spacing=0.1)


@pytest.fixture(scope="module")
def desk_grid():
    return ImageGrid(n_x=256, n_y=256, pixel_size=0.1)


def disk_sinogram(geometry, radius=5.0, value=1.0, center=(0.0, 0.0)):
    ph = Phantom(disks=(Disk(center=center, radius=radius, fractions=np.array([value])),),
                 n_materials=1)
    pts, dirs = geometry.all_rays()
    return ph.pathlengths(pts, dirs)[:, 0]


def test_zero_sinogram_reconstructs_to_zero(desk_geometry, desk_grid):
    img = fbp_reconstruct(np.zeros(desk_geometry.n_rays), desk_geometry, desk_grid)
    assert not img.any()


def test_disk_reconstruction_interior_and_exterior(desk_geometry, desk_grid):
    img = fbp_reconstruct(disk_sinogram(desk_geometry), desk_geometry, desk_grid)
    xs, ys = desk_grid.pixel_centers()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    r = np.hypot(gx, gy)
    interior = img[r < 4.0].mean()
    exterior = img[(r > 6.0) & (r < 11.0)].mean()
    assert abs(interior - 1.0) < 0.02
    assert abs(exterior) < 0.02


def test_fbp_linearity(desk_geometry, desk_grid):
    a = disk_sinogram(desk_geometry, radius=4.0)
    b = disk_sinogram(desk_geometry, radius=6.0, center=(2.0, -1.0))
    lhs = fbp_reconstruct(a + b, desk_geometry, desk_grid)
    rhs = fbp_reconstruct(a, desk_geometry, desk_grid) \
        + fbp_reconstruct(b, desk_geometry, desk_grid)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_hann_window_reduces_noise(desk_geometry, desk_grid):
    rng = np.random.default_rng(0)
    noisy = disk_sinogram(desk_geometry) + rng.normal(0, 0.1, desk_geometry.n_rays)
    sharp = fbp_reconstruct(noisy, desk_geometry, desk_grid, hann=False)
    soft = fbp_reconstruct(noisy, desk_geometry, desk_grid, hann=True)
    assert soft.std() < sharp.std()


def test_insufficient_angular_coverage_rejected(desk_grid):
    geo = ScanGeometry(mode="parallel", n_views=90, n_channels=64, spacing=0.4,
                       angles=np.linspace(0, np.pi / 2, 90, endpoint=False))
    with pytest.raises(ToolkitError, match="angular coverage"):
        fbp_reconstruct(np.zeros(geo.n_rays), geo, desk_grid)


def test_fan_beam_reconstruction_via_rebinning(desk_grid):
    fan = ScanGeometry(mode="fan", n_views=720, n_channels=257, spacing=0.17,
                       sid=40.0, sdd=80.0)
    img = fbp_reconstruct(disk_sinogram(fan), fan, desk_grid)
    xs, ys = desk_grid.pixel_centers()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    r = np.hypot(gx, gy)
    assert abs(img[r < 4.0].mean() - 1.0) < 0.03
    assert abs(img[(r > 6.0) & (r < 11.0)].mean()) < 0.02


def test_project_then_fbp_round_trip_on_smooth_phantom(desk_geometry, desk_grid):
    xs, ys = desk_grid.pixel_centers()
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    smooth = np.exp(-(gx**2 + gy**2) / (2.0 * 3.0**2))
    sino = project_image(smooth, desk_geometry, desk_grid)
    back = fbp_reconstruct(sino, desk_geometry, desk_grid)
    rel = np.linalg.norm(back - smooth) / np.linalg.norm(smooth)
    assert rel <= 0.05


def test_mono_zero_image_is_air(basis_materials, desk_grid):
    img = MaterialImage(values=np.zeros((8, 8, 2)), grid=desk_grid)
    mono = synthesize_mono(img, basis_materials, 70.0, hounsfield=True)
    assert not mono.values.any()


def test_mono_pure_water_equivalent_pixel_is_1000(basis_materials, desk_grid):
    frac = equivalent_fractions(load_material("water"), basis_materials)
    img = MaterialImage(values=np.tile(frac, (4, 4, 1)), grid=desk_grid)
    mono = synthesize_mono(img, basis_materials, 70.0, hounsfield=True)
    assert np.abs(mono.values - 1000.0).max() < 2.0  # limited by the basis-mix residual


def test_mono_basis_identity(basis_materials, desk_grid):
    x = np.zeros((3, 3, 2))
    x[:, :, 0] = 1.0
    mono = synthesize_mono(MaterialImage(values=x, grid=desk_grid), basis_materials, 70.0)
    assert np.allclose(mono.values, basis_materials[0].mu_at(70.0), rtol=1e-14)


def test_mono_energy_outside_tables_rejected(basis_materials, desk_grid):
    img = MaterialImage(values=np.zeros((2, 2, 2)), grid=desk_grid)
    with pytest.raises(ToolkitError, match="outside tabulated range"):
        synthesize_mono(img, basis_materials, 200.0)


def test_water_density_1p01_displays_ten_units_above_water(basis_materials, desk_grid):
    frac = equivalent_fractions(load_material("water"), basis_materials)
    img = MaterialImage(values=np.tile(1.01 * frac, (2, 2, 1)), grid=desk_grid)
    for energy in (50.0, 70.0, 100.0):
        mono = synthesize_mono(img, basis_materials, energy, hounsfield=True)
        assert np.abs(mono.values - 1010.0).max() < 0.02 * 1010.0


def test_basis_change_identity_and_roundtrip(desk_grid):
    rng = np.random.default_rng(1)
    img = MaterialImage(values=rng.normal(size=(6, 5, 2)), grid=desk_grid)
    assert np.array_equal(basis_change(img, np.eye(2)).values, img.values)
    m = np.array([[1.3, -0.4], [0.2, 0.9]])
    back = basis_change(basis_change(img, m), np.linalg.inv(m))
    assert np.abs(back.values - img.values).max() < 1e-12


def test_basis_change_singular_matrix_rejected(desk_grid):
    img = MaterialImage(values=np.zeros((2, 2, 2)), grid=desk_grid)
    with pytest.raises(ToolkitError, match="singular"):
        basis_change(img, np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_basis_change_preserves_mono_at_matched_energies(basis_materials, desk_grid):
    rng = np.random.default_rng(2)
    img = MaterialImage(values=rng.uniform(0, 1, size=(7, 7, 2)), grid=desk_grid)
    target = [load_material("water"), load_material("pvc")]
    energies = (50.0, 100.0)
    m = conversion_matrix(basis_materials, target, energies)
    changed = basis_change(img, m)
    for e in energies:
        mono_a = synthesize_mono(img, basis_materials, e)
        mono_b = synthesize_mono(changed, target, e)
        assert np.abs(mono_a.values - mono_b.values).max() < 1e-10


def test_mono_commutes_with_basis_change(basis_materials, desk_grid):
    # transforming fractions by M and attenuation vectors by M^-T leaves mono fixed
    rng = np.random.default_rng(3)
    img = MaterialImage(values=rng.normal(size=(5, 5, 2)), grid=desk_grid)
    m = np.array([[1.1, 0.3], [-0.2, 0.8]])
    mu = np.array([mat.mu_at(70.0) for mat in basis_materials])
    direct = img.values @ mu
    transformed = basis_change(img, m).values @ np.linalg.solve(m.T, mu)
    assert np.abs(direct - transformed).max() < 1e-10


def test_reconstruct_materials_shapes(desk_geometry, desk_grid, basis_materials):
    sino = np.zeros((desk_geometry.n_rays, 2))
    img = reconstruct_materials(sino, desk_geometry, desk_grid)
    assert img.values.shape == (256, 256, 2)
