import numpy as np
import pytest

import dsct


@pytest.fixture(scope="session")
def small_setup():
    """Shared 64x64 scan: 30 angles, 64 detector elements, same FOV as the
    default geometry (l_d scaled to keep the detector half-length)."""
    geom = dsct.FanBeamGeometry(n_s=30, n_d=64, l_d=0.8)
    grid = dsct.grid_for_fov(geom, 64)
    matrix = dsct.build_projection_matrix(geom, grid)
    return geom, grid, matrix


@pytest.fixture(scope="session")
def tables():
    s_low = dsct.normalize(dsct.bundled_spectrum("low"))
    s_high = dsct.normalize(dsct.bundled_spectrum("high"))
    mats = dsct.bundled_materials()
    return s_low, s_high, mats


@pytest.fixture(scope="session")
def mono_tables():
    """Two single-bin spectra at 40 and 80 keV with the bundled curves."""
    mats = dsct.bundled_materials()
    specs = []
    for kev in (40.0, 80.0):
        specs.append(dsct.SpectrumTable(
            energies=np.array([kev]), weights=np.array([1.0]),
            delta_e=1.0, label=f"mono{int(kev)}"))
    return specs[0], specs[1], mats
