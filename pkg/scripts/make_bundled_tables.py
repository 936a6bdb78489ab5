"""Regenerate the approximate bundled spectra and material tables.

The spectra are filtered Kramers bremsstrahlung shapes (photon fluence
proportional to (E_max - E) / E) behind 1 mm of copper (0.896 g/cm^2),
with tungsten K lines added to the 140 kV table.  Attenuation curves are
log-log interpolations of coarse published anchors for copper, water and
cortical bone, in cm^2/g.  Good enough for simulation studies; not
dosimetry grade.  Run from the repo root:

    python3 scripts/make_bundled_tables.py
"""

import os

import numpy as np

OUT_DIR = os.path.join(os.path.dirname(__file__), "..", "src", "dsct", "data")

CU_AREAL_DENSITY = 0.896  # 1 mm * 8.96 g/cm^3

# mass attenuation anchors, (keV, cm^2/g)
CU_MU = [(10, 215.9), (15, 74.05), (20, 33.79), (30, 10.92), (40, 4.862),
         (50, 2.613), (60, 1.593), (80, 0.763), (100, 0.4584), (150, 0.2217)]
WATER_MU = [(10, 5.329), (15, 1.673), (20, 0.8096), (30, 0.3756), (40, 0.2683),
            (50, 0.2269), (60, 0.2059), (80, 0.1837), (100, 0.1707), (150, 0.1505)]
BONE_MU = [(10, 28.51), (15, 9.032), (20, 4.001), (30, 1.331), (40, 0.6655),
           (50, 0.4242), (60, 0.3148), (80, 0.2229), (100, 0.1855), (150, 0.1480)]

# tungsten K lines: (keV bin, fraction of the filtered continuum fluence)
W_LINES = [(58, 0.05), (59, 0.10), (67, 0.03), (69, 0.015)]


def loglog_interp(e, anchors):
    ea = np.array([a[0] for a in anchors], float)
    va = np.array([a[1] for a in anchors], float)
    return np.exp(np.interp(np.log(e), np.log(ea), np.log(va)))


def filtered_kramers(e_max, energies):
    e = np.asarray(energies, float)
    shape = np.where(e < e_max, (e_max - e) / e, 0.0)
    trans = np.exp(-loglog_interp(e, CU_MU) * CU_AREAL_DENSITY)
    w = shape * trans
    w[w < 1e-12 * w.max()] = 0.0
    return w


def spectrum_csv(path, energies, weights):
    with open(path, "w") as fh:
        fh.write("energy_kev,weight\n")
        for e, w in zip(energies, weights):
            fh.write(f"{e:g},{w:.9g}\n")
    print(f"wrote {path} ({np.count_nonzero(weights)} nonzero bins)")


def main():
    os.makedirs(OUT_DIR, exist_ok=True)

    e80 = np.arange(10, 81, dtype=float)
    w80 = filtered_kramers(80.0, e80)
    spectrum_csv(os.path.join(OUT_DIR, "spectrum_80kv_approx.csv"), e80, w80)

    e140 = np.arange(10, 141, dtype=float)
    w140 = filtered_kramers(140.0, e140)
    total = w140.sum()
    for line_e, frac in W_LINES:
        w140[int(line_e - e140[0])] += frac * total
    spectrum_csv(os.path.join(OUT_DIR, "spectrum_140kv_approx.csv"), e140, w140)

    em = np.arange(10, 151, dtype=float)
    phi = loglog_interp(em, BONE_MU)
    theta = loglog_interp(em, WATER_MU)
    path = os.path.join(OUT_DIR, "materials_bone_water_approx.csv")
    with open(path, "w") as fh:
        fh.write("energy_kev,phi,theta\n")
        for e, p, t in zip(em, phi, theta):
            fh.write(f"{e:g},{p:.6g},{t:.6g}\n")
    print(f"wrote {path} ({em.size} rows)")


if __name__ == "__main__":
    main()
