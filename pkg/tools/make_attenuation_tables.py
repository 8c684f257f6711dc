#!/usr/bin/env python3
"""Regenerate the bundled linear-attenuation tables.

Each material is modeled as a two-term mixture of a photoelectric-like
component (~1/E^3) and a Compton component with the Klein-Nishina energy
dependence, with the two weights solved from reference mass-attenuation
values at 30 and 80 keV.  This stays within ~2% of standard tabulations
for the light, K-edge-free materials shipped here while guaranteeing a
smooth, gap-free table at 1 keV steps.

Run from the repository root:  python tools/make_attenuation_tables.py
"""

import os

import numpy as np

E_LO, E_HI = 20, 150
E_REF = 60.0
R_E_CM = 2.8179403262e-13
MEC2_KEV = 510.998

# (mu/rho at 30 keV, mu/rho at 80 keV) in cm^2/g, density in g/cm^3
REFERENCE = {
    "polyethylene": (0.2707, 0.1823, 0.940),
    "pvc": (1.6470, 0.2419, 1.400),
    "water": (0.3756, 0.1837, 1.000),
    "air": (0.3538, 0.1662, 0.001205),
    "aluminum": (1.1280, 0.2018, 2.699),
}


def klein_nishina_cross_section(energy_kev):
    k = np.asarray(energy_kev, dtype=float) / MEC2_KEV
    t1 = (1 + k) / k**2 * (2 * (1 + k) / (1 + 2 * k) - np.log(1 + 2 * k) / k)
    t2 = np.log(1 + 2 * k) / (2 * k)
    t3 = (1 + 3 * k) / (1 + 2 * k) ** 2
    return 2 * np.pi * R_E_CM**2 * (t1 + t2 - t3)


def component_basis(energy_kev):
    energy_kev = np.asarray(energy_kev, dtype=float)
    photoelectric = (E_REF / energy_kev) ** 3
    compton = klein_nishina_cross_section(energy_kev) / klein_nishina_cross_section(E_REF)
    return np.stack([photoelectric, compton], axis=-1)


def main():
    out_dir = os.path.join(os.path.dirname(__file__), "..", "src", "pcmd", "data", "attenuation")
    os.makedirs(out_dir, exist_ok=True)
    energies = np.arange(E_LO, E_HI + 1, dtype=float)
    for name, (mu_rho_30, mu_rho_80, density) in REFERENCE.items():
        weights = np.linalg.solve(component_basis([30.0, 80.0]), [mu_rho_30, mu_rho_80])
        mu = density * (component_basis(energies) @ weights)
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w") as fh:
            fh.write(f"# material: {name}\n")
            fh.write(f"# density_g_cm3: {density}\n")
            fh.write("# model: photoelectric (1/E^3) + Klein-Nishina Compton,"
                     " anchored to reference mass attenuation at 30 and 80 keV\n")
            fh.write("# columns: energy_keV  mu_1_per_cm\n")
            for e, m in zip(energies, mu):
                fh.write(f"{e:.0f} {m:.8e}\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
