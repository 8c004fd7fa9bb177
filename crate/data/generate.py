#!/usr/bin/env python3
"""Regenerate the bundled datasets.

Run from the repository root:  python3 data/generate.py

Outputs (committed to the repository; see data/README.md for provenance):
  data/breast_cancer.csv  real Wisconsin Diagnostic Breast Cancer data
                          (via scikit-learn), response `malignant`
  data/asteroid.csv       synthetic near-Earth-object catalogue, response `pho`
  data/spam.csv           synthetic email word/character-frequency features,
                          response `spam`
  data/exoplanet.csv      synthetic exoplanet catalogue with physically
                          consistent columns (mass = R^3 * density up to ~1%
                          oblateness scatter; Kepler orbits; main-sequence
                          host-star relations), responses used downstream:
                          `PlanetaryMassJpt`, `SemiMajorAxisAU`

The script is deterministic (fixed RNG seeds) and prints a few sanity
diagnostics (plain logistic-regression accuracy, law-feature R^2).
"""

import numpy as np
import os

HERE = os.path.dirname(os.path.abspath(__file__))


def write_csv(path, header, columns):
    n = len(columns[0])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(n):
            fh.write(",".join(fmt(col[i]) for col in columns) + "\n")
    print(f"wrote {path} ({n} rows x {len(header)} cols)")


def fmt(v):
    if float(v) == int(v) and abs(v) < 1e15:
        return str(int(v))
    return f"{v:.6g}"


# ---------------------------------------------------------------- breast ---
def gen_breast():
    from sklearn.datasets import load_breast_cancer

    data = load_breast_cancer()
    names = [n.replace(" ", "_") for n in data.feature_names]
    malignant = (data.target == 0).astype(int)  # sklearn codes malignant as 0
    cols = [data.data[:, j] for j in range(data.data.shape[1])] + [malignant]
    write_csv(os.path.join(HERE, "breast_cancer.csv"), names + ["malignant"], cols)
    print(f"  benign={int((1 - malignant).sum())} malignant={int(malignant.sum())}")


# -------------------------------------------------------------- asteroid ---
def gen_asteroid():
    rng = np.random.default_rng(20160417)
    n = 20766
    frac_pho = 0.035
    frac_border = 0.0008
    u = rng.random(n)
    pho = (u < frac_pho).astype(int)
    border = (u >= frac_pho) & (u < frac_pho + frac_border)
    pho[border] = rng.integers(0, 2, border.sum())

    is_p = pho == 1
    a = np.where(is_p, rng.normal(1.02, 0.15, n), rng.normal(2.65, 0.50, n))
    a = np.clip(a, 0.62, 4.4)
    e = np.where(is_p, 0.25 + rng.beta(6, 5, n) * 0.6, rng.beta(2.2, 6.5, n) * 0.75)
    h = np.where(is_p, rng.normal(17.8, 1.4, n), rng.normal(24.5, 1.9, n))
    # borderline objects sit between the clusters regardless of label
    nb = int(border.sum())
    a[border] = rng.normal(1.7, 0.3, nb)
    e[border] = rng.beta(4, 6, nb)
    h[border] = rng.normal(21.3, 1.2, nb)

    mean_anomaly = rng.uniform(0, 360, n)
    inclination = rng.gamma(2.2, 4.4, n)
    arg_perihelion = rng.uniform(0, 360, n)
    lon_asc_node = rng.uniform(0, 360, n)
    rms_residual = np.exp(rng.normal(-0.7, 0.45, n))
    mean_motion = 0.9856076 / np.power(a, 1.5)

    header = [
        "mean_anomaly", "inclination", "arg_perihelion", "lon_asc_node",
        "rms_residual", "semi_major_axis", "eccentricity", "mean_motion",
        "abs_magnitude", "pho",
    ]
    cols = [mean_anomaly, inclination, arg_perihelion, lon_asc_node,
            rms_residual, a, e, mean_motion, h, pho]
    write_csv(os.path.join(HERE, "asteroid.csv"), header, cols)
    check_logistic(np.column_stack(cols[:-1]), pho, "asteroid")


# ------------------------------------------------------------------ spam ---
def gen_spam():
    rng = np.random.default_rng(1998)
    n = 4601
    n_spam = 1813
    y = np.zeros(n, dtype=int)
    y[rng.permutation(n)[:n_spam]] = 1

    p_freq = 54
    x = np.zeros((n, p_freq + 3))
    # occurrence probability and mean frequency per class for each "word"
    base_occ = rng.uniform(0.05, 0.45, p_freq)
    base_mu = rng.uniform(0.1, 0.7, p_freq)
    # informative words: distinctly different occurrence/means under spam
    strong = rng.permutation(p_freq)[:22]
    occ_shift = np.zeros(p_freq)
    mu_shift = np.zeros(p_freq)
    sign = rng.choice([-1.0, 1.0], 22, p=[0.35, 0.65])
    occ_shift[strong[:12]] = sign[:12] * rng.uniform(0.16, 0.30, 12)
    mu_shift[strong[:12]] = sign[:12] * rng.uniform(0.18, 0.50, 12)
    occ_shift[strong[12:]] = sign[12:] * rng.uniform(0.04, 0.11, 10)
    mu_shift[strong[12:]] = sign[12:] * rng.uniform(0.06, 0.16, 10)

    for j in range(p_freq):
        occ0 = np.clip(base_occ[j], 0.02, 0.95)
        occ1 = np.clip(base_occ[j] + occ_shift[j], 0.02, 0.95)
        mu0 = max(base_mu[j], 0.05)
        mu1 = max(base_mu[j] + mu_shift[j], 0.05)
        occurs = rng.random(n) < np.where(y == 1, occ1, occ0)
        vals = rng.exponential(np.where(y == 1, mu1, mu0))
        x[:, j] = np.where(occurs, vals, 0.0)

    # capital-run-length features: heavier tail under spam
    for k, (m0, m1, s) in enumerate([(1.5, 2.05, 0.55), (2.6, 3.45, 0.8), (4.55, 5.45, 1.0)]):
        x[:, p_freq + k] = np.exp(rng.normal(np.where(y == 1, m1, m0), s))

    header = [f"wf_{j+1}" for j in range(48)] + [f"cf_{j+1}" for j in range(6)] + [
        "cap_avg", "cap_longest", "cap_total", "spam",
    ]
    cols = [x[:, j] for j in range(p_freq + 3)] + [y]
    write_csv(os.path.join(HERE, "spam.csv"), header, cols)
    check_logistic(x, y, "spam")


def check_logistic(x, y, name):
    try:
        from sklearn.linear_model import LogisticRegression
        from sklearn.model_selection import cross_val_score
        from sklearn.preprocessing import StandardScaler
        from sklearn.pipeline import make_pipeline

        model = make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))
        acc = cross_val_score(model, x, y, cv=4, scoring="accuracy").mean()
        print(f"  {name}: 4-fold logistic accuracy = {acc:.4f}")
    except Exception as exc:  # diagnostics only
        print(f"  {name}: logistic check skipped ({exc})")


# ------------------------------------------------------------- exoplanet ---
def gen_exoplanet():
    rng = np.random.default_rng(1610)
    n = 223

    m_star = np.exp(rng.normal(0.0, 0.32, n))            # solar masses
    m_star = np.clip(m_star, 0.22, 3.2)
    r_star = np.power(m_star, 0.9) * np.exp(rng.normal(0, 0.05, n))
    t_star = 5772.0 * np.power(m_star, 0.54) * np.exp(rng.normal(0, 0.03, n))
    metallicity = rng.normal(0.0, 0.22, n)

    period = np.exp(rng.normal(np.log(18.0), 1.55, n))   # days
    period = np.clip(period, 0.45, 9000.0)
    # Kepler's third law in AU / solar masses / years, ~1% measurement scatter
    semi_major = np.power(m_star * (period / 365.25) ** 2, 1.0 / 3.0)
    semi_major *= np.exp(rng.normal(0, 0.01, n))

    eccentricity = rng.beta(1.2, 5.0, n)
    type_flag = rng.choice([0, 1, 2, 3], n, p=[0.72, 0.14, 0.09, 0.05])

    # planet radii in Jupiter radii: giants near 1, a sub-Neptune cloud below
    giants = rng.random(n) < 0.55
    radius = np.where(
        giants,
        np.exp(rng.normal(np.log(1.05), 0.18, n)),
        np.exp(rng.normal(np.log(0.30), 0.45, n)),
    )
    radius = np.clip(radius, 0.06, 2.1)
    # density in Jupiter densities: small planets tend rockier (denser)
    density = np.exp(rng.normal(np.log(0.9) - 1.05 * np.log(radius / 0.8), 0.35))
    density = np.clip(density, 0.08, 9.0)
    # mass identity with ~1% ellipsoid scatter
    mass = radius ** 3 * density * np.exp(rng.normal(0, 0.01, n))

    header = [
        "TypeFlag", "RadiusJpt", "PeriodDays", "SemiMajorAxisAU", "Eccentricity",
        "HostStarMassSlrMass", "HostStarRadiusSlrRad", "HostStarMetallicity",
        "HostStarTempK", "PlanetaryDensJpt", "PlanetaryMassJpt",
    ]
    cols = [type_flag, radius, period, semi_major, eccentricity,
            m_star, r_star, metallicity, t_star, density, mass]
    write_csv(os.path.join(HERE, "exoplanet.csv"), header, cols)

    # diagnostics: law features against their responses
    f_mass = radius ** 3 * density
    r2_mass = 1 - np.var(mass - np.polyval(np.polyfit(f_mass, mass, 1), f_mass)) / np.var(mass)
    f_kep = np.power(period ** 2 * m_star, 1.0 / 3.0)
    r2_kep = 1 - np.var(semi_major - np.polyval(np.polyfit(f_kep, semi_major, 1), f_kep)) / np.var(semi_major)
    f_kep_r = np.power(period ** 2 * r_star, 1.0 / 3.0)
    corr = np.corrcoef(f_kep, f_kep_r)[0, 1]
    print(f"  exoplanet: R^2(mass ~ R^3 rho) = {r2_mass:.5f}, "
          f"R^2(a ~ (P^2 M)^(1/3)) = {r2_kep:.5f}, corr(M-form, R-form) = {corr:.5f}")


if __name__ == "__main__":
    gen_breast()
    gen_asteroid()
    gen_spam()
    gen_exoplanet()
