"""Regenerate geodesic_oracle.json.

Solves the *direct* geodesic problem on the WGS-84 ellipsoid by integrating
the geodesic ODEs in geographic coordinates with a high-order Runge-Kutta
scheme at tight tolerances:

    dphi/ds    = cos(alpha) / M(phi)
    dlambda/ds = sin(alpha) / (N(phi) cos(phi))
    dalpha/ds  = sin(alpha) tan(phi) / N(phi)

where M and N are the meridian and prime-vertical radii of curvature.
Starting from a random point, azimuth and arc length, the endpoint follows
from the integration and the arc length is the exact geodesic distance
(paths are kept well below the cut point, so they are shortest geodesics).
This shares no code or series expansion with the inverse solver under test.

The integrator itself is validated here against two closed forms before any
table entry is emitted: equatorial arcs (a * dlon) and meridian arcs (an
incomplete elliptic integral of the second kind).

Run:  python3 tests/data/make_geodesic_oracle.py
"""

import json
import math
import pathlib

import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import ellipeinc

A = 6378137.0
F = 1 / 298.257223563
E2 = F * (2 - F)

RTOL = 1e-13
ATOL = 1e-15

N_PAIRS = 1000
MAX_DIST_M = 2.0e6
MIN_DIST_M = 1.0
SEED = 20240815


def geodesic_rhs(_s, y):
    phi, _lam, alpha = y
    sin_phi = math.sin(phi)
    w = math.sqrt(1 - E2 * sin_phi * sin_phi)
    m = A * (1 - E2) / w**3
    n = A / w
    return [
        math.cos(alpha) / m,
        math.sin(alpha) / (n * math.cos(phi)),
        math.sin(alpha) * math.tan(phi) / n,
    ]


def shoot(lat1, lon1, azi_deg, dist_m):
    y0 = [math.radians(lat1), math.radians(lon1), math.radians(azi_deg)]
    sol = solve_ivp(geodesic_rhs, (0.0, dist_m), y0, method="DOP853",
                    rtol=RTOL, atol=ATOL, dense_output=False)
    assert sol.success, sol.message
    phi, lam, _ = sol.y[:, -1]
    lon = math.degrees(lam)
    lon = (lon + 180.0) % 360.0 - 180.0
    return math.degrees(phi), lon


def meridian_arc(lat_deg):
    # Arc length from the equator along a meridian, via the incomplete
    # elliptic integral of the second kind in the parametric latitude.
    beta = math.atan((1 - F) * math.tan(math.radians(lat_deg)))
    e2_param = E2 / (1 - E2) * (1 - E2)  # = e'^2 * (1-e^2) = e^2
    b = A * (1 - F)
    # meridian arc = b * E(beta' | m) with beta' = pi/2 - beta measured from
    # the pole; easier: integrate a(1-e^2)(1-e^2 sin^2 phi)^{-3/2} dphi.
    from scipy.integrate import quad
    val, err = quad(lambda p: A * (1 - E2) / (1 - E2 * math.sin(p) ** 2) ** 1.5,
                    0.0, math.radians(lat_deg), epsabs=1e-10, epsrel=1e-13,
                    limit=200)
    assert err < 1e-6
    return val


def validate_integrator():
    # Equator: geodesic distance for dlon degrees is exactly a*dlon(rad).
    for dlon in (0.001, 0.5, 10.0, 17.5):
        lat2, lon2 = shoot(0.0, 0.0, 90.0, A * math.radians(dlon))
        assert abs(lat2) < 1e-10, lat2
        assert abs(lon2 - dlon) * math.pi / 180.0 * A < 1e-4, (dlon, lon2)
    # Meridian: compare with quadrature of the meridian radius.
    for lat in (0.5, 10.0, 17.9):
        s = meridian_arc(lat)
        lat2, lon2 = shoot(0.0, 0.0, 0.0, s)
        assert abs(lon2) < 1e-12, lon2
        assert abs(lat2 - lat) * math.pi / 180.0 * A < 1e-4, (lat, lat2)
    print("integrator validation OK (equator + meridian closed forms)")


def main():
    validate_integrator()
    rng = np.random.default_rng(SEED)
    entries = []
    while len(entries) < N_PAIRS:
        lat1 = math.degrees(math.asin(rng.uniform(-0.995, 0.995)))
        lon1 = rng.uniform(-180.0, 180.0)
        azi = rng.uniform(0.0, 360.0)
        dist = math.exp(rng.uniform(math.log(MIN_DIST_M), math.log(MAX_DIST_M)))
        lat2, lon2 = shoot(lat1, lon1, azi, dist)
        if abs(lat2) > 89.9:  # keep clear of the poles
            continue
        entries.append([lat1, lon1, lat2, lon2, dist])
    out = pathlib.Path(__file__).with_name("geodesic_oracle.json")
    out.write_text(json.dumps({
        "ellipsoid": {"a": A, "f_inv": 298.257223563},
        "method": "DOP853 integration of geodesic ODEs, rtol=1e-13",
        "pairs": entries,
    }, indent=None, separators=(",", ":")))
    print(f"wrote {len(entries)} pairs -> {out}")


if __name__ == "__main__":
    main()
