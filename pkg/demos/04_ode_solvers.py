"""Fixed-step RK4 and the adaptive Fehlberg pair.

Convergence on a problem with a known solution, backward-in-time
integration, and the round-trip defect diagnostic.
"""
import numpy as np

from growflow.ode import IntegrationOptions, integrate, rk4_step, roundtrip_defect

# --- order-4 convergence on y' = y ------------------------------------------
print("substeps   |y(1) - e|")
for substeps in (2, 4, 8, 16, 32):
    opts = IntegrationOptions(substeps=substeps)
    y1, _ = integrate(lambda y, t: y, np.array(1.0), 0.0, 1.0, opts)
    print(f"{substeps:8d}   {abs(float(y1) - np.e):.3e}")

# one explicit step, same numbers as the classical textbook example
y = rk4_step(lambda y, t: y, np.array(1.0), 0.0, 0.1)
print("\nrk4 step of y'=y at h=0.1:", float(y), " (exact:", np.exp(0.1), ")")

# --- rotation: norm-preserving flow ------------------------------------------
omega = np.array([0.0, 0.0, 1.0])


def spin(y, t):
    return np.cross(omega, y)


y0 = np.array([1.0, 0.0, 0.0])
opts = IntegrationOptions(method="rk45_adaptive")
y_half, samples = integrate(spin, y0, 0.0, 0.5, opts)
print(f"\nadaptive rotation: {len(samples) - 1} accepted steps, "
      f"|y| = {np.linalg.norm(y_half):.9f}, angle = {np.arctan2(y_half[1], y_half[0]):.9f}")

# backward in time works the same way (negative steps under the hood)
y_back, _ = integrate(spin, y_half, 0.5, 0.0, opts)
print("back to t=0:", y_back.round(9))

# --- round-trip defect --------------------------------------------------------
rng = np.random.default_rng(0)
A = rng.normal(scale=0.5, size=(3, 3))


def messy(y, t):
    return np.tanh(A @ y) + 0.3 * np.sin(2.0 * t)


print("\nsubsteps   roundtrip defect")
for substeps in (4, 8, 16):
    d = roundtrip_defect(messy, rng.normal(size=3), 0.0, 1.0,
                         IntegrationOptions(substeps=substeps))
    print(f"{substeps:8d}   {d:.3e}")
