import numpy as np


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def sphere_fit(points):
    """Least-squares sphere: returns (center, radius, rms radial deviation)."""
    p = np.asarray(points, dtype=np.float64)
    A = np.hstack([2 * p, np.ones((len(p), 1))])
    b = (p * p).sum(axis=1)
    sol, *_ = np.linalg.lstsq(A, b, rcond=None)
    c = sol[:3]
    r = np.sqrt(sol[3] + c @ c)
    dev = np.linalg.norm(p - c, axis=1) - r
    return c, r, float(np.sqrt(np.mean(dev ** 2)))
