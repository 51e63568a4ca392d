"""Small construction helpers shared across test modules."""

import numpy as np

from twopartnet.dyaddesign import DesignMatrices


def make_design(S=4, rows=12, p=3, q=2, seed=0, shared_map=False):
    """Random balanced multi-subject design with intercept columns."""
    r = np.random.default_rng(seed)
    N = S * rows
    X = np.column_stack([np.ones(N), r.normal(size=(N, p - 1))]) if p > 1 else np.ones((N, 1))
    if q == 0:
        Z = np.empty((N, 0))
    elif q == 1:
        Z = np.ones((N, 1))
    else:
        Z = np.column_stack([np.ones(N), r.normal(size=(N, q - 1))])
    vc_map = np.zeros(q, dtype=np.int64) if shared_map else np.arange(q, dtype=np.int64)
    vc_names = ("shared",) if shared_map and q else tuple(f"z{i}" for i in range(q))
    return DesignMatrices(
        X=X,
        Z=Z,
        x_names=tuple(f"x{i}" for i in range(p)),
        z_names=tuple(f"z{i}" for i in range(q)),
        vc_map=vc_map,
        vc_names=vc_names,
        subjects=tuple(f"g{s}" for s in range(S)),
        subject_index=np.repeat(np.arange(S), rows),
    )


def simulate_lmm(design, beta, tau, sigma2, seed=0):
    """Draw a Gaussian response from the mixed model at given parameters."""
    r = np.random.default_rng(seed)
    N = design.X.shape[0]
    y = design.X @ np.asarray(beta, dtype=float)
    q = design.Z.shape[1]
    if q:
        d = np.asarray(tau, dtype=float)[design.vc_map]
        for s in range(len(design.subjects)):
            idx = design.subject_index == s
            b = r.standard_normal(q) * np.sqrt(d)
            y[idx] += design.Z[idx] @ b
    y += r.standard_normal(N) * np.sqrt(sigma2)
    return y


def oneway_design(G, n):
    return make_design(S=G, rows=n, p=1, q=1)


def closed_form_oneway(y, G, n):
    """Textbook balanced one-way random-effects REML estimators."""
    y = np.asarray(y, dtype=float).reshape(G, n)
    ybar_i = y.mean(axis=1)
    ybar = y.mean()
    ssw = ((y - ybar_i[:, None]) ** 2).sum()
    msb = n * ((ybar_i - ybar) ** 2).sum() / (G - 1)
    sigma2 = ssw / (G * (n - 1))
    tau = max(0.0, (msb - sigma2) / n)
    return tau, sigma2
