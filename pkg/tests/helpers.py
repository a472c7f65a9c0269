"""Shared test utilities: independent oracles and finite-difference checks."""

import numpy as np
import torch


def matrix_exp_series(m: np.ndarray, tol=1e-18, max_terms=200) -> np.ndarray:
    """Power-series matrix exponential, summed to machine precision."""
    out = np.eye(m.shape[0], dtype=np.float64)
    term = np.eye(m.shape[0], dtype=np.float64)
    for k in range(1, max_terms):
        term = term @ m / k
        out = out + term
        if np.abs(term).max() < tol * max(1.0, np.abs(out).max()):
            break
    return out


def zoh_series_oracle(a: np.ndarray, b: np.ndarray, delta: float):
    """(A_bar, B_bar) from power series; valid even for singular A.

    Uses A_bar = sum (dA)^k / k! and B_bar = delta * sum (dA)^k / (k+1)! B.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if a.shape[0] != a.shape[1]:
        a = np.diag(a.reshape(-1))
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    da = delta * a
    a_bar = matrix_exp_series(da)
    term = np.eye(a.shape[0])
    acc = np.eye(a.shape[0])
    for k in range(1, 200):
        term = term @ da / (k + 1)
        acc = acc + term
        if np.abs(term).max() < 1e-18:
            break
    return a_bar, delta * (acc @ b)


def fd_gradient(f, x: torch.Tensor, eps=1e-6) -> torch.Tensor:
    """Central finite differences of scalar f w.r.t. every element of x."""
    g = torch.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(f())
        flat[i] = orig - eps
        dn = float(f())
        flat[i] = orig
        gf[i] = (up - dn) / (2 * eps)
    return g


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-relative difference, safe around zero."""
    a = a.detach().double()
    b = b.detach().double()
    denom = max(a.norm().item(), b.norm().item(), 1e-12)
    return (a - b).norm().item() / denom
