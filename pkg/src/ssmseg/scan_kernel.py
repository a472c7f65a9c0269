"""Batched selective scan over many sequences at once.

CPU-oriented implementation of the recurrence

    h_l = exp(dt_l * A) * h_{l-1} + (dt_l * x_l) * B_l
    y_l = C_l . h_l

vectorized over (batch, direction, channel) with numba-compiled inner
loops and a hand-derived backward pass. exp(dt*A) is precomputed per
sequence chunk with numpy's vectorized exp; the backward pass recomputes
hidden states chunk by chunk from saved chunk-boundary checkpoints
instead of storing the full state trajectory.

Array layouts are chosen so no input needs a transpose: sequences are
(.., D, L) with L innermost and the per-step projections are (.., L, N),
letting each (sequence, channel) pair stream through memory while its
state vector stays in registers.

The discretization is the first-order hold (A_bar = exp(dt A),
B_bar = dt B) used throughout the network blocks.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from numba import njit

CHUNK = 64
_MAX_STATE = 64


@njit(cache=True)
def _fwd_chunk(dA, x, dt, Bs, Cs, h, ys, lo, hi):
    # dA: (R, D, M, N); x, dt, ys: (R, D, L); Bs, Cs: (R, L, N); h: (R, D, N)
    R, D, _ = x.shape
    N = h.shape[2]
    hl = np.empty(_MAX_STATE, dtype=x.dtype)
    for r in range(R):
        for d in range(D):
            for n in range(N):
                hl[n] = h[r, d, n]
            for l in range(lo, hi):
                u = dt[r, d, l] * x[r, d, l]
                acc = 0.0
                for n in range(N):
                    hv = dA[r, d, l - lo, n] * hl[n] + u * Bs[r, l, n]
                    hl[n] = hv
                    acc += Cs[r, l, n] * hv
                ys[r, d, l] = acc
            for n in range(N):
                h[r, d, n] = hl[n]


@njit(cache=True)
def _bwd_chunk(dA, x, dt, Bs, Cs, A, k_of_r, h0, dys, p,
               dx, ddt, dBs, dCs, dA_grad, lo, hi):
    # Recompute this chunk's states per (sequence, channel), then run the
    # reverse-time adjoint. p (R, D, N) carries dL/dh across chunks.
    R, D, _ = x.shape
    N = h0.shape[2]
    M = hi - lo
    hbuf = np.empty((M + 1, _MAX_STATE), dtype=x.dtype)
    for r in range(R):
        k = k_of_r[r]
        for d in range(D):
            for n in range(N):
                hbuf[0, n] = h0[r, d, n]
            for l in range(lo, hi):
                u = dt[r, d, l] * x[r, d, l]
                for n in range(N):
                    hbuf[l - lo + 1, n] = dA[r, d, l - lo, n] * hbuf[l - lo, n] + u * Bs[r, l, n]
            for l in range(hi - 1, lo - 1, -1):
                g = dys[r, d, l]
                u = dt[r, d, l] * x[r, d, l]
                du = 0.0
                ddt_a = 0.0
                for n in range(N):
                    pv = p[r, d, n] + g * Cs[r, l, n]
                    dCs[r, l, n] += g * hbuf[l - lo + 1, n]
                    dBs[r, l, n] += pv * u
                    du += pv * Bs[r, l, n]
                    da = pv * hbuf[l - lo, n] * dA[r, d, l - lo, n]
                    ddt_a += da * A[k, d, n]
                    dA_grad[k, d, n] += da * dt[r, d, l]
                    p[r, d, n] = pv * dA[r, d, l - lo, n]
                dx[r, d, l] = du * dt[r, d, l]
                ddt[r, d, l] = du * x[r, d, l] + ddt_a


def _flat(t: torch.Tensor) -> np.ndarray:
    # (B, K, *, *) -> (B*K, *, *) without copying when already contiguous
    return t.detach().contiguous().view(t.shape[0] * t.shape[1], *t.shape[2:]).numpy()


class _BatchedScan(torch.autograd.Function):
    @staticmethod
    def forward(ctx, xs, dts, A, Bs, Cs):
        B, K, D, L = xs.shape
        N = A.shape[-1]
        R = B * K
        if N > _MAX_STATE:
            raise ValueError(f"state size {N} exceeds kernel limit {_MAX_STATE}")
        np_dtype = np.float64 if xs.dtype == torch.float64 else np.float32

        x, dt = _flat(xs), _flat(dts)
        bs, cs = _flat(Bs), _flat(Cs)
        a = np.ascontiguousarray(
            np.broadcast_to(A.detach().numpy()[None], (B, K, D, N)).reshape(R, D, N))

        n_chunks = math.ceil(L / CHUNK)
        checkpoints = np.zeros((n_chunks, R, D, N), dtype=np_dtype)
        ys = np.empty((R, D, L), dtype=np_dtype)
        h = np.zeros((R, D, N), dtype=np_dtype)
        buf = np.empty((R, D, min(CHUNK, L), N), dtype=np_dtype)
        for c in range(n_chunks):
            lo, hi = c * CHUNK, min((c + 1) * CHUNK, L)
            checkpoints[c] = h
            dA = buf[:, :, :hi - lo]
            np.multiply(dt[:, :, lo:hi, None], a[:, :, None, :], out=dA)
            np.exp(dA, out=dA)
            _fwd_chunk(dA, x, dt, bs, cs, h, ys, lo, hi)

        ctx.saved_np = (x, dt, bs, cs, a, checkpoints)
        ctx.meta = (B, K, D, L, N, np_dtype)
        return torch.from_numpy(ys).view(B, K, D, L).to(xs.dtype)

    @staticmethod
    def backward(ctx, dys_t):
        x, dt, bs, cs, a, checkpoints = ctx.saved_np
        B, K, D, L, N, np_dtype = ctx.meta
        R = B * K

        t_dtype = torch.float64 if np_dtype == np.float64 else torch.float32
        dys = dys_t.detach().to(t_dtype).contiguous().view(R, D, L).numpy()
        k_of_r = np.ascontiguousarray(np.tile(np.arange(K, dtype=np.int64), B))
        A_kdn = np.ascontiguousarray(a.reshape(B, K, D, N)[0])
        dx = np.zeros((R, D, L), dtype=np_dtype)
        ddt = np.zeros((R, D, L), dtype=np_dtype)
        dbs = np.zeros((R, L, N), dtype=np_dtype)
        dcs = np.zeros((R, L, N), dtype=np_dtype)
        dA_grad = np.zeros((K, D, N), dtype=np_dtype)
        p = np.zeros((R, D, N), dtype=np_dtype)

        buf = np.empty((R, D, min(CHUNK, L), N), dtype=np_dtype)
        for c in range(checkpoints.shape[0] - 1, -1, -1):
            lo, hi = c * CHUNK, min((c + 1) * CHUNK, L)
            dA = buf[:, :, :hi - lo]
            np.multiply(dt[:, :, lo:hi, None], a[:, :, None, :], out=dA)
            np.exp(dA, out=dA)
            _bwd_chunk(dA, x, dt, bs, cs, A_kdn, k_of_r, checkpoints[c],
                       dys, p, dx, ddt, dbs, dcs, dA_grad, lo, hi)

        def back(arr, *shape):
            return torch.from_numpy(arr).view(*shape)

        return (back(dx, B, K, D, L), back(ddt, B, K, D, L),
                torch.from_numpy(dA_grad), back(dbs, B, K, L, N), back(dcs, B, K, L, N))


def selective_scan_batched(xs, dts, A, Bs, Cs, Ds=None):
    """Differentiable batched scan.

    Shapes: xs, dts (B, K, D, L); A (K, D, N) diagonal evolution;
    Bs, Cs (B, K, L, N) per-step projections; optional skip Ds (K, D).
    Returns (B, K, D, L).
    """
    if xs.shape != dts.shape:
        raise ValueError("xs and dts must have the same shape")
    if Bs.shape != Cs.shape:
        raise ValueError("Bs and Cs must have the same shape")
    if Bs.shape[2] != xs.shape[3]:
        raise ValueError("Bs/Cs sequence length must match xs")
    ys = _BatchedScan.apply(xs, dts, A, Bs, Cs)
    if Ds is not None:
        ys = ys + Ds[None, :, :, None] * xs
    return ys
