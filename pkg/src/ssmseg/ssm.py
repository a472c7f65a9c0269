"""Continuous/discrete state-space primitives and the 2D cross-scan.

The building blocks here are deliberately small and pure: a continuous
linear state-space system (A, B, C, D), its zero-order-hold discretization,
a sequential selective scan with per-step timescales, and the four-direction
scan/merge used to run 1D recurrences over 2D feature maps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

ROW_FWD = "row-forward"
ROW_BWD = "row-backward"
COL_FWD = "column-forward"
COL_BWD = "column-backward"
SCAN_DIRECTIONS = (ROW_FWD, ROW_BWD, COL_FWD, COL_BWD)


class SingularEvolutionError(ValueError):
    """Raised when exact discretization needs the inverse of a singular A."""


def _as_float_tensor(value, name: str) -> torch.Tensor:
    # plain python/numpy values get double precision; torch tensors keep
    # whatever dtype the caller chose
    if isinstance(value, torch.Tensor):
        t = value if value.is_floating_point() else value.to(torch.float64)
    else:
        t = torch.as_tensor(value, dtype=torch.float64)
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} must be finite")
    return t


@dataclass
class ContinuousSSM:
    """Linear time-invariant system h' = A h + B x, y = C h + D x.

    A may be a full (N, N) matrix or a length-N vector holding the diagonal
    of a diagonal evolution matrix (the common parameterization).
    """

    A: torch.Tensor
    B: torch.Tensor
    C: torch.Tensor
    D: torch.Tensor

    def __post_init__(self):
        self.A = _as_float_tensor(self.A, "A")
        self.B = _as_float_tensor(self.B, "B")
        self.C = _as_float_tensor(self.C, "C")
        self.D = _as_float_tensor(self.D, "D")
        if self.A.ndim not in (1, 2):
            raise ValueError("A must be a vector (diagonal) or a square matrix")
        if self.A.ndim == 2 and self.A.shape[0] != self.A.shape[1]:
            raise ValueError("matrix A must be square")
        n = self.A.shape[0]
        if n < 1:
            raise ValueError("state size must be >= 1")
        if self.B.shape != (n,) or self.C.shape != (n,):
            raise ValueError(f"B and C must have shape ({n},)")
        if self.D.ndim != 0:
            raise ValueError("D must be a scalar")

    @property
    def state_size(self) -> int:
        return self.A.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.A.ndim == 1


@dataclass
class DiscretizedSSM:
    """Zero-order-hold discretization of a ContinuousSSM at timescale delta."""

    A_bar: torch.Tensor
    B_bar: torch.Tensor
    C: torch.Tensor
    D: torch.Tensor
    delta: float
    diagonal: bool = field(default=False)


def zoh_discretize(model: ContinuousSSM, delta: float, mode: str = "exact") -> DiscretizedSSM:
    """Discretize with a zero-order hold over timescale ``delta``.

    ``exact`` uses A_bar = exp(delta A) and B_bar = (exp(delta A) - I) A^-1 B;
    ``first_order`` keeps the same A_bar but approximates B_bar = delta B.
    Diagonal A is handled elementwise (zero diagonal entries take the
    delta*B limit), so only the full-matrix exact path can fail on
    singular A.
    """
    delta = float(delta)
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if mode not in ("exact", "first_order"):
        raise ValueError(f"unknown discretization mode {mode!r}")

    a, b = model.A, model.B
    if model.is_diagonal:
        a_bar = torch.exp(delta * a)
        if mode == "exact":
            # expm1(x)/a is the stable form of (e^x - 1)/a; a -> 0 gives delta
            scale = torch.where(
                a == 0,
                torch.full_like(a, delta),
                torch.expm1(delta * a) / torch.where(a == 0, torch.ones_like(a), a),
            )
            b_bar = scale * b
        else:
            b_bar = delta * b
        return DiscretizedSSM(a_bar, b_bar, model.C, model.D, delta, diagonal=True)

    a_bar = torch.linalg.matrix_exp(delta * a)
    if mode == "exact":
        eye = torch.eye(a.shape[0], dtype=a.dtype, device=a.device)
        try:
            b_bar = torch.linalg.solve(a, (a_bar - eye) @ b)
        except torch.linalg.LinAlgError as err:
            raise SingularEvolutionError(
                "exact discretization requires invertible A"
            ) from err
    else:
        b_bar = delta * b
    return DiscretizedSSM(a_bar, b_bar, model.C, model.D, delta, diagonal=False)


def selective_scan(
    inputs,
    deltas,
    model: ContinuousSSM,
    initial_state=None,
    mode: str = "exact",
) -> torch.Tensor:
    """Run the discrete recurrence h_k = A_bar_k h_{k-1} + B_bar_k x_k.

    Each step discretizes the model at that step's delta, then emits
    y_k = C . h_k + D x_k. Differentiable end to end through torch.
    """
    x = torch.as_tensor(inputs)
    if not x.is_floating_point():
        x = x.to(torch.float64)
    d = torch.as_tensor(deltas, dtype=x.dtype)
    if x.ndim != 1 or d.ndim != 1:
        raise ValueError("inputs and deltas must be 1-D sequences")
    if x.shape[0] != d.shape[0]:
        raise ValueError(f"inputs ({x.shape[0]}) and deltas ({d.shape[0]}) length mismatch")
    if x.shape[0] < 1:
        raise ValueError("need at least one input")
    if (d <= 0).any():
        raise ValueError("all deltas must be positive")

    n = model.state_size
    if initial_state is None:
        h = torch.zeros(n, dtype=x.dtype)
    else:
        h = torch.as_tensor(initial_state, dtype=x.dtype)
        if h.shape != (n,):
            raise ValueError(f"initial_state must have shape ({n},)")

    outs = []
    for k in range(x.shape[0]):
        disc = zoh_discretize(model, float(d[k]), mode=mode)
        if disc.diagonal:
            h = disc.A_bar * h + disc.B_bar * x[k]
        else:
            h = disc.A_bar @ h + disc.B_bar * x[k]
        outs.append(disc.C @ h + disc.D * x[k])
    return torch.stack(outs)


@dataclass
class DirectionalSequences:
    """The four directional flattenings of a (C, H, W) feature map.

    ``sequences`` is (4, C, H*W), ordered as row-forward, row-backward,
    column-forward, column-backward. Every sequence visits each grid
    position exactly once.
    """

    sequences: torch.Tensor
    height: int
    width: int
    directions: tuple = SCAN_DIRECTIONS

    def __post_init__(self):
        if self.sequences.shape[0] != 4:
            raise ValueError("expected four directional sequences")
        if self.sequences.shape[-1] != self.height * self.width:
            raise ValueError("sequence length must equal height*width")


def cross_scan(feature_map: torch.Tensor) -> DirectionalSequences:
    """Flatten (C, H, W) into the four directional scan sequences."""
    if feature_map.ndim != 3:
        raise ValueError(f"expected (C, H, W), got {tuple(feature_map.shape)}")
    c, h, w = feature_map.shape
    if h < 1 or w < 1:
        raise ValueError("spatial dims must be >= 1")
    row_fwd = feature_map.reshape(c, h * w)
    col_fwd = feature_map.transpose(1, 2).reshape(c, h * w)
    seqs = torch.stack([row_fwd, row_fwd.flip(-1), col_fwd, col_fwd.flip(-1)])
    return DirectionalSequences(seqs, h, w)


def cross_merge(seqs: DirectionalSequences, reduction: str = "mean") -> torch.Tensor:
    """Scatter the four sequences back to the grid and reduce elementwise.

    With ``mean`` this inverts ``cross_scan`` exactly (the four scattered
    copies are identical, and sum/4 is exact in binary floating point).
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    s = seqs.sequences
    c = s.shape[1]
    h, w = seqs.height, seqs.width
    if s.shape[-1] != h * w:
        raise ValueError("sequence length does not match grid size")
    maps = torch.stack([
        s[0].reshape(c, h, w),
        s[1].flip(-1).reshape(c, h, w),
        s[2].reshape(c, w, h).transpose(1, 2),
        s[3].flip(-1).reshape(c, w, h).transpose(1, 2),
    ])
    total = maps.sum(0)
    return total / 4 if reduction == "mean" else total
