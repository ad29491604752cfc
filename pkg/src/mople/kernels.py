"""Epanechnikov kernel, bandwidth scaling and per-component smoothers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._types import BandwidthInfeasibleError, KERNELS, ValidationError

# Dimensionless weighted kernel mass (denominator times h) at or below this is
# treated as an empty window; ratios of smaller numbers lose precision.
DEGENERATE_MASS = 1e-200


@dataclass(frozen=True)
class KernelSpec:
    kind: str = "epanechnikov"
    h: float = 1.0

    def __post_init__(self):
        if self.kind not in KERNELS:
            raise ValidationError(f"unsupported kernel {self.kind!r}")
        if not self.h > 0:
            raise ValidationError(f"bandwidth must be positive, got {self.h!r}")


def kernel_value(t):
    """Epanechnikov kernel ``0.75 (1 - t^2)`` on ``|t| <= 1``, zero outside."""
    t = np.asarray(t, dtype=float)
    out = np.where(np.abs(t) <= 1.0, 0.75 * (1.0 - t * t), 0.0)
    return out if out.ndim else float(out)


def scaled_kernel(spec: KernelSpec, d):
    """``K_h(d) = K(d / h) / h``."""
    return kernel_value(np.asarray(d, dtype=float) / spec.h) / spec.h


def kernel_constants(spec: KernelSpec = KernelSpec()):
    """Return ``(K(0), int K^2, tau_K)`` for the kernel.

    ``tau_K = (K(0) - 0.5 int K^2) / int (K - 0.5 K)^2``; the denominator is
    taken literally, i.e. ``0.25 int K^2``. For Epanechnikov this gives
    ``(0.75, 0.6, 3.0)``.
    """
    k0 = 0.75
    int_k2 = 0.6  # int_{-1}^{1} 0.5625 (1 - t^2)^2 dt = 0.5625 * 16/15
    tau = (k0 - 0.5 * int_k2) / (0.25 * int_k2)
    return k0, int_k2, tau


def kernel_matrix(u, spec: KernelSpec, points=None) -> np.ndarray:
    """``W[i, j] = K_h(u_i - points_j)``; ``points`` defaults to ``u``."""
    u = np.asarray(u, dtype=float)
    pts = u if points is None else np.asarray(points, dtype=float)
    return scaled_kernel(spec, u[:, None] - pts[None, :])


def smoother_matrix(u, z_c, spec: KernelSpec, W=None) -> np.ndarray:
    """Responsibility-weighted smoother for one component.

    ``S[i, j] = z_i K_h(u_i - u_j) / sum_k z_k K_h(u_k - u_j)``. Column ``j``
    holds the weights that produce the smoothed value at ``u_j``, so the
    fitted values of a vector ``v`` are ``S.T @ v`` and the profiled design
    is ``X - S.T @ X``.

    Raises
    ------
    BandwidthInfeasibleError
        If some column has no weighted kernel mass.
    """
    z = np.asarray(z_c, dtype=float)
    if W is None:
        W = kernel_matrix(u, spec)
    num = z[:, None] * W
    den = num.sum(axis=0)
    bad = np.flatnonzero(den * spec.h <= DEGENERATE_MASS)
    if bad.size:
        raise BandwidthInfeasibleError(
            f"empty kernel window at u[{bad[0]}]: bandwidth {spec.h:g} too small for this component"
        )
    return num / den[None, :]


def kernel_smooth(W: np.ndarray, z_c: np.ndarray, V: np.ndarray, h: float = 1.0) -> np.ndarray:
    """Return ``S.T @ V`` for the smoother built from ``W`` and ``z_c``.

    ``W`` is (n, m) with rows indexed by observations and columns by the
    evaluation points; ``V`` is (n,) or (n, k). Avoids forming ``S``.
    """
    den = z_c @ W
    bad = np.flatnonzero(den * h <= DEGENERATE_MASS)
    if bad.size:
        raise BandwidthInfeasibleError(
            f"empty kernel window at evaluation point {bad[0]} (bandwidth {h:g})"
        )
    zV = z_c[:, None] * V if V.ndim == 2 else z_c * V
    out = W.T @ zV
    return out / (den[:, None] if V.ndim == 2 else den)
