"""Antidivergence operators on the torus and their decay diagnostics.

R_op maps a vector field v to a symmetric tensor R with div R = v - mean(v);
G_op maps a scalar f to a vector g with div g = f - mean(f). Both are order
minus-one operators: fed a wave a(x) e^{i lam k.x} (through the shifted
symbol path) their output decays like 1/lam, which decay_probe measures.
"""

from dataclasses import dataclass

import numpy as np

from . import torus_field as tf


def _shifted_wavenumbers(grid, xi):
    kx, ky, kz = grid.wavenumbers()
    if xi is not None:
        kx, ky, kz = kx + xi[0], ky + xi[1], kz + xi[2]
    return kx, ky, kz


def R_op(v, grid, xi=None):
    """Symmetric antidivergence: R = grad u + (grad u)^T - (div u) I with
    u = Lap^{-1}(v - mean v). Exact identity div R = v - mean v.

    v: (3, nx, ny, nz). With xi, v is the slow amplitude of v e^{i xi.x}
    and the same identity holds for the modulated fields.
    """
    v = np.asarray(v)
    if v.shape != (3,) + grid.shape:
        raise ValueError("expected a vector field on the grid")
    kx, ky, kz = _shifted_wavenumbers(grid, xi)
    k2 = kx * kx + ky * ky + kz * kz
    sing = k2 == 0
    k2s = np.where(sing, 1.0, k2)
    vh = tf.fft3(v)
    vh = np.where(sing, 0.0, vh)  # drop the mean / singular mode
    uh = vh / (-k2s)
    ik = (1j * kx, 1j * ky, 1j * kz)
    divu_h = sum(ik[a] * uh[a] for a in range(3))
    Rh = np.empty((3, 3) + grid.shape, dtype=complex)
    for a in range(3):
        for b in range(a, 3):
            Rh[a, b] = ik[b] * uh[a] + ik[a] * uh[b]
            if a == b:
                Rh[a, b] -= divu_h
            Rh[b, a] = Rh[a, b]
    out = tf.ifft3(Rh)
    return out.real if (xi is None and not np.iscomplexobj(v)) else out


def G_op(f, grid, xi=None):
    """Scalar antidivergence: g = grad Lap^{-1}(f - mean f), div g = f - mean f."""
    f = np.asarray(f)
    if f.shape != grid.shape:
        raise ValueError("expected a scalar field on the grid")
    kx, ky, kz = _shifted_wavenumbers(grid, xi)
    k2 = kx * kx + ky * ky + kz * kz
    sing = k2 == 0
    k2s = np.where(sing, 1.0, k2)
    fh = np.where(sing, 0.0, tf.fft3(f))
    uh = fh / (-k2s)
    gh = np.stack([1j * kx * uh, 1j * ky * uh, 1j * kz * uh])
    out = tf.ifft3(gh)
    return out.real if (xi is None and not np.iscomplexobj(f)) else out


def divergence(T, grid, xi=None):
    """Divergence of a vector (3,...) -> scalar or tensor (3,3,...) -> vector,
    contracting the second index."""
    T = np.asarray(T)
    if T.shape == (3,) + grid.shape:
        return sum(tf.derivative(T[a], "xyz"[a], grid, xi=xi) for a in range(3))
    if T.shape == (3, 3) + grid.shape:
        return np.stack(
            [sum(tf.derivative(T[a, b], "xyz"[b], grid, xi=xi) for b in range(3)) for a in range(3)]
        )
    raise ValueError(f"unsupported shape {T.shape}")


@dataclass
class DecayProbeReport:
    lams: tuple
    norms: tuple
    slope: float


def decay_probe(grid, lams, direction=(1, 0, 0), amplitude=None, op="R"):
    """Sup norm of the antidivergence of a(x) d e^{i lam k.x} against lam.

    amplitude None means the constant profile (slope exactly -1); a slowly
    varying amplitude drifts the fitted slope but stays near -1. Returns the
    per-lam norms and the log-log least-squares slope.
    """
    d = np.asarray(direction, dtype=np.float64)
    a = np.ones(grid.shape) if amplitude is None else np.asarray(amplitude)
    norms = []
    for lam in lams:
        xi = tuple(int(round(lam * c)) for c in direction)
        if op == "R":
            field = np.stack([a * c for c in d]).astype(complex)
            out = R_op(field, grid, xi=xi)
        elif op == "G":
            out = G_op(a.astype(complex), grid, xi=xi)
        else:
            raise ValueError(f"unknown operator {op!r}")
        norms.append(float(np.max(np.abs(out))))
    slope = float(np.polyfit(np.log(np.asarray(lams, float)), np.log(norms), 1)[0])
    return DecayProbeReport(lams=tuple(lams), norms=tuple(norms), slope=slope)
