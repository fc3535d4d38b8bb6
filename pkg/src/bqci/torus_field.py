"""Periodic field arithmetic on the 3-torus [0, 2pi)^3.

Fields are plain numpy arrays whose last three axes are (x, y, z); a time
series carries time as the leading axis. Spatial derivatives are spectral,
time derivatives are 4th-order finite differences on the shared uniform time
grid. A "shifted" variant of every spectral operator acts on the slow
amplitude a of a modulated term a(x) e^{i xi . x} by replacing the symbol
i m with i (m + xi); this is how fast phases stay symbolic while the
operators remain exact.
"""

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft

TWO_PI = 2.0 * np.pi

MAGIC = b"BCI1"


class MeanZeroError(ValueError):
    """Input violates a mean-zero precondition; carries the measured mean."""

    def __init__(self, mean, tol):
        self.mean = mean
        self.tol = tol
        super().__init__(f"mean-zero precondition violated: |mean| = {mean:.3e} > {tol:.3e}")


@dataclass(frozen=True)
class Grid3:
    """Uniform periodic grid; any even N >= 8 per axis (48 = 2^4*3 is the
    reference size; the factor 3 keeps power-of-two wave ladders off the
    grid's zero mode)."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for n in (self.nx, self.ny, self.nz):
            if n < 8 or n % 2:
                raise ValueError(f"grid size {n} must be even and >= 8")

    @property
    def shape(self):
        return (self.nx, self.ny, self.nz)

    @property
    def npts(self):
        return self.nx * self.ny * self.nz

    def axes(self):
        return tuple(np.arange(n) * (TWO_PI / n) for n in self.shape)

    def meshes(self):
        x, y, z = self.axes()
        return np.meshgrid(x, y, z, indexing="ij")

    def wavenumbers(self):
        """Integer wavenumber arrays broadcastable to the grid shape."""
        kx = np.fft.fftfreq(self.nx, 1.0 / self.nx).reshape(-1, 1, 1)
        ky = np.fft.fftfreq(self.ny, 1.0 / self.ny).reshape(1, -1, 1)
        kz = np.fft.fftfreq(self.nz, 1.0 / self.nz).reshape(1, 1, -1)
        return kx, ky, kz

    def spacing(self):
        return tuple(TWO_PI / n for n in self.shape)


@dataclass(frozen=True)
class TimeGrid:
    t0: float
    t1: float
    nt: int

    def __post_init__(self):
        if self.nt < 5:
            raise ValueError("need at least 5 time samples for 4th-order FD")
        if not self.t1 > self.t0:
            raise ValueError("empty time interval")

    @property
    def dt(self):
        return (self.t1 - self.t0) / (self.nt - 1)

    def times(self):
        return np.linspace(self.t0, self.t1, self.nt)


def fft3(f):
    return sfft.fftn(f, axes=(-3, -2, -1))


def ifft3(fh):
    return sfft.ifftn(fh, axes=(-3, -2, -1))


def ifft3_real(fh):
    return sfft.ifftn(fh, axes=(-3, -2, -1)).real


_AXIS_INDEX = {"x": 0, "y": 1, "z": 2}


def _check_resolved(fh, grid, warn_label):
    """Warn when a noticeable share of spectral energy sits at the Nyquist shell."""
    nx, ny, nz = grid.shape
    tail = (
        np.sum(np.abs(fh[..., nx // 2, :, :]) ** 2)
        + np.sum(np.abs(fh[..., :, ny // 2, :]) ** 2)
        + np.sum(np.abs(fh[..., :, :, nz // 2]) ** 2)
    )
    total = np.sum(np.abs(fh) ** 2)
    if total > 0 and tail > 1e-6 * total:
        warnings.warn(
            f"{warn_label}: {tail / total:.1e} of spectral energy at Nyquist; "
            "derivative of under-resolved content",
            stacklevel=3,
        )


def _rfft_symbol(grid, a):
    """Wavenumbers of axis a on the rfft half-spectrum, with the Nyquist
    planes zeroed: for real input the full-transform derivative followed by
    taking the real part annihilates all Nyquist-plane content, and the
    half-spectrum path must reproduce that exactly."""
    n = grid.shape
    ks = grid.wavenumbers()[a].copy()
    if n[a] % 2 == 0:
        ks[np.abs(ks) == n[a] // 2] = 0.0
    if a == 2:
        ks = ks[..., : n[2] // 2 + 1]
    return ks


def derivative(f, axis, grid, xi=None, check=False):
    """Spectral spatial derivative along 'x' | 'y' | 'z'.

    With xi (integer 3-vector) given, interprets f as the slow amplitude of
    f(x) e^{i xi . x} and returns the amplitude of the derivative, i.e. the
    symbol is i (m + xi)_axis.
    """
    a = _AXIS_INDEX[axis]
    if xi is None and not check and not np.iscomplexobj(f):
        fh = sfft.rfftn(f, axes=(-3, -2, -1))
        return sfft.irfftn(1j * _rfft_symbol(grid, a) * fh, s=grid.shape,
                           axes=(-3, -2, -1))
    fh = fft3(f)
    if check:
        _check_resolved(fh, grid, f"derivative d/d{axis}")
    ks = grid.wavenumbers()[a]
    if xi is not None:
        ks = ks + xi[a]
    out = ifft3(1j * ks * fh)
    return out if np.iscomplexobj(f) or xi is not None else out.real


def gradient(f, grid, xi=None):
    """All three spatial derivatives, stacked on a new leading axis."""
    kxyz = grid.wavenumbers()
    if xi is None and not np.iscomplexobj(f):
        fh = sfft.rfftn(f, axes=(-3, -2, -1))
        return np.stack([
            sfft.irfftn(1j * _rfft_symbol(grid, a) * fh, s=grid.shape,
                        axes=(-3, -2, -1))
            for a in range(3)
        ])
    fh = fft3(f)
    gh = np.empty((3,) + fh.shape, dtype=fh.dtype)
    for a in range(3):
        ks = kxyz[a] + (xi[a] if xi is not None else 0)
        np.multiply(1j * ks, fh, out=gh[a])
    out = ifft3(gh)
    return out if np.iscomplexobj(f) or xi is not None else out.real


def mean_t3(f):
    """Mean over the torus (last three axes)."""
    return np.mean(f, axis=(-3, -2, -1))


def inv_laplacian(f, grid, xi=None, tol_rel=1e-10):
    """Solve Lap(u) = f - mean(f); errors when the mean is not negligible.

    With xi, solves the shifted problem for a modulated amplitude: divides by
    -|m + xi|^2, dropping the (single, if any) mode with m + xi = 0.
    """
    fh = fft3(f)
    if xi is None:
        m = np.abs(fh[..., 0, 0, 0]) / grid.npts
        scale = np.max(np.abs(f))
        if np.max(m) > tol_rel * max(scale, 1e-300):
            raise MeanZeroError(float(np.max(m)), tol_rel * scale)
        return _inv_lap_hat(fh, grid, None, inverse=True)
    return _inv_lap_hat(fh, grid, xi, inverse=True)


def _inv_lap_hat(fh, grid, xi, inverse):
    kx, ky, kz = grid.wavenumbers()
    if xi is not None:
        kx, ky, kz = kx + xi[0], ky + xi[1], kz + xi[2]
    k2 = kx * kx + ky * ky + kz * kz
    sing = k2 == 0
    k2 = np.where(sing, 1.0, k2)
    uh = fh / (-k2)
    uh = np.where(sing, 0.0, uh)
    out = ifft3(uh)
    if inverse and xi is None and not np.iscomplexobj(fh):
        return out.real
    return out


def dealias(f, grid):
    """2/3-rule truncation: zero modes with |m| > N/3 on any axis."""
    fh = fft3(f)
    kx, ky, kz = grid.wavenumbers()
    mask = (
        (np.abs(kx) <= grid.nx / 3.0)
        & (np.abs(ky) <= grid.ny / 3.0)
        & (np.abs(kz) <= grid.nz / 3.0)
    )
    out = ifft3(fh * mask)
    return out if np.iscomplexobj(f) else out.real


def product(f, g, grid):
    """Pointwise product with 2/3 dealiasing (slow/resolved path)."""
    return dealias(f * g, grid)


def low_pass(f, grid, kcut):
    """Sharp spectral truncation to |m| <= kcut on every axis."""
    fh = fft3(f)
    kx, ky, kz = grid.wavenumbers()
    mask = (np.abs(kx) <= kcut) & (np.abs(ky) <= kcut) & (np.abs(kz) <= kcut)
    out = ifft3(fh * mask)
    return out if np.iscomplexobj(f) else out.real


# ---------------------------------------------------------------------------
# time differentiation (4th order)

_CENT = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
_EDGE0 = np.array([-25.0, 48.0, -36.0, 16.0, -3.0]) / 12.0
_EDGE1 = np.array([-3.0, -10.0, 18.0, -6.0, 1.0]) / 12.0


def time_derivative_weights(nt, dt):
    """Row j of the returned (nt, 5) table holds the stencil weights applied
    to samples at indices time_derivative_support(nt)[j]."""
    W = np.zeros((nt, 5))
    for j in range(nt):
        if j == 0:
            W[j] = _EDGE0
        elif j == 1:
            W[j] = _EDGE1
        elif j == nt - 2:
            W[j] = -_EDGE1[::-1]
        elif j == nt - 1:
            W[j] = -_EDGE0[::-1]
        else:
            W[j] = _CENT
    return W / dt


def time_derivative_support(nt):
    """Index array (nt, 5): sample indices each stencil row touches."""
    S = np.zeros((nt, 5), dtype=np.int64)
    for j in range(nt):
        if j == 0:
            S[j] = np.arange(5)
        elif j == 1:
            S[j] = np.arange(5)
        elif j == nt - 2:
            S[j] = np.arange(nt - 5, nt)
        elif j == nt - 1:
            S[j] = np.arange(nt - 5, nt)
        else:
            S[j] = np.arange(j - 2, j + 3)
    return S


def time_derivative(f, tgrid):
    """4th-order FD time derivative of a time series (time = leading axis)."""
    f = np.asarray(f)
    nt = f.shape[0]
    if nt != tgrid.nt:
        raise ValueError("time axis does not match the time grid")
    W = time_derivative_weights(nt, tgrid.dt)
    S = time_derivative_support(nt)
    out = np.zeros_like(f)
    for j in range(nt):
        for m in range(5):
            out[j] += W[j, m] * f[S[j, m]]
    return out


def time_derivative_slice(f_slices, j, nt, dt):
    """Stencil for one output sample; f_slices(i) -> sample i (lazy access)."""
    W = time_derivative_weights(nt, dt)
    S = time_derivative_support(nt)
    out = None
    for m in range(5):
        term = W[j, m] * f_slices(int(S[j, m]))
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# mollification

_BUMP_NODES = 256


def _bump_quadrature():
    s, w = np.polynomial.legendre.leggauss(_BUMP_NODES)
    val = np.exp(-1.0 / (1.0 - s * s))
    mass = np.sum(w * val)
    return s, w * val / mass


_BQ_S, _BQ_W = _bump_quadrature()


def mollifier_transform(u):
    """Fourier transform phi-hat(u) of the unit-mass C-infinity bump on (-1,1);
    phi-hat(0) = 1, real and even."""
    u = np.atleast_1d(np.asarray(u, dtype=np.float64))
    out = np.cos(np.outer(u, _BQ_S)) @ _BQ_W
    return out if out.size > 1 else float(out[0])


def mollify(f, tgrid, grid, ell, ell_z, time_axis=True):
    """Anisotropic mollification: scale ell in t, x, y; ell_z in z.

    Spatial part acts in frequency space (periodic convolution); time part is
    direct quadrature with zero extension (valid for compactly supported
    data). Scales below 2 grid cells pass through with a warning. The T^3
    mean at each time is preserved (unit-mass kernels).
    """
    f = np.asarray(f, dtype=np.float64)
    hx, hy, hz = grid.spacing()
    kx, ky, kz = grid.wavenumbers()
    fac = np.ones(grid.shape)
    if ell >= 2 * hx:
        fac = fac * mollifier_transform(np.abs(kx * ell)).reshape(kx.shape)
        fac = fac * mollifier_transform(np.abs(ky * ell)).reshape(ky.shape)
    else:
        warnings.warn(f"mollify: ell = {ell:.3g} below 2 grid cells; horizontal pass-through")
    if ell_z >= 2 * hz:
        fac = fac * mollifier_transform(np.abs(kz * ell_z)).reshape(kz.shape)
    else:
        warnings.warn(f"mollify: ell_z = {ell_z:.3g} below 2 grid cells; vertical pass-through")
    out = ifft3_real(fft3(f) * fac)

    if time_axis:
        dt = tgrid.dt
        if ell >= 2 * dt:
            half = int(np.floor(ell / dt))
            offs = np.arange(-half, half + 1)
            w = np.exp(-1.0 / np.maximum(1.0 - (offs * dt / ell) ** 2, 1e-300))
            w[np.abs(offs * dt) >= ell] = 0.0
            w = w / np.sum(w)
            nt = out.shape[0]
            conv = np.zeros_like(out)
            for o, wo in zip(offs, w):
                lo, hi = max(0, -o), min(nt, nt - o)
                conv[lo:hi] += wo * out[lo + o : hi + o]
            out = conv
        else:
            warnings.warn(f"mollify: ell = {ell:.3g} below 2 time cells; time pass-through")
    return out


# ---------------------------------------------------------------------------
# norms

def sup_norm(f):
    return float(np.max(np.abs(f))) if np.asarray(f).size else 0.0


def holder_seminorm(f, alpha, grid, tgrid=None, axes="xyz", radius=4):
    """Sampled lower bound of the C^alpha seminorm: max over pairs within the
    stencil radius along each requested axis of |df| / |dp|^alpha."""
    f = np.asarray(f)
    best = 0.0
    spacings = dict(zip("xyz", grid.spacing()))
    for ax in axes:
        if ax == "t":
            if tgrid is None:
                raise ValueError("time axis requested without a time grid")
            h = tgrid.dt
            for s in range(1, min(radius, f.shape[0] - 1) + 1):
                d = np.max(np.abs(f[s:] - f[:-s]))
                best = max(best, d / (s * h) ** alpha)
        else:
            h = spacings[ax]
            axis = f.ndim - 3 + _AXIS_INDEX[ax]
            for s in range(1, radius + 1):
                d = np.max(np.abs(np.roll(f, -s, axis=axis) - f))
                best = max(best, d / (s * h) ** alpha)
    return best


def norms(f, grid, tgrid=None, holder_alpha=None):
    """Norm suite: sup, C1 (1 + all first derivatives incl. time), C1z."""
    f = np.asarray(f)
    rep = {"sup": sup_norm(f)}
    g = gradient(f, grid)
    rep["C1"] = rep["sup"] + sum(sup_norm(g[a]) for a in range(3))
    if tgrid is not None and f.shape[0] == tgrid.nt:
        rep["C1"] += sup_norm(time_derivative(f, tgrid))
    rep["C1z"] = rep["sup"] + sup_norm(g[2])
    if holder_alpha is not None:
        rep[f"holder{holder_alpha}"] = holder_seminorm(f, holder_alpha, grid, tgrid)
    return rep


# ---------------------------------------------------------------------------
# symmetric-tensor packing and binary snapshots

_PACK = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


def sym_pack(T):
    """(3, 3, ...) -> (6, ...) upper triangle (xx, xy, xz, yy, yz, zz)."""
    return np.stack([T[i, j] for i, j in _PACK])


def sym_unpack(P):
    """(6, ...) -> full (3, 3, ...)."""
    idx = [[0, 1, 2], [1, 3, 4], [2, 4, 5]]
    return np.stack([np.stack([P[idx[i][j]] for j in range(3)]) for i in range(3)])


_RANK_NCOMP = {0: 1, 1: 3, 2: 6}


def write_snapshot(path, arr, rank, grid, tgrid):
    """Binary snapshot: 64-byte header (magic 'BCI1', rank, Nx, Ny, Nz, Nt as
    little-endian u32, t0, t1 as f64), then f64 samples in
    (t, component, z, y, x) row-major order. arr: (nt, ncomp, nx, ny, nz)."""
    ncomp = _RANK_NCOMP[rank]
    arr = np.asarray(arr, dtype=np.float64)
    if arr.shape != (tgrid.nt, ncomp) + grid.shape:
        raise ValueError(f"array shape {arr.shape} does not match header")
    header = struct.pack(
        "<4s5I d d", MAGIC, rank, grid.nx, grid.ny, grid.nz, tgrid.nt, tgrid.t0, tgrid.t1
    )
    header = header.ljust(64, b"\0")
    data = np.ascontiguousarray(np.transpose(arr, (0, 1, 4, 3, 2)))
    with open(path, "wb") as fh:
        fh.write(header)
        data.astype("<f8").tofile(fh)


class SnapshotFormatError(ValueError):
    pass


def read_snapshot(path):
    """Returns (arr of shape (nt, ncomp, nx, ny, nz), rank, Grid3, TimeGrid)."""
    with open(path, "rb") as fh:
        header = fh.read(64)
        if len(header) < 64 or header[:4] != MAGIC:
            raise SnapshotFormatError("bad magic or truncated header")
        rank, nx, ny, nz, nt = struct.unpack("<5I", header[4:24])
        t0, t1 = struct.unpack("<dd", header[24:40])
        if rank not in _RANK_NCOMP:
            raise SnapshotFormatError(f"unknown rank {rank}")
        ncomp = _RANK_NCOMP[rank]
        data = np.fromfile(fh, dtype="<f8", count=nt * ncomp * nx * ny * nz)
    if data.size != nt * ncomp * nx * ny * nz:
        raise SnapshotFormatError("truncated data section")
    arr = data.reshape(nt, ncomp, nz, ny, nx).transpose(0, 1, 4, 3, 2)
    return np.ascontiguousarray(arr), rank, Grid3(nx, ny, nz), TimeGrid(t0, t1, nt)
