"""Modulated-wave construction for one substep of the convex-integration step.

Substep n adds a divergence-free velocity wave w_n = w_no + w_nc and (for
n <= 3) a mean-zero temperature wave chi_n = chi_no + chi_nc. Every wave term
lives on a lattice cell l of the partition of unity evaluated at mu * v_ell
and carries the phase

    exp( i lam_n 2^[l] (k_h-perp, 0) . (x - l t / mu) )

where [l] in 0..7 is the parity class of l. The fast phase is never sampled
on the grid as data: each term is kept as a slow complex amplitude times a
symbolic carrier e^{i xi_c . x} (one carrier per parity class, the remaining
e^{-i omega t} factor is folded into the amplitude at each time sample).
Because the partition cutoff is below one, the cells active at a point are
exactly the 8 corners of one unit cube and those corners realize all 8
parity classes, so per-class sums have pointwise at most one contributing
cell and all per-point work is a fixed 8-slot gather.
"""

from dataclasses import dataclass

import numpy as np

from . import algebra
from . import partition as pt
from . import torus_field as tf


class ParameterError(ValueError):
    pass


class AmplitudeError(ValueError):
    """Radicand e - a non-positive on the stress support (input contract
    breach: the incoming stress was larger than the budget kappa)."""


def _cross_with(gS, avec):
    """(grad S) x a for a = (s, t, 1); gS has component axis 0."""
    s, t = avec[0], avec[1]
    gx, gy, gz = gS[0], gS[1], gS[2]
    return np.stack([gy - t * gz, s * gz - gx, t * gx - s * gy])


class WaveEngine:
    """All per-substep wave machinery: slot gather, parity-class sums,
    class amplitudes and exact materialization.

    a_n, c_n: (nt, nx, ny, nz) coefficient fields of the mollified stress /
    flux block being cancelled (c_n may be None: no temperature wave).
    e_vals: (nt,) energy profile samples. v_ell: (nt, 3, nx, ny, nz)
    mollified carrier velocity. kappa: stress budget (for preconditions).

    alt_phase selects an alternate phase reading (carrier acting on
    (y, z) only); it is exposed for comparison runs and the exactness
    identities (div-free main wave) are not claimed under it.
    """

    def __init__(self, n, lam, mu, grid, tgrid, a_n, c_n, e_vals, v_ell, kappa,
                 pou=None, alt_phase=False, check=True):
        if not (isinstance(lam, (int, np.integer)) and lam > 0):
            raise ParameterError(f"lam = {lam!r} must be a positive integer")
        if not (isinstance(mu, (int, np.integer)) and mu > 0 and lam % mu == 0):
            raise ParameterError(f"mu = {mu!r} must be a positive integer dividing lam = {lam}")
        self.n = n
        self.lam = int(lam)
        self.mu = int(mu)
        self.grid = grid
        self.tgrid = tgrid
        self.frame = algebra.wave_frame(n)
        self.a_n = np.asarray(a_n)
        self.c_n = None if c_n is None else np.asarray(c_n)
        self.e_vals = np.asarray(e_vals, dtype=np.float64)
        self.v_ell = np.asarray(v_ell)
        self.kappa = float(kappa)
        self.pou = pou if pou is not None else pt.PartitionOfUnity()
        self.k = self.frame.k_arr()
        self.avec = np.array(self.frame.avec)
        if alt_phase:
            k1, k2, _ = self.frame.k
            self.carrier = np.array([0, -k2, k1], dtype=np.int64)
        else:
            self.carrier = self.frame.k_perp_arr()
        self.khsq = self.frame.kh_sq
        self._fac = 1.0 / (1j * self.lam * 2.0 ** np.arange(8))  # per-class 1/(i lam 2^c)
        self._E = self._carriers()
        self._slot_cache = {}
        self._omega_cache = {}
        self._base_cache = {}
        self._amp_cache = {}
        self._amp_j = None
        if check:
            self._check_radicand()

    # -- carriers and geometry ------------------------------------------------

    def xi(self, c):
        """Integer wavevector of parity class c."""
        return tuple(int(v) for v in self.lam * (2 ** c) * self.carrier)

    def _carriers(self):
        x, y, z = self.grid.axes()
        dot = (self.carrier[0] * x[:, None, None]
               + self.carrier[1] * y[None, :, None]
               + self.carrier[2] * z[None, None, :])
        return np.stack([np.exp(1j * self.lam * (2 ** c) * dot) for c in range(8)])

    def _check_radicand(self):
        worst = None
        for j in range(self.tgrid.nt):
            rad = self.e_vals[j] - self.a_n[j]
            supp = np.abs(self.a_n[j]) > 1e-13 * max(self.kappa, 1e-300)
            if self.c_n is not None:
                supp |= np.abs(self.c_n[j]) > 1e-13 * max(self.kappa, 1e-300)
            if not np.any(supp):
                continue
            m = np.min(np.where(supp, rad, np.inf))
            if worst is None or m < worst[0]:
                worst = (float(m), j)
        if worst is not None and worst[0] < self.kappa / 2:
            t = self.tgrid.times()[worst[1]]
            raise AmplitudeError(
                f"e - a = {worst[0]:.3e} < kappa/2 = {self.kappa / 2:.3e} on the "
                f"stress support at t = {t:.4f} (input stress exceeds budget)"
            )

    # -- slot gather ----------------------------------------------------------

    def slot_data(self, j):
        """Per-slot cell data at time sample j: b, beta, omega (8, grid),
        parity pc (8, grid, int), and l/mu (8, 3, grid)."""
        if j in self._slot_cache:
            return self._slot_cache[j]
        p = self.mu * self.v_ell[j]
        corners, alphas = self.pou.corner_alphas(p)
        rad = np.maximum(self.e_vals[j] - self.a_n[j], 0.0)
        root = np.sqrt(rad / 2.0)
        b = root * alphas
        if self.c_n is not None:
            safe = np.sqrt(2.0 * np.maximum(rad, 1e-300))
            beta = np.where(rad > 0, -self.c_n[j] / safe, 0.0) * alphas
        else:
            beta = None
        even = (corners % 2 == 0).astype(np.int64)
        pc = even[:, 0] + 2 * even[:, 1] + 4 * even[:, 2]
        kp_dot = sum(self.carrier[d] * corners[:, d] for d in range(3)).astype(np.float64)
        omega = (self.lam / self.mu) * (2.0 ** pc) * kp_dot
        lmu = corners.astype(np.float64) / self.mu
        pcf = pc.reshape(8, self.grid.npts)
        perm = np.argsort(pcf, axis=0, kind="stable")
        if not np.array_equal(np.take_along_axis(pcf, perm, axis=0),
                              np.broadcast_to(np.arange(8)[:, None], pcf.shape)):
            raise AmplitudeError("slot parities do not exhaust the classes")
        data = (b, beta, omega, pc, lmu, perm)
        self._slot_cache[j] = data
        while len(self._slot_cache) > 6:
            self._slot_cache.pop(next(iter(self._slot_cache)))
        return data

    def _scatter_many(self, values, perm):
        """Bin a batch of slot arrays (m, 8, grid) into parity classes.
        The eight slots of a cell are its corners, whose parities exhaust
        the eight classes, so binning is the pointwise permutation built in
        slot_data."""
        m = values.shape[0]
        flat = values.reshape(m, 8, self.grid.npts)
        out = np.take_along_axis(flat, perm[None], axis=1)
        return out.reshape((m, 8) + self.grid.shape)

    def _phase_factor(self, j_amp, t_phase):
        """e^{-i omega t} for the slot omegas: omega takes few distinct
        values (2^parity times an integer carrier dot), so the exponential
        is evaluated on the unique values and gathered."""
        omega = self.slot_data(j_amp)[2]
        if j_amp not in self._omega_cache:
            self._omega_cache[j_amp] = np.unique(omega.ravel(),
                                                 return_inverse=True)
            while len(self._omega_cache) > 8:
                self._omega_cache.pop(next(iter(self._omega_cache)))
        uq, inv = self._omega_cache[j_amp]
        return np.exp(-1j * t_phase * uq)[inv].reshape(omega.shape)

    def _class_sums(self, j_amp, t_phase, want_temp, want_momentum, want_omega=False):
        """Class sums with amplitudes from sample j_amp and the e^{-i omega t}
        factor evaluated at time t_phase (the split is what makes the
        amplitude-only time derivative a plain stencil over j_amp)."""
        b, beta, omega, _, lmu, perm = self.slot_data(j_amp)
        ph = self._phase_factor(j_amp, t_phase)
        temp = want_temp and beta is not None
        rows = [b * ph]
        if temp:
            rows.append(beta * ph)
        if want_momentum:
            rows.extend(rows[0] * lmu[:, d] for d in range(3))
            if temp:
                rows.extend(rows[1] * lmu[:, d] for d in range(3))
        if want_omega:
            rows.append(-1j * omega * rows[0])
            if temp:
                rows.append(-1j * omega * rows[1])
        bins = self._scatter_many(np.stack(rows), perm)
        i = 0
        out = {"U": bins[i]}; i += 1
        if temp:
            out["V"] = bins[i]; i += 1
        if want_momentum:
            out["W1"] = np.moveaxis(bins[i:i + 3], 0, 1); i += 3
            if temp:
                out["V1"] = np.moveaxis(bins[i:i + 3], 0, 1); i += 3
        if want_omega:
            out["OU"] = bins[i]; i += 1
            if temp:
                out["OV"] = bins[i]
        return out

    def _time_stencil(self, j, stride):
        """(sample indices, weights) of the amplitude time derivative at j on
        the stride-subsampled grid (stride > 1 is the Richardson companion;
        j must sit on the subsampled grid)."""
        if j % stride:
            raise ValueError("sample not on the subsampled time grid")
        nt_c = (self.tgrid.nt - 1) // stride + 1
        W = tf.time_derivative_weights(nt_c, self.tgrid.dt * stride)
        S = tf.time_derivative_support(nt_c)
        jj = j // stride
        return stride * S[jj], W[jj]

    def amplitude_time_derivative(self, j, stride=1):
        """(Tb, Tc): class sums of the amplitude-only d_t b, d_t beta at
        sample j (phase frozen at t_j)."""
        want_temp = self.c_n is not None and self.n <= 3
        t_j = self.tgrid.times()[j]
        S, W = self._time_stencil(j, stride)
        Tb = np.zeros((8,) + self.grid.shape, dtype=complex)
        Tc = np.zeros((8,) + self.grid.shape, dtype=complex) if want_temp else None
        for m in range(5):
            sums = self._class_sums(int(S[m]), t_j, want_temp, False)
            Tb += W[m] * sums["U"]
            if want_temp:
                Tc += W[m] * sums["V"]
        return Tb, Tc

    def base_fields(self, j):
        """Per-class slow amplitude scalars at sample j.

        U, V: wave base sums; W1, V1: momentum-weighted sums (class, d, grid)
        feeding the l/mu terms; Tb, Tc: amplitude-only time derivatives of U
        and V (4th-order stencil at frozen phase). V-entries are None when
        there is no temperature wave.
        """
        if j in self._base_cache:
            return self._base_cache[j]
        want_temp = self.c_n is not None and self.n <= 3
        t_j = self.tgrid.times()[j]
        cur = self._class_sums(j, t_j, want_temp, True, want_omega=True)
        Tb, Tc = self.amplitude_time_derivative(j)
        out = {
            "U": cur["U"],
            "V": cur.get("V"),
            "W1": cur["W1"],
            "V1": cur.get("V1"),
            "OU": cur["OU"],
            "OV": cur.get("OV"),
            "Tb": Tb,
            "Tc": Tc,
        }
        self._base_cache[j] = out
        while len(self._base_cache) > 2:
            self._base_cache.pop(next(iter(self._base_cache)))
        return out

    # -- class amplitudes -----------------------------------------------------

    def _memo(self, j, key, builder):
        """Per-slice cache of the heavy class-amplitude stacks.

        Several stress terms need the same stack at the same sample; slices
        are visited sequentially, so only the current slice is retained
        (the stacks are large).  Callers must not mutate the results."""
        if j != self._amp_j:
            self._amp_j = j
            self._amp_cache = {}
        if key not in self._amp_cache:
            self._amp_cache[key] = builder()
        return self._amp_cache[key]

    def _vec_amp(self, Svec):
        """Wave amplitude of a class scalar S: S k + (grad S x a)/(i lam 2^c);
        this is g_{nl} summed over the class (batched over the class axis)."""
        gS = tf.gradient(Svec, self.grid)
        fac = self._fac.reshape((1, 8) + (1,) * 3)
        kcol = self.k.reshape((3, 1, 1, 1, 1))
        return np.moveaxis(Svec[None] * kcol + _cross_with(gS, self.avec) * fac, 0, 1)

    def _vec_corr(self, Svec):
        """Correction part only: (grad S x a)/(i lam 2^c)."""
        gS = tf.gradient(Svec, self.grid)
        fac = self._fac.reshape((1, 8) + (1,) * 3)
        return np.moveaxis(_cross_with(gS, self.avec) * fac, 0, 1)

    def _scal_amp(self, Svec):
        """Temperature amplitude: S + (grad S . (k_h-perp,0))/(i lam 2^c |k_h|^2)."""
        return Svec + self._scal_corr(Svec)

    def _scal_corr(self, Svec):
        gS = tf.gradient(Svec, self.grid)
        kp = self.frame.k_perp_arr()
        dot = sum(kp[d] * gS[d] for d in range(3))
        fac = (self._fac / self.khsq).reshape((8,) + (1,) * 3)
        return dot * fac

    def _slow_divergence(self, mom):
        """Sum_d d_d mom[:, d] in one batched spectral pass."""
        mh = tf.fft3(mom)
        kx, ky, kz = self.grid.wavenumbers()
        div_h = 1j * (kx * mh[:, 0] + ky * mh[:, 1] + kz * mh[:, 2])
        return tf.ifft3(div_h)

    def class_velocity_amps(self, j, split=False):
        """G_c (8, 3, grid): full wave amplitude per class, or (main, corr)."""
        def build():
            U = self.base_fields(j)["U"]
            kcol = self.k.reshape((1, 3, 1, 1, 1))
            return U[:, None] * kcol, self._vec_corr(U)
        main, corr = self._memo(j, "G", build)
        return (main, corr) if split else main + corr

    def class_temperature_amps(self, j, split=False):
        V = self.base_fields(j)["V"]
        if V is None:
            return None if not split else (None, None)
        corr = self._memo(j, "Hcorr", lambda: self._scal_corr(V))
        return (V, corr) if split else V + corr

    def class_momentum_amps(self, j):
        """Amplitudes of sum_l w_nl (l_d / mu): (8, 3 d-axis, 3 comp, grid)."""
        def build():
            W1 = self.base_fields(j)["W1"]  # (8, 3, grid)
            return np.stack([self._vec_amp(W1[:, d]) for d in range(3)], axis=1)
        return self._memo(j, "W1amp", build)

    def class_temperature_momentum_amps(self, j):
        V1 = self.base_fields(j)["V1"]
        if V1 is None:
            return None
        return self._memo(j, "V1amp", lambda: np.stack(
            [self._scal_amp(V1[:, d]) for d in range(3)], axis=1))

    def transport_class_amps(self, j):
        """Amplitude of d_t w_n + sum_l (l/mu).grad w_nl per class (8,3,grid).

        Only slow-amplitude derivatives appear: the phase contributions of
        d_t and (l/mu).grad cancel exactly, so this is Tb-based plus the
        divergence (in d) of the momentum amplitudes.
        """
        def build():
            out = self._vec_amp(self.base_fields(j)["Tb"])
            return out + self._slow_divergence(self.class_momentum_amps(j))
        return self._memo(j, "transport", build)

    def temperature_transport_class_amps(self, j):
        if self.base_fields(j)["Tc"] is None:
            return None

        def build():
            out = self._scal_amp(self.base_fields(j)["Tc"])
            mom = self.class_temperature_momentum_amps(j)
            return out + self._slow_divergence(mom)
        return self._memo(j, "ttransport", build)

    def _dzz(self, Svec):
        """Shifted second z-derivative of class scalars (xi_z = 0 in the
        standard reading; the alternate carrier contributes i xi_z terms)."""
        g = tf.derivative(Svec, "z", self.grid)
        gg = tf.derivative(g, "z", self.grid)
        if self.carrier[2] == 0:
            return gg
        xiz = self.lam * (2.0 ** np.arange(8)) * self.carrier[2]
        xiz = xiz.reshape((8,) + (1,) * 3)
        return gg + 2j * xiz * g - xiz * xiz * Svec

    def dzz_velocity_class_amps(self, j):
        return self._memo(j, "dzzv", lambda: self._vec_amp(
            self._dzz(self.base_fields(j)["U"])))

    def dzz_temperature_class_amps(self, j):
        V = self.base_fields(j)["V"]
        if V is None:
            return None
        return self._memo(j, "dzzt", lambda: self._scal_amp(self._dzz(V)))

    def dt_velocity_class_amps(self, j, stride=1):
        """Amplitude of d_t w_n per class: the amplitude stencil plus the
        exact -i omega phase term (omega is constant on each cell, so the
        phase part passes through the correction operator).

        stride > 1 evaluates the stencil on the stride-subsampled time grid,
        which is the companion evaluation for discretization-floor estimates.
        """
        def build():
            bf = self.base_fields(j)
            Tb = (bf["Tb"] if stride == 1
                  else self.amplitude_time_derivative(j, stride)[0])
            return self._vec_amp(Tb + bf["OU"])
        return self._memo(j, ("dtv", stride), build)

    def dt_temperature_class_amps(self, j, stride=1):
        if self.base_fields(j)["V"] is None:
            return None

        def build():
            bf = self.base_fields(j)
            Tc = (bf["Tc"] if stride == 1
                  else self.amplitude_time_derivative(j, stride)[1])
            return self._scal_amp(Tc + bf["OV"])
        return self._memo(j, ("dtt", stride), build)

    # -- materialization ------------------------------------------------------

    def assemble(self, amps, vector=True):
        """2 Re sum_c amps_c E_c; amps (8, ..., grid) with class axis first."""
        E = self._E[(slice(None),) + (None,) * (amps.ndim - 4)]
        return 2.0 * np.sum((amps * E).real, axis=0)

    def velocity(self, j, split=False):
        main, corr = self.class_velocity_amps(j, split=True)
        if split:
            return self.assemble(main), self.assemble(corr)
        return self.assemble(main + corr)

    def temperature(self, j, split=False):
        main, corr = self.class_temperature_amps(j, split=True)
        zeros = np.zeros(self.grid.shape)
        if main is None:
            return (zeros, zeros.copy()) if split else zeros
        if split:
            return self.assemble(main), self.assemble(corr)
        return self.assemble(main + corr)

    def shifted_gradient(self, amps):
        """Gradient amplitudes d_d -> i xi_d amp + grad amp, class axis first:
        returns (3, 8, ..., grid)."""
        g = tf.gradient(amps, self.grid)
        for d in range(3):
            xid = (self.lam * (2.0 ** np.arange(8)) * self.carrier[d])
            g[d] = g[d] + 1j * xid.reshape((8,) + (1,) * (amps.ndim - 1)) * amps
        return g

    def velocity_gradient(self, j):
        """Materialized grad w_n: (3 deriv, 3 comp, grid)."""
        G = self.class_velocity_amps(j)
        g = self.shifted_gradient(G)
        return np.stack([self.assemble(g[d]) for d in range(3)])

    def temperature_gradient(self, j):
        H = self.class_temperature_amps(j)
        if H is None:
            return np.zeros((3,) + self.grid.shape)
        g = self.shifted_gradient(H)
        return np.stack([self.assemble(g[d]) for d in range(3)])

    def dzz_velocity(self, j):
        return self.assemble(self.dzz_velocity_class_amps(j))

    def dzz_temperature(self, j):
        amps = self.dzz_temperature_class_amps(j)
        if amps is None:
            return np.zeros(self.grid.shape)
        return self.assemble(amps)

    # -- identities -----------------------------------------------------------

    def _in_band(self, xi):
        n = self.grid.shape
        return all(abs(xi[d]) < n[d] // 2 for d in range(3))

    def wave_mean(self, j, kind="w"):
        """Exact T^3 mean of the wave (vector for 'w', scalar for 'chi').

        Computed in coefficient space: a term amp * e^{i xi.x} integrates to
        the amplitude's Fourier coefficient at -xi, which is identically zero
        for carriers outside the resolved band (the slow amplitude is a
        band-limited interpolant) and cancels to roundoff inside it (curl /
        divergence structure). The grid mean of the materialized field is an
        aliasing artifact and is deliberately not used.
        """
        out = None
        for c in range(8):
            xi = self.xi(c)
            if not self._in_band(xi):
                continue
            amps = (self.class_velocity_amps(j)[c] if kind == "w"
                    else self.class_temperature_amps(j))
            if amps is None:
                continue
            if kind != "w":
                amps = amps[c]
            idx = tuple(np.ravel([-x % n for x, n in zip(xi, self.grid.shape)]))
            coef = tf.fft3(amps)[..., idx[0], idx[1], idx[2]] / self.grid.npts
            out = 2 * coef.real if out is None else out + 2 * coef.real
        if out is None:
            zero = np.zeros(3) if kind == "w" else 0.0
            return zero
        return out

    def wave_divergence(self, j):
        """Materialized div w_n via the shifted symbol (exactly the curl
        structure cancelling; nonzero only through FFT roundoff)."""
        G = self.class_velocity_amps(j)
        g = self.shifted_gradient(G)
        div = g[0][:, 0] + g[1][:, 1] + g[2][:, 2]
        return self.assemble(div)

    def cancellation_residual(self, j):
        """(|2 sum_l b^2 - (e - a)|_sup, |2 sum_l beta b + c|_sup); both are
        exact partition identities, nonzero only through roundoff."""
        b, beta, omega, pc, lmu = self.slot_data(j)
        rad = np.maximum(self.e_vals[j] - self.a_n[j], 0.0)
        r1 = float(np.max(np.abs(2.0 * np.sum(b * b, axis=0) - rad)))
        if beta is None:
            return r1, 0.0
        r2 = float(np.max(np.abs(2.0 * np.sum(beta * b, axis=0) + self.c_n[j])))
        return r1, r2

    def sup_b(self):
        """max_l |b_nl| over all samples (sets the recorded constant M)."""
        worst = 0.0
        for j in range(self.tgrid.nt):
            b = self.slot_data(j)[0]
            worst = max(worst, float(np.max(b)))
        return worst


# ---------------------------------------------------------------------------
# public construction API

@dataclass
class AmplitudeSet:
    engine: WaveEngine

    @property
    def n(self):
        return self.engine.n

    def b(self, l, j):
        """Amplitude b_nl on the grid at time sample j (direct formula)."""
        e = self.engine
        rad = np.maximum(e.e_vals[j] - e.a_n[j], 0.0)
        return np.sqrt(rad / 2.0) * e.pou.alpha(l, e.mu * e.v_ell[j])

    def beta(self, l, j):
        e = self.engine
        if e.c_n is None or e.n > 3:
            return np.zeros(e.grid.shape)
        rad = np.maximum(e.e_vals[j] - e.a_n[j], 0.0)
        safe = np.sqrt(2.0 * np.maximum(rad, 1e-300))
        return np.where(rad > 0, -e.c_n[j] / safe, 0.0) * e.pou.alpha(l, e.mu * e.v_ell[j])

    def g(self, l, j, sign=+1):
        """Wave coefficient g_{+-nl} (3, grid), complex."""
        e = self.engine
        b = self.b(l, j).astype(complex)
        gb = tf.gradient(b, e.grid)
        fac = 1.0 / (sign * 1j * e.lam * 2 ** pt.parity_index(l))
        return b[None] * e.k.reshape(3, 1, 1, 1) + fac * _cross_with(gb, e.avec)

    def h(self, l, j, sign=+1):
        e = self.engine
        beta = self.beta(l, j).astype(complex)
        gb = tf.gradient(beta, e.grid)
        kp = e.frame.k_perp_arr()
        fac = 1.0 / (sign * 1j * e.lam * 2 ** pt.parity_index(l) * e.khsq)
        return beta + fac * sum(kp[d] * gb[d] for d in range(3))


@dataclass
class ModulatedWaveSum:
    """Symbolic wave field: per-class slow amplitudes against the carriers
    e^{i xi_c . x}, materialized on demand per time sample."""

    engine: WaveEngine
    kind: str  # 'w_o' | 'w_c' | 'chi_o' | 'chi_c'

    def _amps(self, j):
        e = self.engine
        if self.kind in ("w_o", "w_c"):
            main, corr = e.class_velocity_amps(j, split=True)
            return main if self.kind == "w_o" else corr
        main, corr = e.class_temperature_amps(j, split=True)
        return main if self.kind == "chi_o" else corr

    def terms(self, j):
        """[(amplitude, xi, class)] with the conjugate partner implied."""
        amps = self._amps(j)
        if amps is None:
            return []
        return [(amps[c], self.engine.xi(c), c) for c in range(8)]

    def evaluate(self, j):
        amps = self._amps(j)
        shape = self.engine.grid.shape
        if amps is None:
            return np.zeros(shape if self.kind.startswith("chi") else (3,) + shape)
        return self.engine.assemble(amps)

    def evaluate_all(self):
        return np.stack([self.evaluate(j) for j in range(self.engine.tgrid.nt)])


def build_amplitudes(n, a_n, c_n, e_vals, v_prev_mollified, mu, lam, grid, tgrid,
                     kappa, pou=None, alt_phase=False):
    """AmplitudeSet for substep n; validates the radicand precondition and
    the lam / mu divisibility."""
    eng = WaveEngine(n, lam, mu, grid, tgrid, a_n, c_n if n <= 3 else None,
                     e_vals, v_prev_mollified, kappa, pou=pou, alt_phase=alt_phase)
    return AmplitudeSet(engine=eng)


def build_velocity_wave(n, amps, lam=None, mu=None):
    """(w_no, w_nc) as symbolic wave sums; lam/mu, if given, must agree with
    the set they were built with."""
    _check_params(amps, lam, mu)
    return (ModulatedWaveSum(amps.engine, "w_o"), ModulatedWaveSum(amps.engine, "w_c"))


def build_temperature_wave(n, amps, lam=None, mu=None):
    _check_params(amps, lam, mu)
    return (ModulatedWaveSum(amps.engine, "chi_o"), ModulatedWaveSum(amps.engine, "chi_c"))


def _check_params(amps, lam, mu):
    if lam is not None and lam != amps.engine.lam:
        raise ParameterError(f"lam = {lam} does not match the amplitude set ({amps.engine.lam})")
    if mu is not None and mu != amps.engine.mu:
        raise ParameterError(f"mu = {mu} does not match the amplitude set ({amps.engine.mu})")
