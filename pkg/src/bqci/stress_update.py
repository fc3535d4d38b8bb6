"""Stress and flux updates for one cancellation substep.

Each substep n builds the modulated wave from the mollified block
coefficients (the perturbation engine), then reassembles the stress and
flux: the oscillation interactions are expanded into discrete wavevector
modes (every carrier is an integer multiple of the shared direction, so a
mode is q * carrier), the inverse-divergence operators act mode by mode
through shifted symbols, and the slow interaction terms are materialized
pointwise.

Divergence bookkeeping: for every contribution to delta R / delta f the
exact divergence of the materialized field is accumulated alongside it
(for inverse-divergence outputs this is the operator input minus its mean,
an exact symbol identity; for pointwise products it is the product rule
over stored gradients).  The stored divergences are what the residual
evaluator consumes -- fast content must never be differentiated through a
plain grid transform.  Terms whose exact value is a materially-zero
divergence (div of the full wave, div of the accumulated velocity) are
omitted from the stores; they sit far below the time-discretization floor.
"""

import time

import numpy as np

from . import algebra
from . import torus_field as tf
from .perturbation import WaveEngine

__all__ = [
    "StepState",
    "SubstepAssembler",
    "assemble_interactions",
    "cancel_block",
    "run_substep",
]


# ---------------------------------------------------------------------------
# shifted spectral kernels


def _shifted_k(grid, xi):
    kx, ky, kz = grid.wavenumbers()
    return kx + xi[0], ky + xi[1], kz + xi[2]


def _add_shifted(acc_hat, fh, xi):
    """Accumulate fh * e^{i xi.x} in spectral space: on the sampled grid the
    integer-vector phase is exactly a cyclic spectral shift, which lets the
    caller share a single inverse transform across all modes."""
    acc_hat += np.roll(fh, (int(xi[0]), int(xi[1]), int(xi[2])),
                       axis=(-3, -2, -1))


def _r_hat(vh, K, npts):
    """Symmetric inverse-divergence symbol on a shifted vector spectrum.

    Returns (Rh6 packed xx,xy,xz,yy,yz,zz and the dropped-mode mean, a length-3
    complex coefficient; zero when the shift has no resolved zero mode).
    """
    KX, KY, KZ = K
    k2 = KX * KX + KY * KY + KZ * KZ
    sing = (k2 == 0)
    mean = np.zeros(3, dtype=complex)
    if np.any(sing):
        mean = vh[:, sing].reshape(3) / npts
        vh = np.where(sing, 0.0, vh)
    inv = -1.0 / np.where(sing, 1.0, k2)
    u = vh * inv
    s = 1j * (KX * u[0] + KY * u[1] + KZ * u[2])
    Rh6 = np.stack([
        2j * KX * u[0] - s,
        1j * (KY * u[0] + KX * u[1]),
        1j * (KZ * u[0] + KX * u[2]),
        2j * KY * u[1] - s,
        1j * (KZ * u[1] + KY * u[2]),
        2j * KZ * u[2] - s,
    ])
    return Rh6, mean


def _g_hat(fh, K, npts):
    """Gradient-of-inverse-Laplacian symbol on a shifted scalar spectrum."""
    KX, KY, KZ = K
    k2 = KX * KX + KY * KY + KZ * KZ
    sing = (k2 == 0)
    mean = 0.0 + 0.0j
    if np.any(sing):
        mean = complex(fh[sing].reshape(())) / npts
        fh = np.where(sing, 0.0, fh)
    u = fh * (-1.0 / np.where(sing, 1.0, k2))
    return np.stack([1j * KX * u, 1j * KY * u, 1j * KZ * u]), mean


# ---------------------------------------------------------------------------
# per-substep assembler

class SubstepAssembler:
    """Builds the delta stress / delta flux contributions at one time sample.

    v_prev / theta_prev are the accumulated fields *before* this substep's
    wave is added; grad_* are their exact materialized gradients.  theta_ell
    is the mollified temperature driving the flux interaction terms.  The
    R0 / a_ell (f0 / c_ell) pairs are only supplied on the first substep,
    where the mollification residual enters the update.
    """

    _R_ZERO_KEYS = ("oscillation", "transport", "error_N", "error_corr", "mollification")

    def __init__(self, engine, v_prev, grad_v_prev, theta_prev, grad_theta_prev,
                 theta_ell, R0=None, a_ell=None, f0=None, c_ell=None):
        self.e = engine
        self.grid = engine.grid
        self.v_prev = v_prev
        self.grad_v_prev = grad_v_prev
        self.theta_prev = theta_prev
        self.grad_theta_prev = grad_theta_prev
        self.theta_ell = theta_ell
        self.R0 = R0
        self.a_ell = a_ell
        self.f0 = f0
        self.c_ell = c_ell
        self._j = None
        self._memo = {}

    # -- per-slice memo -------------------------------------------------------

    def _m(self, j, name, fn):
        if self._j != j:
            self._j = j
            self._memo = {}
        if name not in self._memo:
            self._memo[name] = fn()
        return self._memo[name]

    def _splits(self, j):
        return self._m(j, "Gsplit", lambda: self.e.class_velocity_amps(j, split=True))

    def _tsplits(self, j):
        return self._m(j, "Hsplit", lambda: self.e.class_temperature_amps(j, split=True))

    def w_parts(self, j):
        def build():
            main, corr = self._splits(j)
            return self.e.assemble(main), self.e.assemble(corr)
        return self._m(j, "w", build)

    def chi_parts(self, j):
        def build():
            main, corr = self._tsplits(j)
            if main is None:
                z = np.zeros(self.grid.shape)
                return z, z.copy()
            return self.e.assemble(main), self.e.assemble(corr)
        return self._m(j, "chi", build)

    def _grad_w_parts(self, j):
        def build():
            main, corr = self._splits(j)
            gm = self.e.shifted_gradient(main)
            gc = self.e.shifted_gradient(corr)
            go = np.stack([self.e.assemble(gm[d]) for d in range(3)])
            gcc = np.stack([self.e.assemble(gc[d]) for d in range(3)])
            return go, gcc
        return self._m(j, "grad_w", build)

    def _grad_chi_parts(self, j):
        def build():
            main, corr = self._tsplits(j)
            if main is None:
                z = np.zeros((3,) + self.grid.shape)
                return z, z.copy()
            gm = self.e.shifted_gradient(main)
            gc = self.e.shifted_gradient(corr)
            go = np.stack([self.e.assemble(gm[d]) for d in range(3)])
            gcc = np.stack([self.e.assemble(gc[d]) for d in range(3)])
            return go, gcc
        return self._m(j, "grad_chi", build)

    def _mom(self, j):
        return self._m(j, "mom", lambda: self.e.class_momentum_amps(j))

    def _tmom(self, j):
        return self._m(j, "tmom", lambda: self.e.class_temperature_momentum_amps(j))

    def _div_v_ell(self, j):
        def build():
            v = self.e.v_ell[j]
            return sum(tf.derivative(v[d], "xyz"[d], self.grid) for d in range(3))
        return self._m(j, "div_v_ell", build)

    def _grad_theta_ell(self, j):
        return self._m(j, "grad_theta_ell",
                       lambda: tf.gradient(self.theta_ell[j], self.grid))

    # -- oscillation mode expansion -------------------------------------------

    def oscillation_modes(self, j):
        """Quadratic wave interactions as {q: scalar amplitude}: the main-wave
        square is sum_q 2 Re(A_q e^{i q carrier.x}) k (x) k, with the zero
        mode (the block being cancelled) removed."""
        U = self.e.base_fields(j)["U"]
        return self._pair_modes(U, U)

    def flux_oscillation_modes(self, j):
        V = self.e.base_fields(j)["V"]
        if V is None:
            return None
        return self._pair_modes(self.e.base_fields(j)["U"], V)

    def _pair_modes(self, A, B):
        active_a = [c for c in range(8) if np.any(A[c])]
        active_b = [c for c in range(8) if np.any(B[c])]
        modes = {}
        lam = self.e.lam
        for c in active_a:
            for cp in active_b:
                for sign, other in ((1, B[cp]), (-1, B[cp].conj())):
                    q = lam * (2 ** c + sign * 2 ** cp)
                    if q == 0:
                        continue
                    amp = A[c] * other
                    if q < 0:
                        q, amp = -q, amp.conj()
                    if q in modes:
                        modes[q] = modes[q] + amp
                    else:
                        modes[q] = amp
        return modes

    # -- inverse-divergence applications --------------------------------------

    def r_div_M(self, j):
        """R(div M): per mode the input is a scalar times k (x) k, so the
        divergence is rank-one and each mode costs one forward and six
        inverse transforms.

        The stored divergence is not the per-mode symbol identity but the
        pointwise main-wave self-advection plus the spectral divergence of
        the block being cancelled: that is what the equation actually gains
        when the wave square replaces the block, evaluated with the same
        per-class gradients the derivative stores carry.  Differentiating
        the mode amplitudes (products of class amplitudes) spectrally would
        disagree with those stores near the grid cutoff."""
        acc6 = np.zeros((6,) + self.grid.shape, dtype=complex)
        k = self.e.k.astype(np.float64)
        for q, A in self.oscillation_modes(j).items():
            xi = q * self.e.carrier
            K = _shifted_k(self.grid, xi)
            Ah = tf.fft3(A)
            dh = 1j * (k[0] * K[0] + k[1] * K[1] + k[2] * K[2]) * Ah
            Rh6, _ = _r_hat(dh[None] * k.reshape(3, 1, 1, 1), K, self.grid.npts)
            # e^{i q carrier.x} on the sampled grid is an exact spectral
            # shift, so the phase multiply folds into one accumulated
            # inverse transform after the mode loop
            _add_shifted(acc6, Rh6, xi)
        delta6 = 2.0 * tf.ifft3(acc6).real
        w_o, _ = self.w_parts(j)
        go, _ = self._grad_w_parts(j)
        div_wo = go[0, 0] + go[1, 1] + go[2, 2]
        div3 = (np.einsum("b...,ba...->a...", w_o, go) + w_o * div_wo
                + k.reshape(3, 1, 1, 1)
                * np.einsum("b...,b...->...", k, tf.gradient(self.e.a_n[j], self.grid)))
        return delta6, div3

    def g_div_K(self, j):
        """G(div K) with the same pointwise divergence bookkeeping as
        r_div_M: main-wave advection of the main temperature wave plus the
        spectral divergence of the cancelled flux block."""
        modes = self.flux_oscillation_modes(j)
        if modes is None:
            return None
        acc3 = np.zeros((3,) + self.grid.shape, dtype=complex)
        k = self.e.k.astype(np.float64)
        for q, A in modes.items():
            xi = q * self.e.carrier
            K = _shifted_k(self.grid, xi)
            Ah = tf.fft3(A)
            dh = 1j * (k[0] * K[0] + k[1] * K[1] + k[2] * K[2]) * Ah
            Gh3, _ = _g_hat(dh, K, self.grid.npts)
            _add_shifted(acc3, Gh3, xi)
        delta3 = 2.0 * tf.ifft3(acc3).real
        w_o, _ = self.w_parts(j)
        go, _ = self._grad_w_parts(j)
        div_wo = go[0, 0] + go[1, 1] + go[2, 2]
        chi_o, _ = self.chi_parts(j)
        gco, _ = self._grad_chi_parts(j)
        div1 = (np.einsum("b...,b...->...", w_o, gco) + chi_o * div_wo
                + np.einsum("b...,b...->...", k, tf.gradient(self.e.c_n[j], self.grid)))
        return delta3, div1

    def _r_class_modes(self, amps):
        """R applied to a sum of class-carrier vector amplitudes; the stored
        divergence is the materialized input minus its (exact) mean."""
        acc6 = np.zeros((6,) + self.grid.shape, dtype=complex)
        div3 = np.zeros((3,) + self.grid.shape)
        for c in range(8):
            if not np.any(amps[c]):
                continue
            K = _shifted_k(self.grid, self.e.xi(c))
            Rh6, mean = _r_hat(tf.fft3(amps[c]), K, self.grid.npts)
            _add_shifted(acc6, Rh6, self.e.xi(c))
            E = self.e._E[c]
            div3 += 2.0 * (amps[c] * E).real
            div3 -= 2.0 * mean.real.reshape(3, 1, 1, 1)
        return 2.0 * tf.ifft3(acc6).real, div3

    def _g_class_modes(self, amps):
        acc3 = np.zeros((3,) + self.grid.shape, dtype=complex)
        div1 = np.zeros(self.grid.shape)
        for c in range(8):
            if not np.any(amps[c]):
                continue
            K = _shifted_k(self.grid, self.e.xi(c))
            Gh3, mean = _g_hat(tf.fft3(amps[c]), K, self.grid.npts)
            _add_shifted(acc3, Gh3, self.e.xi(c))
            E = self.e._E[c]
            div1 += 2.0 * (amps[c] * E).real - 2.0 * mean.real
        return 2.0 * tf.ifft3(acc3).real, div1

    def transport_R(self, j):
        return self._r_class_modes(self.e.transport_class_amps(j))

    def transport_f(self, j):
        amps = self.e.temperature_transport_class_amps(j)
        if amps is None:
            return None
        return self._g_class_modes(amps)

    def r_dzz_w(self, j):
        return self._r_class_modes(self.e.dzz_velocity_class_amps(j))

    def r_buoyancy(self, j):
        """R(chi e3) -- the buoyancy of the temperature wave."""
        main, corr = self._tsplits(j)
        if main is None:
            return None
        amps = np.zeros((8, 3) + self.grid.shape, dtype=complex)
        amps[:, 2] = main + corr
        return self._r_class_modes(amps)

    def g_dzz_chi(self, j):
        amps = self.e.dzz_temperature_class_amps(j)
        if amps is None:
            return None
        return self._g_class_modes(amps)

    # -- pointwise interaction terms ------------------------------------------

    def N_field(self, j):
        """Slow interaction of the wave with the carrier velocity:
        w (x) v + v (x) w - sym(sum_l w_l (x) l/mu)."""
        w_o, w_c = self.w_parts(j)
        w = w_o + w_c
        v = self.v_prev[j]
        mom = self._mom(j)  # (8, d, comp, grid)
        Pm = self.e.assemble(mom)  # (d, comp, grid): sum_l w_comp l_d / mu
        Q = np.swapaxes(Pm, 0, 1)  # Q[a, b] = sum_l w_a l_b / mu
        T = (w[:, None] * v[None, :] + v[:, None] * w[None, :]
             - Q - np.swapaxes(Q, 0, 1))
        go, gc = self._grad_w_parts(j)
        grad_w = go + gc
        vdw = np.einsum("b...,ba...->a...", v, grad_w)
        wdv = np.einsum("b...,ba...->a...", w, self.grad_v_prev[j])
        # cell-velocity advection of the wave, with the exact same amplitude
        # bookkeeping the transport and time-derivative stores use
        adv = self.e.assemble(self.e.transport_class_amps(j)
                              - self.e.dt_velocity_class_amps(j))
        div3 = vdw + wdv - adv
        return tf.sym_pack(T), div3

    def product_corrections(self, j):
        """Quadratic terms involving the correction wave (main x corr and
        corr x corr)."""
        w_o, w_c = self.w_parts(j)
        go, gc = self._grad_w_parts(j)
        div_wo = go[0, 0] + go[1, 1] + go[2, 2]
        div_wc = gc[0, 0] + gc[1, 1] + gc[2, 2]
        T = (w_o[:, None] * w_c[None, :] + w_c[:, None] * w_o[None, :]
             + w_c[:, None] * w_c[None, :])
        div3 = (w_o * div_wc + np.einsum("b...,ba...->a...", w_c, go)
                + w_c * div_wo + np.einsum("b...,ba...->a...", w_o, gc)
                + w_c * div_wc + np.einsum("b...,ba...->a...", w_c, gc))
        return tf.sym_pack(T), div3

    def flux_momentum(self, j):
        """(v_ell - l/mu) paired with the temperature wave."""
        tmom = self._tmom(j)
        if tmom is None:
            return None
        chi_o, chi_c = self.chi_parts(j)
        chi = chi_o + chi_c
        Pchi = self.e.assemble(tmom)  # (d, grid): sum_l chi_l l_d / mu
        v_ell = self.e.v_ell[j]
        t5 = v_ell * chi - Pchi
        grad_chi = sum(self._grad_chi_parts(j))
        adv = self.e.assemble(self.e.temperature_transport_class_amps(j)
                              - self.e.dt_temperature_class_amps(j))
        div1 = (self._div_v_ell(j) * chi
                + np.einsum("b...,b...->...", v_ell, grad_chi)
                - adv)
        return t5, div1

    def flux_drift(self, j):
        chi_o, chi_c = self.chi_parts(j)
        chi = chi_o + chi_c
        if not np.any(chi):
            return None
        dv = self.v_prev[j] - self.e.v_ell[j]
        grad_chi = sum(self._grad_chi_parts(j))
        div1 = (-self._div_v_ell(j) * chi
                + np.einsum("b...,b...->...", dv, grad_chi))
        return dv * chi, div1

    def flux_products(self, j):
        chi_o, chi_c = self.chi_parts(j)
        if not np.any(chi_o) and not np.any(chi_c):
            return None
        w_o, w_c = self.w_parts(j)
        go, gc = self._grad_w_parts(j)
        gco, gcc = self._grad_chi_parts(j)
        div_wo = go[0, 0] + go[1, 1] + go[2, 2]
        div_wc = gc[0, 0] + gc[1, 1] + gc[2, 2]
        chi = chi_o + chi_c
        grad_chi = gco + gcc
        field = w_c * chi + w_o * chi_c
        div1 = (div_wc * chi + np.einsum("b...,b...->...", w_c, grad_chi)
                + div_wo * chi_c + np.einsum("b...,b...->...", w_o, gcc))
        return field, div1

    def flux_theta_osc(self, j):
        """G(w . grad theta_ell), the fast flux induced on the mollified
        temperature."""
        main, corr = self._splits(j)
        G = main + corr  # (8, 3, grid)
        gt = self._grad_theta_ell(j)
        amps = np.einsum("cb...,b...->c...", G, gt.astype(complex))
        return self._g_class_modes(amps)

    def flux_theta_drift(self, j):
        w = sum(self.w_parts(j))
        dtheta = self.theta_prev[j] - self.theta_ell[j]
        gdiff = self.grad_theta_prev[j] - self._grad_theta_ell(j)
        return w * dtheta, np.einsum("b...,b...->...", w, gdiff)

    # -- mollification residuals (first substep only) -------------------------

    def mollification_R(self, j):
        if self.R0 is None:
            return None
        Rm6 = self.R0[j] - np.einsum("i...,im->m...", self.a_ell[j], _DYADS6)
        T = tf.sym_unpack(Rm6)
        div3 = np.stack([
            sum(tf.derivative(T[a, b], "xyz"[b], self.grid) for b in range(3))
            for a in range(3)
        ])
        return Rm6, div3

    def mollification_f(self, j):
        if self.f0 is None:
            return None
        fm = self.f0[j] - np.einsum("i...,ia->a...", self.c_ell[j][:3], _KVECS[:3])
        div1 = sum(tf.derivative(fm[b], "xyz"[b], self.grid) for b in range(3))
        return fm, div1

    # -- slice totals ---------------------------------------------------------

    def delta_R_slice(self, j, corrupt_transport=None):
        """(delta6, div3, parts) at time sample j; parts is the category
        breakdown whose fields sum to delta6 by construction."""
        osc = self.r_div_M(j)
        tr = self.transport_R(j)
        if corrupt_transport is not None:
            tr = (tr[0], tr[1] * corrupt_transport)
        nn = self.N_field(j)
        zz = self.r_dzz_w(j)
        pr = self.product_corrections(j)
        buoy = self.r_buoyancy(j)
        corr6 = pr[0] - zz[0]
        cdiv = pr[1] - zz[1]
        if buoy is not None:
            corr6 = corr6 - buoy[0]
            cdiv = cdiv - buoy[1]
        mol = self.mollification_R(j)
        z6 = np.zeros((6,) + self.grid.shape)
        parts = {
            "oscillation": osc[0],
            "transport": tr[0],
            "error_N": nn[0],
            "error_corr": corr6,
            "mollification": mol[0] if mol is not None else z6,
        }
        delta6 = osc[0] + tr[0] + nn[0] + corr6 + parts["mollification"]
        div3 = osc[1] + tr[1] + nn[1] + cdiv
        if mol is not None:
            div3 = div3 + mol[1]
        return delta6, div3, parts

    def delta_f_slice(self, j):
        z3 = np.zeros((3,) + self.grid.shape)
        parts = {k: z3 for k in self._R_ZERO_KEYS}
        delta3 = np.zeros((3,) + self.grid.shape)
        div1 = np.zeros(self.grid.shape)

        def add(kind, term):
            nonlocal delta3, div1
            if term is None:
                return
            parts[kind] = parts[kind] + term[0]
            delta3 += term[0]
            div1 += term[1]

        add("oscillation", self.g_div_K(j))
        add("transport", self.transport_f(j))
        dz = self.g_dzz_chi(j)
        if dz is not None:
            add("error_corr", (-dz[0], -dz[1]))
        add("error_corr", self.flux_products(j))
        add("error_N", self.flux_momentum(j))
        add("error_N", self.flux_drift(j))
        add("error_N", self.flux_theta_osc(j))
        add("error_N", self.flux_theta_drift(j))
        add("mollification", self.mollification_f(j))
        return delta3, div1, parts


# ---------------------------------------------------------------------------
# step state

_KVECS = np.stack([algebra.basis_vector(i).astype(np.float64) for i in range(1, 7)])
_DYADS6 = np.stack([
    tf.sym_pack(np.outer(_KVECS[i], _KVECS[i])) for i in range(6)
])


class StepState:
    """Mutable state carried through the six substeps of one outer step.

    All fields are (nt, ...) arrays.  grad_v / grad_theta, dt_*, dzz_* are the
    exact derivative stores of the accumulated fields (initialized from the
    slow starting tuple, extended wave by wave).  a / c hold the mollified
    block coefficients fixed at the start of the step; delta_R / delta_f
    accumulate the substep updates, and div_*_store their exact divergences.
    The *_coarse stores hold the half-resolution time-derivative companions
    used for discretization-floor estimates (None when nt does not halve).
    """

    def __init__(self, grid, tgrid, mu, kappa, e_vals, pou,
                 v, theta, p, grad_v, grad_theta,
                 dt_v, dt_theta, dzz_v, dzz_theta,
                 R0, f0, div_R0_store, div_f0_store, a, c,
                 dt_v_coarse=None, dt_theta_coarse=None):
        self.grid = grid
        self.tgrid = tgrid
        self.mu = mu
        self.kappa = kappa
        self.e_vals = np.asarray(e_vals, dtype=np.float64)
        self.pou = pou
        self.v = v
        self.theta = theta
        self.p = p
        self.grad_v = grad_v
        self.grad_theta = grad_theta
        self.dt_v = dt_v
        self.dt_theta = dt_theta
        self.dzz_v = dzz_v
        self.dzz_theta = dzz_theta
        self.R0 = R0
        self.f0 = f0
        self.div_R0_store = div_R0_store
        self.div_f0_store = div_f0_store
        self.a = a
        self.c = c
        self.dt_v_coarse = dt_v_coarse
        self.dt_theta_coarse = dt_theta_coarse
        nt = tgrid.nt
        self.delta_R = np.zeros((nt, 6) + grid.shape)
        self.delta_f = np.zeros((nt, 3) + grid.shape)
        self.div_R_store = np.zeros((nt, 3) + grid.shape)
        self.div_f_store = np.zeros((nt,) + grid.shape)
        self.completed = 0
        self.reports = []

    # -- assembled views ------------------------------------------------------

    def stress_field(self):
        """Current stress (nt, 6): remaining structured blocks plus the
        accumulated delta (before any substep this is just R0)."""
        if self.completed == 0:
            return self.R0.copy()
        out = self.delta_R.copy()
        e = self.e_vals.reshape(-1, *([1] * 4))
        for i in range(self.completed, 6):
            out -= (e - self.a[:, i : i + 1]) * _DYADS6[i].reshape(1, 6, 1, 1, 1)
        return out

    def flux_field(self):
        if self.completed == 0:
            return self.f0.copy()
        out = self.delta_f.copy()
        for i in range(self.completed, 3):
            out += self.c[:, i : i + 1] * _KVECS[i].reshape(1, 3, 1, 1, 1)
        return out

    def stress_divergence(self, j):
        """Exact divergence of the current stress at time sample j."""
        if self.completed == 0:
            return self.div_R0_store[j]
        out = self.div_R_store[j].copy()
        for i in range(self.completed, 6):
            k = _KVECS[i]
            d = sum(k[b] * tf.derivative(self.a[j, i], "xyz"[b], self.grid)
                    for b in range(3))
            out += d * k.reshape(3, 1, 1, 1)
        return out

    def flux_divergence(self, j):
        if self.completed == 0:
            return self.div_f0_store[j]
        out = self.div_f_store[j].copy()
        for i in range(self.completed, 3):
            k = _KVECS[i]
            out += sum(k[b] * tf.derivative(self.c[j, i], "xyz"[b], self.grid)
                       for b in range(3))
        return out


# ---------------------------------------------------------------------------
# public entry points

def assemble_interactions(engine, j, v_prev, grad_v_prev, theta_prev=None,
                          grad_theta_prev=None, theta_ell=None):
    """(M modes, N field, K modes) of substep interactions at sample j.

    M and K are {q: amplitude} over integer multiples of the carrier; N is
    the materialized (6, grid) slow interaction."""
    if theta_prev is None:
        theta_prev = np.zeros((engine.tgrid.nt,) + engine.grid.shape)
    if grad_theta_prev is None:
        grad_theta_prev = np.zeros((engine.tgrid.nt, 3) + engine.grid.shape)
    if theta_ell is None:
        theta_ell = np.zeros((engine.tgrid.nt,) + engine.grid.shape)
    asm = SubstepAssembler(engine, v_prev, grad_v_prev, theta_prev,
                           grad_theta_prev, theta_ell)
    M = asm.oscillation_modes(j)
    N6, _ = asm.N_field(j)
    K = asm.flux_oscillation_modes(j)
    return M, N6, K


def cancel_block(engine, j):
    """Residuals of the two exact partition identities at sample j
    (quadratic sum against the stress block, cross sum against the flux)."""
    return engine.cancellation_residual(j)


def run_substep(state, n, lam, ell, ell_z, alt_phase=False, corrupt_transport=None,
                band=None):
    """Execute cancellation substep n on the step state in place.

    Mollifies the carried fields at (ell, ell_z), builds the wave engine on
    block n, accumulates delta R / delta f with their divergence stores, and
    adds the wave to the velocity (and temperature, substeps 1-3) together
    with all derivative stores.  Returns the substep report.

    The mollified engine inputs are truncated to |m| <= band on every axis
    (default: smallest grid extent over four).  Sampling folds the carried
    wave carriers onto in-band grid frequencies; the mollifier damps but
    cannot remove those images, and any remnant makes the cell-amplitude
    fields under-resolved, which shows up directly in the equation residual.
    """
    if n != state.completed + 1 or not 1 <= n <= 6:
        raise ValueError(f"substep {n} out of order (completed = {state.completed})")
    t_start = time.perf_counter()
    grid, tgrid = state.grid, state.tgrid
    if band is None:
        band = min(grid.shape) // 4
    v_ell = tf.low_pass(tf.mollify(state.v, tgrid, grid, ell, ell_z), grid, band)
    theta_ell = tf.low_pass(
        tf.mollify(state.theta, tgrid, grid, ell, ell_z), grid, band)
    engine = WaveEngine(
        n, lam, state.mu, grid, tgrid,
        state.a[:, n - 1],
        state.c[:, n - 1] if n <= 3 else None,
        state.e_vals, v_ell, state.kappa, pou=state.pou, alt_phase=alt_phase,
    )
    first = n == 1
    asm = SubstepAssembler(
        engine, state.v, state.grad_v, state.theta, state.grad_theta, theta_ell,
        R0=state.R0 if first else None, a_ell=state.a if first else None,
        f0=state.f0 if first else None, c_ell=state.c if first else None,
    )
    nt = tgrid.nt
    sup = dict.fromkeys(
        ["w", "w_main", "w_corr", "chi", "chi_main", "chi_corr",
         "delta_R", "delta_f", "cancel_r1", "cancel_r2"], 0.0)
    parts_R = dict.fromkeys(SubstepAssembler._R_ZERO_KEYS, 0.0)
    parts_f = dict.fromkeys(SubstepAssembler._R_ZERO_KEYS, 0.0)
    probe_js = sorted({nt // 4, nt // 2, (3 * nt) // 4})
    wave_mean_max = 0.0
    wave_div_rel = 0.0

    for j in range(nt):
        r1, r2 = engine.cancellation_residual(j)
        sup["cancel_r1"] = max(sup["cancel_r1"], r1)
        sup["cancel_r2"] = max(sup["cancel_r2"], r2)

        d6, dv3, pR = asm.delta_R_slice(j, corrupt_transport=corrupt_transport)
        state.delta_R[j] += d6
        state.div_R_store[j] += dv3
        sup["delta_R"] = max(sup["delta_R"], tf.sup_norm(d6))
        for key, field in pR.items():
            parts_R[key] = max(parts_R[key], tf.sup_norm(field))

        f3, df1, pf = asm.delta_f_slice(j)
        state.delta_f[j] += f3
        state.div_f_store[j] += df1
        sup["delta_f"] = max(sup["delta_f"], tf.sup_norm(f3))
        for key, field in pf.items():
            parts_f[key] = max(parts_f[key], tf.sup_norm(field))

        if j in probe_js:
            wave_mean_max = max(wave_mean_max, float(np.max(np.abs(engine.wave_mean(j)))))
            if n <= 3:
                wave_mean_max = max(wave_mean_max, abs(float(engine.wave_mean(j, kind="chi"))))
            go, gc = asm._grad_w_parts(j)
            gw = tf.sup_norm(go + gc)
            if gw > 0:
                wave_div_rel = max(
                    wave_div_rel, tf.sup_norm(engine.wave_divergence(j)) / gw)

        # wave accumulation (after all reads of the pre-substep fields at j)
        w_o, w_c = asm.w_parts(j)
        sup["w_main"] = max(sup["w_main"], tf.sup_norm(w_o))
        sup["w_corr"] = max(sup["w_corr"], tf.sup_norm(w_c))
        sup["w"] = max(sup["w"], tf.sup_norm(w_o + w_c))
        state.v[j] += w_o + w_c
        go, gc = asm._grad_w_parts(j)
        state.grad_v[j] += go + gc
        state.dzz_v[j] += engine.dzz_velocity(j)
        state.dt_v[j] += engine.assemble(engine.dt_velocity_class_amps(j))
        if n <= 3:
            chi_o, chi_c = asm.chi_parts(j)
            sup["chi_main"] = max(sup["chi_main"], tf.sup_norm(chi_o))
            sup["chi_corr"] = max(sup["chi_corr"], tf.sup_norm(chi_c))
            sup["chi"] = max(sup["chi"], tf.sup_norm(chi_o + chi_c))
            state.theta[j] += chi_o + chi_c
            gco, gcc = asm._grad_chi_parts(j)
            state.grad_theta[j] += gco + gcc
            state.dzz_theta[j] += engine.dzz_temperature(j)
            amps = engine.dt_temperature_class_amps(j)
            if amps is not None:
                state.dt_theta[j] += engine.assemble(amps)

    if state.dt_v_coarse is not None and (nt - 1) % 2 == 0 and (nt - 1) // 2 + 1 >= 5:
        for j in range(0, nt, 2):
            state.dt_v_coarse[j // 2] += engine.assemble(
                engine.dt_velocity_class_amps(j, stride=2))
            if n <= 3 and state.dt_theta_coarse is not None:
                amps = engine.dt_temperature_class_amps(j, stride=2)
                if amps is not None:
                    state.dt_theta_coarse[j // 2] += engine.assemble(amps)

    state.completed = n
    report = {
        "n": n,
        "lam": lam,
        "ell": ell,
        "ell_z": ell_z,
        "wall_time": time.perf_counter() - t_start,
        "sup_b": engine.sup_b(),
        "wave_mean_max": wave_mean_max,
        "wave_div_rel": wave_div_rel,
        "parts_R": parts_R,
        "parts_f": parts_f,
        "cancel_r1": sup.pop("cancel_r1"),
        "cancel_r2": sup.pop("cancel_r2"),
        **{f"{k}_sup": val for k, val in sup.items()},
    }
    state.reports.append(report)
    return report
