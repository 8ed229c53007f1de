"""Objective function for fitting transformations, with analytic gradients.

The energy for one patch pair under a chain of smoothed operators is

    E = eta_n ||mask . (x_tgt - Re(T_0 T_1 ... T_{K-1} x_src))||^2
      + eta_d sum_k |mu_k| ||A_k e^{A_k mu_k / 2} y_k||
      + eta_sigma sum_k sigma_k^2

where y_k is the (complex) intermediate patch entering operator k and
A_k e^{A_k mu_k/2} is evaluated in the eigen-basis, so every term costs
O(n^2). The traversed-distance term is the midpoint linearization of the
path length swept by the patch; it acts like an L1 pressure across
operators. The sigma regularizer speeds convergence during learning.

Gradients are exact for this energy, including the flow of the distance
term through the chain intermediates, and are validated against central
finite differences (see fd_coeff_grads / fd_operator_grads / gradcheck).
Complex gradients use the convention

    g = dE/d(Re w) + i * dE/d(Im w)

so that viewing a complex parameter vector as interleaved (real, imag)
float64 pairs makes g the ordinary real gradient.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .operator import (
    Coefficients,
    LieOperator,
    OverflowGuardError,
    TransformChain,
    _exp_kernel,
)

__all__ = [
    "PatchPair",
    "EnergyConfig",
    "EnergyReport",
    "reconstruction_error",
    "manifold_distance",
    "energy_total",
    "pair_energy",
    "grad_mu_sigma",
    "grad_U_lambda",
    "fd_coeff_grads",
    "fd_operator_grads",
    "gradcheck",
    "GradcheckReport",
]

_NORM_FLOOR = 1e-150  # below this the distance term and its gradient are identically zero


@dataclass(frozen=True)
class PatchPair:
    """Source/target patch vectors for one frame-to-frame sample."""

    x_src: np.ndarray
    x_tgt: np.ndarray
    id: int = 0

    def __post_init__(self):
        src = np.ascontiguousarray(self.x_src, dtype=np.float64)
        tgt = np.ascontiguousarray(self.x_tgt, dtype=np.float64)
        if src.ndim != 1 or src.shape != tgt.shape:
            raise ValueError(f"patch shapes differ: {src.shape} vs {tgt.shape}")
        if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
            raise ValueError("non-finite patch entries")
        object.__setattr__(self, "x_src", src)
        object.__setattr__(self, "x_tgt", tgt)

    @property
    def n(self):
        return self.x_src.shape[0]


@dataclass(frozen=True)
class EnergyConfig:
    """Term weights plus the pixel mask entering the reconstruction error.

    Defaults follow the reference settings eta_n = 1, eta_d = 0.005,
    eta_sigma = 0.01. mask = None means all pixels count.
    """

    eta_n: float = 1.0
    eta_d: float = 0.005
    eta_sigma: float = 0.01
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.eta_n < 0 or self.eta_d < 0 or self.eta_sigma < 0:
            raise ValueError("term weights must be non-negative")
        if self.mask is not None:
            m = np.ascontiguousarray(self.mask, dtype=bool)
            if m.ndim != 1 or not m.any():
                raise ValueError("mask must be a 1-d boolean vector with >= 1 true entry")
            m.setflags(write=False)
            object.__setattr__(self, "mask", m)

    def mask_vector(self, n):
        if self.mask is None:
            return np.ones(n, dtype=bool)
        if self.mask.shape[0] != n:
            raise ValueError(f"mask length {self.mask.shape[0]} does not match patch size {n}")
        return self.mask


@dataclass
class EnergyReport:
    """Scalar energy with per-term breakdown and gradients.

    g_mu / g_sigma are (T, K) arrays (one row per sample); g_u / g_lambda
    are per-operator complex gradients summed over the batch.
    """

    total: float
    recon_term: float
    manifold_term: float
    sigma_term: float
    g_mu: np.ndarray
    g_sigma: np.ndarray
    g_u: list = field(default_factory=list)
    g_lambda: list = field(default_factory=list)

    def csv_line(self):
        def norm(x):
            if isinstance(x, list):
                return max((float(np.max(np.abs(v))) for v in x if v.size), default=0.0)
            return float(np.max(np.abs(x))) if x.size else 0.0

        return (
            f"{self.total:.17g},{self.recon_term:.17g},{self.manifold_term:.17g},"
            f"{self.sigma_term:.17g},{norm(self.g_mu):.17g},{norm(self.g_sigma):.17g},"
            f"{norm(self.g_u):.17g},{norm(self.g_lambda):.17g}"
        )

    @staticmethod
    def csv_header():
        return "total,recon,manifold,sigma,gmu_norm,gsigma_norm,gu_norm,glambda_norm"


def reconstruction_error(chain, coeffs, pair, mask=None):
    """Masked residual of the chain's prediction and its squared norm."""
    from .operator import apply_chain

    y, _ = apply_chain(chain, coeffs, pair.x_src)
    if mask is None:
        mask = np.ones(chain.n, dtype=bool)
    residual = np.where(mask, pair.x_tgt - y, 0.0)
    return residual, float(residual @ residual)


def manifold_distance(chain, coeffs, intermediates):
    """Midpoint approximation of the path length swept by the patch.

    Sum over operators of |mu_k| * ||A_k e^{A_k mu_k/2} y_k|| with y_k
    the supplied intermediate entering operator k; each term is
    evaluated in the eigen-basis. The norm is the complex modulus
    2-norm. Path lengths are even in the coefficient sign (running a
    flow backwards sweeps the same distance), which is what gives the
    term its L1-like pressure across operators.
    """
    total = 0.0
    for k, op in enumerate(chain.ops):
        mu = coeffs.mu[k]
        c = op.u_inv @ np.asarray(intermediates[k], dtype=np.complex128)
        eh = _exp_kernel(0.5 * mu * op.lam, k)
        z = op.u @ (op.lam * eh * c)
        total += abs(mu) * float(np.linalg.norm(z))
    return total


def _pair_forward_backward(chain, coeffs, pair, config, op_grads):
    """One sample's energy terms and exact gradients.

    Reverse-mode pass over the ordered product: the reconstruction
    cotangent and every distance term's cotangent flow back through all
    operators that acted before them in the evaluation order.
    """
    ops = chain.ops
    k_total = len(ops)
    mask = config.mask_vector(chain.n)
    mu, sigma = coeffs.mu, coeffs.sigma

    # Forward: keep per-factor inputs and diagonal kernels.
    q_list = [None] * k_total
    c_list = [None] * k_total
    d_list = [None] * k_total
    ker_list = [None] * k_total
    q = pair.x_src.astype(np.complex128)
    for k in range(k_total - 1, -1, -1):
        op = ops[k]
        q_list[k] = q
        c = op.u_inv @ q
        ker = _exp_kernel(mu[k] * op.lam + 0.5 * (op.lam ** 2) * (sigma[k] ** 2), k)
        d = ker * c
        q = op.u @ d
        c_list[k], d_list[k], ker_list[k] = c, d, ker
    y = q.real
    r = np.where(mask, pair.x_tgt - y, 0.0)
    recon = float(r @ r)
    sigma_term = float(np.dot(sigma, sigma))

    g_mu = np.zeros(k_total)
    g_sigma = np.zeros(k_total)
    g_u = [np.zeros((chain.n, chain.n), dtype=np.complex128) for _ in range(k_total)] if op_grads else None
    g_lam = [np.zeros(chain.n, dtype=np.complex128) for _ in range(k_total)] if op_grads else None

    manifold = 0.0
    gamma = (-2.0 * config.eta_n) * r.astype(np.complex128)
    for k in range(k_total):
        op = ops[k]
        lam = op.lam
        c, d, ker = c_list[k], d_list[k], ker_list[k]
        t1 = op.u.conj().T @ gamma
        t1c = np.conj(t1)
        g_mu[k] += float(np.sum(t1c * (lam * ker) * c).real)
        g_sigma[k] += sigma[k] * float(np.sum(t1c * (lam ** 2 * ker) * c).real)
        rho = op.u_inv.conj().T @ (np.conj(ker) * t1)
        if op_grads:
            g_lam[k] += t1 * np.conj((mu[k] + sigma[k] ** 2 * lam) * ker * c)
            g_u[k] += np.outer(gamma, np.conj(d)) - np.outer(rho, np.conj(c))

        # Traversed-distance term for this operator:
        # |mu| * ||z||, z = U lam e^{mu lam/2} U^{-1} q. sign(0) = 0 picks
        # the stationary subgradient at the kink, so inert operators stay
        # exactly at zero.
        eh = _exp_kernel(0.5 * mu[k] * lam, k)
        b = lam * eh * c
        z = op.u @ b
        nz = float(np.linalg.norm(z))
        manifold += abs(mu[k]) * nz
        g_mu[k] += config.eta_d * np.sign(mu[k]) * nz
        gamma_next = rho
        if nz > _NORM_FLOOR and config.eta_d > 0.0 and mu[k] != 0.0:
            gz = (config.eta_d * abs(mu[k]) / nz) * z
            t1z = op.u.conj().T @ gz
            g_mu[k] += float(np.sum(np.conj(t1z) * (0.5 * lam ** 2 * eh) * c).real)
            rho_z = op.u_inv.conj().T @ (np.conj(lam * eh) * t1z)
            if op_grads:
                g_lam[k] += t1z * np.conj((1.0 + 0.5 * mu[k] * lam) * eh * c)
                g_u[k] += np.outer(gz, np.conj(b)) - np.outer(rho_z, np.conj(c))
            gamma_next = rho + rho_z
        gamma = gamma_next

    g_sigma += 2.0 * config.eta_sigma * sigma
    return recon, manifold, sigma_term, g_mu, g_sigma, g_u, g_lam


def pair_energy(chain, coeffs, pair, config):
    """Total energy and coefficient gradients for a single pair.

    Skips the operator gradients; this is the inner loop of inference.
    Coefficients whose kernels stay in range but whose products overflow
    float64 downstream still raise OverflowGuardError.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        recon, manifold, sig, g_mu, g_sigma, _, _ = _pair_forward_backward(
            chain, coeffs, pair, config, op_grads=False
        )
        total = config.eta_n * recon + config.eta_d * manifold + config.eta_sigma * sig
    if not np.isfinite(total):
        raise OverflowGuardError("energy overflowed float64")
    return total, g_mu, g_sigma


def energy_total(chain, coeffs_batch, pairs, config, op_grads=True):
    """Full objective over a batch, with all gradient fields filled.

    Per-sample terms are summed deterministically in sample order.
    """
    if len(coeffs_batch) != len(pairs):
        raise ValueError("need one Coefficients per pair")
    k_total = len(chain)
    n = chain.n
    recon = manifold = sig = 0.0
    g_mu = np.zeros((len(pairs), k_total))
    g_sigma = np.zeros((len(pairs), k_total))
    g_u = [np.zeros((n, n), dtype=np.complex128) for _ in range(k_total)]
    g_lam = [np.zeros(n, dtype=np.complex128) for _ in range(k_total)]
    for t, (coeffs, pair) in enumerate(zip(coeffs_batch, pairs)):
        rec, man, sg, gm, gs, gu, gl = _pair_forward_backward(
            chain, coeffs, pair, config, op_grads=op_grads
        )
        recon += rec
        manifold += man
        sig += sg
        g_mu[t] = gm
        g_sigma[t] = gs
        if op_grads:
            for k in range(k_total):
                g_u[k] += gu[k]
                g_lam[k] += gl[k]
    total = config.eta_n * recon + config.eta_d * manifold + config.eta_sigma * sig
    return EnergyReport(
        total=total,
        recon_term=recon,
        manifold_term=manifold,
        sigma_term=sig,
        g_mu=g_mu,
        g_sigma=g_sigma,
        g_u=g_u,
        g_lambda=g_lam,
    )


def grad_mu_sigma(chain, coeffs, pair, config):
    """Analytic gradient of the full energy for one pair w.r.t. (mu, sigma)."""
    _, g_mu, g_sigma = pair_energy(chain, coeffs, pair, config)
    return g_mu, g_sigma


def grad_U_lambda(chain, coeffs_batch, pairs, config):
    """Analytic per-operator gradients of the full batch energy.

    Returns (g_u, g_lambda) lists; real and imaginary parts follow the
    module's complex gradient convention.
    """
    report = energy_total(chain, coeffs_batch, pairs, config, op_grads=True)
    return report.g_u, report.g_lambda


# --- finite-difference validation ----------------------------------------
#
# Gradient correctness is what the whole fitting procedure rests on, so
# the numeric check is a public operation rather than test-only code.
# Probe energies are evaluated in extended precision (80-bit on x86) at
# exactly representable float64 probe points: central differences in
# plain float64 carry a roundoff floor of about eps*|E|/h, which would
# drown small gradient components in noise and make the comparison
# meaningless for them.

_LD = np.clongdouble
_EXP_LIMIT_LD = 700.0


def _inv_extended(u):
    """Inverse of a complex128 matrix, Newton-refined in extended precision."""
    u_ld = u.astype(_LD)
    v = np.linalg.inv(u).astype(_LD)
    eye = np.eye(u.shape[0], dtype=_LD)
    for _ in range(2):
        v = v + v @ (eye - u_ld @ v)
    return v


def _energy_extended(raw_ops, mu, sigma, pairs, config):
    """The same energy, evaluated in extended precision.

    raw_ops is a list of (u, lam) complex128 pairs; mu and sigma are
    (K,) float arrays. Used only as the finite-difference oracle.
    """
    k_total = len(raw_ops)
    mats = []
    for u, lam in raw_ops:
        mats.append((u.astype(_LD), _inv_extended(u), lam.astype(_LD)))
    total = np.longdouble(0.0)
    for pair in pairs:
        mask = config.mask_vector(pair.n)
        q = pair.x_src.astype(_LD)
        inter = [None] * k_total
        for k in range(k_total - 1, -1, -1):
            u_ld, v_ld, lam_ld = mats[k]
            inter[k] = q
            z = mu[k] * lam_ld + 0.5 * (lam_ld ** 2) * (sigma[k] ** 2)
            if float(np.max(z.real)) > _EXP_LIMIT_LD:
                raise OverflowGuardError("kernel exponent out of range", k)
            q = u_ld @ (np.exp(z) * (v_ld @ q))
        r = np.where(mask, pair.x_tgt.astype(np.longdouble) - q.real, np.longdouble(0.0))
        total += config.eta_n * np.sum(r * r)
        for k in range(k_total):
            u_ld, v_ld, lam_ld = mats[k]
            eh = np.exp(0.5 * mu[k] * lam_ld)
            z = u_ld @ (lam_ld * eh * (v_ld @ inter[k]))
            total += config.eta_d * abs(mu[k]) * np.sqrt(np.sum(np.abs(z) ** 2))
        total += config.eta_sigma * np.longdouble(np.dot(sigma, sigma))
    return total


def fd_coeff_grads(chain, coeffs, pair, config, h=1e-5):
    """Central finite differences of the energy w.r.t. mu and sigma."""
    k_total = len(chain)
    raw_ops = [(np.array(op.u), np.array(op.lam)) for op in chain.ops]
    g_mu = np.zeros(k_total)
    g_sigma = np.zeros(k_total)
    for k in range(k_total):
        for arr, out in ((coeffs.mu, g_mu), (coeffs.sigma, g_sigma)):
            hi = np.array(arr)
            lo = np.array(arr)
            hi[k] = np.float64(arr[k] + h)
            lo[k] = np.float64(arr[k] - h)
            step = np.longdouble(hi[k]) - np.longdouble(lo[k])
            if arr is coeffs.mu:
                e_hi = _energy_extended(raw_ops, hi, coeffs.sigma, [pair], config)
                e_lo = _energy_extended(raw_ops, lo, coeffs.sigma, [pair], config)
            else:
                e_hi = _energy_extended(raw_ops, coeffs.mu, hi, [pair], config)
                e_lo = _energy_extended(raw_ops, coeffs.mu, lo, [pair], config)
            out[k] = float((e_hi - e_lo) / step)
    return g_mu, g_sigma


def fd_operator_grads(chain, coeffs_batch, pairs, config, h=1e-5, ops_subset=None):
    """Central finite differences w.r.t. every Re/Im entry of U and lam.

    The inverse of each probe's eigenvector matrix is recomputed, so the
    numeric derivative sees exactly what the analytic one models. Returns
    complex arrays in the module's gradient convention.
    """
    mu = np.stack([c.mu for c in coeffs_batch])
    sigma = np.stack([c.sigma for c in coeffs_batch])

    def batch(raw_ops):
        total = np.longdouble(0.0)
        for t, pair in enumerate(pairs):
            total += _energy_extended(raw_ops, mu[t], sigma[t], [pair], config)
        return total

    raw_ops = [(np.array(op.u), np.array(op.lam)) for op in chain.ops]
    which = range(len(chain)) if ops_subset is None else ops_subset
    g_u = {}
    g_lam = {}
    for k in which:
        u0, lam0 = raw_ops[k]
        n = u0.shape[0]
        gu = np.zeros((n, n), dtype=np.complex128)
        for i in range(n):
            for j in range(n):
                for part in (1.0, 1j):
                    u_hi = np.array(u0)
                    u_lo = np.array(u0)
                    u_hi[i, j] = u0[i, j] + h * part
                    u_lo[i, j] = u0[i, j] - h * part
                    if part == 1.0:
                        step = np.longdouble(u_hi[i, j].real) - np.longdouble(u_lo[i, j].real)
                    else:
                        step = np.longdouble(u_hi[i, j].imag) - np.longdouble(u_lo[i, j].imag)
                    probe = list(raw_ops)
                    probe[k] = (u_hi, lam0)
                    e_hi = batch(probe)
                    probe[k] = (u_lo, lam0)
                    e_lo = batch(probe)
                    gu[i, j] += part * float((e_hi - e_lo) / step)
        gl = np.zeros(n, dtype=np.complex128)
        for j in range(n):
            for part in (1.0, 1j):
                l_hi = np.array(lam0)
                l_lo = np.array(lam0)
                l_hi[j] = lam0[j] + h * part
                l_lo[j] = lam0[j] - h * part
                if part == 1.0:
                    step = np.longdouble(l_hi[j].real) - np.longdouble(l_lo[j].real)
                else:
                    step = np.longdouble(l_hi[j].imag) - np.longdouble(l_lo[j].imag)
                probe = list(raw_ops)
                probe[k] = (u0, l_hi)
                e_hi = batch(probe)
                probe[k] = (u0, l_lo)
                e_lo = batch(probe)
                gl[j] += part * float((e_hi - e_lo) / step)
        g_u[k] = gu
        g_lam[k] = gl
    return g_u, g_lam


def _rel_errors(analytic, numeric, floor):
    a = np.asarray(analytic, dtype=np.complex128).ravel().view(np.float64)
    f = np.asarray(numeric, dtype=np.complex128).ravel().view(np.float64)
    scale = np.maximum(np.abs(a), np.abs(f))
    keep = scale > floor
    out = np.zeros(a.shape)
    out[keep] = np.abs(a - f)[keep] / scale[keep]
    return out


@dataclass
class GradcheckReport:
    max_rel_err: float
    n_instances: int
    n_components: int
    worst_instance: int

    @property
    def passed(self):
        return self.max_rel_err < 1e-5


def random_instance(rng, n, k_total):
    """A well-conditioned random chain, coefficients, and patch pair."""
    ops = []
    for _ in range(k_total):
        u = np.eye(n) + 0.35 * (
            rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
        ) / np.sqrt(n)
        lam = 0.4 * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        ops.append(LieOperator.from_matrices(u, lam))
    chain = TransformChain(tuple(ops))
    coeffs = Coefficients(rng.uniform(-1.0, 1.0, k_total), rng.uniform(0.1, 0.9, k_total))
    pair = PatchPair(rng.standard_normal(n), rng.standard_normal(n))
    return chain, coeffs, pair


def gradcheck(n_instances=50, seed=0, h=1e-5, floor=1e-10, log=None):
    """Compare analytic and central finite-difference gradients.

    Random instances over n in {4, 6, 8} and chain lengths {1, 2, 3},
    full default term weights, mixed full/partial masks. Components whose
    magnitude does not exceed ``floor`` are skipped (they sit below the
    finite-difference noise floor). Returns a GradcheckReport.
    """
    rng = np.random.default_rng(seed)
    sizes = (4, 6, 8)
    depths = (1, 2, 3)
    worst = 0.0
    worst_instance = -1
    n_components = 0
    for i in range(n_instances):
        n = sizes[int(rng.integers(len(sizes)))]
        k_total = depths[int(rng.integers(len(depths)))]
        chain, coeffs, pair = random_instance(rng, n, k_total)
        if i % 2 == 0:
            mask = None
        else:
            mask = rng.random(n) < 0.8
            if not mask.any():
                mask[0] = True
        config = EnergyConfig(mask=mask)

        report = energy_total(chain, [coeffs], [pair], config, op_grads=True)
        fd_mu, fd_sigma = fd_coeff_grads(chain, coeffs, pair, config, h=h)
        fd_u, fd_lam = fd_operator_grads(chain, [coeffs], [pair], config, h=h)

        errs = [
            _rel_errors(report.g_mu[0], fd_mu, floor),
            _rel_errors(report.g_sigma[0], fd_sigma, floor),
        ]
        for k in range(k_total):
            errs.append(_rel_errors(report.g_u[k], fd_u[k], floor))
            errs.append(_rel_errors(report.g_lambda[k], fd_lam[k], floor))
        inst_max = max(float(e.max()) for e in errs)
        n_components += sum(e.size for e in errs)
        if inst_max > worst:
            worst = inst_max
            worst_instance = i
        if log is not None:
            log(f"instance {i:3d}  n={n} K={k_total}  max rel err {inst_max:.3e}")
    return GradcheckReport(
        max_rel_err=worst,
        n_instances=n_instances,
        n_components=n_components,
        worst_instance=worst_instance,
    )
