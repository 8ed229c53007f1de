"""Continuous transformation operators stored in their eigen-basis.

A generator matrix A acts on a vectorized patch x through the matrix
exponential: y(s) = e^{As} x. Keeping A factored as U diag(lam) U^{-1}
turns every application into two dense matvecs plus an elementwise
exponential of the eigenvalues, and makes the coefficient-smoothed
transform (a Gaussian average over the coefficient) a pure change of
the diagonal kernel:

    exact:    y = U e^{s lam}                 U^{-1} x
    smoothed: y = U e^{mu lam + lam^2 s2/2}   U^{-1} x,  s2 = sigma^2

Operators and chains are immutable; all apply_* functions are pure and
safe to call from multiple workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LieOperator",
    "TransformChain",
    "Coefficients",
    "NonDiagonalizableError",
    "OverflowGuardError",
    "make_operator",
    "apply_exact",
    "apply_exact_complex",
    "apply_smoothed",
    "apply_smoothed_complex",
    "apply_chain",
    "apply_chain_complex",
    "reconstruct_a",
    "reconstruct_complex",
    "reconstruct_imag_norm",
    "smoothing_generator",
    "save_chain",
    "load_chain",
]

# e^x overflows float64 just above 709; reject before producing inf.
EXP_LIMIT = 700.0
# Reciprocal condition below this means the eigenvector matrix is numerically singular.
RCOND_MIN = 1e-12
# Frobenius tolerance for u_inv @ u == I cache coherence.
INV_COHERENCE = 1e-8


class NonDiagonalizableError(ValueError):
    """Eigenvector matrix is numerically singular; perturb or reject the generator."""


class OverflowGuardError(FloatingPointError):
    """A kernel exponent exceeded the float64 range; the coefficient must be rejected."""

    def __init__(self, message, op_index=None):
        super().__init__(message)
        self.op_index = op_index


def _frozen(a):
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LieOperator:
    """One transformation generator, factored as u @ diag(lam) @ u_inv.

    Attributes
    ----------
    n : int
        Patch dimension in pixels.
    u : (n, n) complex ndarray
        Eigenvector matrix. Need not be unitary.
    lam : (n,) complex ndarray
        Eigenvalues (the diagonal of the factored generator).
    u_inv : (n, n) complex ndarray
        Cached inverse of ``u``, recomputed from scratch whenever ``u``
        changes (never updated incrementally).
    real_valued : bool
        True when built from a real generator matrix, in which case the
        eigen-structure comes in conjugate pairs and applications are
        real up to rounding noise.
    """

    n: int
    u: np.ndarray
    lam: np.ndarray
    u_inv: np.ndarray
    real_valued: bool = False

    @classmethod
    def from_matrices(cls, u, lam, real_valued=False):
        """Build an operator from explicit eigenvectors and eigenvalues.

        The inverse is computed here via LU with partial pivoting.
        Raises NonDiagonalizableError when ``u`` has reciprocal condition
        below RCOND_MIN or when the computed inverse fails the cache
        coherence check.
        """
        u = np.array(u, dtype=np.complex128, order="C")
        lam = np.array(lam, dtype=np.complex128).ravel()
        if u.ndim != 2 or u.shape[0] != u.shape[1]:
            raise ValueError(f"eigenvector matrix must be square, got {u.shape}")
        n = u.shape[0]
        if lam.shape[0] != n:
            raise ValueError(f"expected {n} eigenvalues, got {lam.shape[0]}")
        if n < 1:
            raise ValueError("operator dimension must be >= 1")
        if not (np.all(np.isfinite(u.view(np.float64))) and np.all(np.isfinite(lam.view(np.float64)))):
            raise ValueError("non-finite entries in operator matrices")

        sv = np.linalg.svd(u, compute_uv=False)
        if sv[0] == 0.0 or not np.isfinite(sv[0]):
            raise NonDiagonalizableError("eigenvector matrix has no finite scale")
        rcond = sv[-1] / sv[0]
        if not np.isfinite(rcond) or rcond < RCOND_MIN:
            raise NonDiagonalizableError(
                f"eigenvector matrix numerically singular (rcond={rcond:.3e})"
            )
        try:
            u_inv = np.linalg.inv(u)
        except np.linalg.LinAlgError as exc:
            raise NonDiagonalizableError("eigenvector matrix not invertible") from exc
        coherence = np.linalg.norm(u_inv @ u - np.eye(n), "fro")
        if coherence >= INV_COHERENCE:
            raise NonDiagonalizableError(
                f"inverse cache incoherent (||u_inv u - I||_F = {coherence:.3e})"
            )
        return cls(n, _frozen(u), _frozen(lam), _frozen(u_inv), real_valued)

    def with_u(self, u_new):
        """New operator with replaced eigenvectors (inverse refreshed)."""
        return LieOperator.from_matrices(u_new, self.lam, self.real_valued)


def make_operator(a_matrix):
    """Eigendecompose a real generator matrix into a LieOperator.

    The generator must be diagonalizable; a numerically defective
    eigenvector matrix raises NonDiagonalizableError so the caller can
    perturb or reject it.
    """
    a = np.asarray(a_matrix, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"generator must be square, got {a.shape}")
    lam, u = np.linalg.eig(a)
    op = LieOperator.from_matrices(u, lam, real_valued=True)
    scale = max(np.linalg.norm(a, "fro"), 1.0)
    err = np.linalg.norm(reconstruct_a(op) - a, "fro")
    if err > 1e-8 * scale:
        raise NonDiagonalizableError(
            f"eigendecomposition does not reconstruct the generator (err={err:.3e})"
        )
    return op


@dataclass(frozen=True)
class TransformChain:
    """Ordered sequence of operators; order is semantically meaningful.

    Applying the chain means the right-to-left matrix action
    ops[0] @ ops[1] @ ... @ ops[K-1] @ x, so the LAST operator in the
    list acts on the input first. Coefficients for the same image
    motion therefore depend on the chain order whenever operators do
    not commute.
    """

    ops: tuple

    def __post_init__(self):
        ops = tuple(self.ops)
        object.__setattr__(self, "ops", ops)
        if len(ops) == 0:
            raise ValueError("chain needs at least one operator")
        n = ops[0].n
        for k, op in enumerate(ops):
            if op.n != n:
                raise ValueError(f"operator {k} has dimension {op.n}, expected {n}")

    @property
    def n(self):
        return self.ops[0].n

    def __len__(self):
        return len(self.ops)


@dataclass(frozen=True)
class Coefficients:
    """Per-operator coefficients: mu (amount) and sigma (smoothing width >= 0)."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=np.float64))
        if mu.shape != sigma.shape or mu.ndim != 1:
            raise ValueError(f"mu/sigma shapes differ: {mu.shape} vs {sigma.shape}")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise ValueError("non-finite coefficients")
        if np.any(sigma < 0):
            raise ValueError("sigma must be non-negative")
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "sigma", _frozen(sigma))

    @classmethod
    def zeros(cls, k):
        return cls(np.zeros(k), np.zeros(k))

    def __len__(self):
        return self.mu.shape[0]


def _exp_kernel(z, op_index=None):
    """Elementwise exp with a loud failure instead of inf."""
    worst = float(np.max(z.real))
    if worst > EXP_LIMIT:
        raise OverflowGuardError(
            f"kernel exponent real part {worst:.3g} exceeds {EXP_LIMIT:g}", op_index
        )
    return np.exp(z)


def apply_exact_complex(op, s, x, op_index=None):
    """U e^{s lam} U^{-1} x without the real projection."""
    if not np.isfinite(s):
        raise ValueError("coefficient must be finite")
    k = _exp_kernel(op.lam * s, op_index)
    return op.u @ (k * (op.u_inv @ np.asarray(x, dtype=np.complex128)))


def apply_exact(op, s, x):
    """Apply e^{As} to x; returns the real projection.

    Cost is O(n^2) per call (two matvecs). Raises OverflowGuardError
    when any Re(s * lam_i) exceeds the float64 exponent range.
    """
    return np.ascontiguousarray(apply_exact_complex(op, s, x).real)


def smoothed_exponent(op, mu, sigma):
    """Diagonal kernel exponent mu*lam + lam^2 sigma^2 / 2."""
    return mu * op.lam + 0.5 * (op.lam ** 2) * (sigma ** 2)


def apply_smoothed_complex(op, mu, sigma, x, op_index=None):
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    k = _exp_kernel(smoothed_exponent(op, mu, sigma), op_index)
    return op.u @ (k * (op.u_inv @ np.asarray(x, dtype=np.complex128)))


def apply_smoothed(op, mu, sigma, x):
    """Apply the Gaussian-averaged transform T(mu, sigma) to x.

    Averaging e^{As} over s ~ N(mu, sigma^2) has the closed form
    U e^{mu lam} e^{lam^2 sigma^2 / 2} U^{-1}; sigma = 0 reduces exactly
    to apply_exact. Returns the real projection.
    """
    return np.ascontiguousarray(apply_smoothed_complex(op, mu, sigma, x).real)


def apply_chain_complex(chain, coeffs, x, y0_convention="eval"):
    """Right-to-left product of smoothed operators, kept complex throughout.

    Returns (v, intermediates) where v is the final complex vector and
    intermediates[k] is the patch seen by operator k before it acts.

    y0_convention selects which neighbors count as "already applied"
    in intermediates[k]:
      * "eval" (default): operators with larger index, which act earlier
        in the right-to-left evaluation; these are the actual running
        values of the product.
      * "index": operators with smaller index, i.e. intermediates[k] is
        the prefix product ops[0] ... ops[k-1] applied to x. This does
        not lie on the evaluation path and costs O(K^2) applications.
    """
    ops = chain.ops
    k_total = len(ops)
    if len(coeffs) != k_total:
        raise ValueError(f"got {len(coeffs)} coefficient pairs for {k_total} operators")
    q = np.asarray(x, dtype=np.complex128)
    if q.shape != (chain.n,):
        raise ValueError(f"input must have shape ({chain.n},), got {q.shape}")
    inter = [None] * k_total
    for k in range(k_total - 1, -1, -1):
        inter[k] = q
        q = apply_smoothed_complex(ops[k], coeffs.mu[k], coeffs.sigma[k], q, op_index=k)
    if y0_convention == "index":
        alt = [np.asarray(x, dtype=np.complex128)]
        for k in range(1, k_total):
            v = np.asarray(x, dtype=np.complex128)
            for m in range(k - 1, -1, -1):
                v = apply_smoothed_complex(ops[m], coeffs.mu[m], coeffs.sigma[m], v, op_index=m)
            alt.append(v)
        inter = alt
    elif y0_convention != "eval":
        raise ValueError(f"unknown y0_convention {y0_convention!r}")
    return q, inter


def apply_chain(chain, coeffs, x, y0_convention="eval"):
    """Apply the full chain; returns (real output, intermediates).

    Intermediates are complex (no projection between factors; the
    product is a single complex matrix action with one real projection
    at the output). OverflowGuardError carries the failing operator
    index.
    """
    v, inter = apply_chain_complex(chain, coeffs, x, y0_convention)
    return np.ascontiguousarray(v.real), inter


def reconstruct_complex(op):
    """U diag(lam) U^{-1} without projection."""
    return (op.u * op.lam) @ op.u_inv


def reconstruct_a(op):
    """Real part of the reconstructed generator matrix."""
    return np.ascontiguousarray(reconstruct_complex(op).real)


def reconstruct_imag_norm(op):
    """Max-abs imaginary residual of the reconstructed generator."""
    return float(np.max(np.abs(reconstruct_complex(op).imag)))


def smoothing_generator(op):
    """The generator that blurs along op's transformation direction.

    Applying it exactly with coefficient sigma^2 reproduces the smoothing
    factor of apply_smoothed: it is (1/2) U lam^2 U^{-1}.
    """
    return LieOperator.from_matrices(op.u, 0.5 * op.lam ** 2, real_valued=op.real_valued)


# --- operator file format -------------------------------------------------
#
# "LGT1", little-endian: magic, u32 version=1, u32 K, u32 n, then per
# operator n*n complex128 (re, im) pairs for U row-major followed by n
# complex128 eigenvalues.

LGT1_MAGIC = b"LGT1"


def save_chain(path, chain):
    """Write a chain to an LGT1 operator file."""
    n = chain.n
    with open(path, "wb") as fh:
        fh.write(LGT1_MAGIC)
        fh.write(struct.pack("<III", 1, len(chain), n))
        for op in chain.ops:
            fh.write(np.ascontiguousarray(op.u, dtype="<c16").tobytes())
            fh.write(np.ascontiguousarray(op.lam, dtype="<c16").tobytes())


def load_chain(path, expect_n=None):
    """Read an LGT1 operator file back into a TransformChain.

    Verifies the magic and, when expect_n is given, rejects files whose
    patch dimension does not match. Inverses are recomputed on load.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LGT1_MAGIC:
        raise ValueError(f"{path}: not an LGT1 operator file")
    version, k_total, n = struct.unpack_from("<III", blob, 4)
    if version != 1:
        raise ValueError(f"{path}: unsupported LGT1 version {version}")
    if expect_n is not None and n != expect_n:
        raise ValueError(f"{path}: operator dimension {n} does not match expected {expect_n}")
    per_op = (n * n + n) * 16
    expected = 16 + k_total * per_op
    if len(blob) != expected:
        raise ValueError(f"{path}: truncated or oversized payload ({len(blob)} vs {expected})")
    ops = []
    off = 16
    for _ in range(k_total):
        u = np.frombuffer(blob, dtype="<c16", count=n * n, offset=off).reshape(n, n)
        off += n * n * 16
        lam = np.frombuffer(blob, dtype="<c16", count=n, offset=off)
        off += n * 16
        ops.append(LieOperator.from_matrices(u, lam))
    return TransformChain(tuple(ops))
