"""Operator learning by alternating coefficient inference and fitting.

Each epoch loads a fresh batch of pairs, infers per-pair coefficients
with the operators held fixed, then optimizes the operators' (U, lam)
with the coefficients held fixed. Energy never increases within an
epoch. After every fitting step the eigenvector scaling degeneracy is
removed: the columns of U can be rescaled arbitrarily (the inverse
scaling lands in the rows of U^{-1}) without changing the generator, and
left alone that freedom random-walks into ill conditioning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .energy import EnergyConfig, energy_total
from .inference import InferencePolicy, infer_batch
from .operator import (
    Coefficients,
    LieOperator,
    NonDiagonalizableError,
    OverflowGuardError,
    TransformChain,
    save_chain,
)
from .optimize import MinimizeSpec, NonFiniteObjective, minimize

__all__ = [
    "TrainSpec",
    "DegenerateColumnError",
    "init_chain",
    "m_step",
    "rescale_degeneracy",
    "train",
    "EpochStats",
    "TrainLog",
]

log = logging.getLogger(__name__)


class DegenerateColumnError(ValueError):
    """An eigenvector column (or inverse row) has no power to balance."""


@dataclass(frozen=True)
class TrainSpec:
    """Settings for the alternating training loop.

    fixed_ops lists chain positions whose operators stay pre-coded
    (e.g. whole-patch translations); they are never touched by the
    fitting step or the degeneracy rescale.
    """

    n_ops: int
    fixed_ops: tuple = ()
    batch_size: int = 200
    epochs: int = 10
    seed: int = 0
    init_scale: float = 0.01
    mstep_max_iters: int = 50

    def __post_init__(self):
        object.__setattr__(self, "fixed_ops", tuple(sorted(set(self.fixed_ops))))
        if self.n_ops < 1:
            raise ValueError("n_ops must be >= 1")
        if any(i < 0 or i >= self.n_ops for i in self.fixed_ops):
            raise ValueError("fixed_ops indices out of range")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


def init_chain(spec, n, preset_ops=None):
    """Random near-identity chain: U = I + eps*G, lam = eps*g.

    preset_ops maps chain positions to pre-coded operators (every index
    in spec.fixed_ops must be present). The random draw is seeded by
    spec.seed, so initialization is reproducible.
    """
    preset_ops = dict(preset_ops or {})
    missing = [i for i in spec.fixed_ops if i not in preset_ops]
    if missing:
        raise ValueError(f"fixed_ops {missing} have no preset operator")
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    ops = []
    for k in range(spec.n_ops):
        if k in preset_ops:
            op = preset_ops[k]
            if op.n != n:
                raise ValueError(f"preset operator {k} has dimension {op.n}, expected {n}")
            ops.append(op)
            continue
        eps = spec.init_scale
        u = np.eye(n) + eps * (rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n)))
        lam = eps * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
        ops.append(LieOperator.from_matrices(u, lam))
    return TransformChain(tuple(ops))


def _pack(ops):
    """Complex (U, lam) per operator as one interleaved (re, im) real vector."""
    parts = []
    for op in ops:
        parts.append(np.ascontiguousarray(op.u).ravel().view(np.float64))
        parts.append(np.ascontiguousarray(op.lam).view(np.float64))
    return np.concatenate(parts)


def _unpack(theta, n, count):
    per_op = 2 * (n * n + n)
    out = []
    for k in range(count):
        base = k * per_op
        u = theta[base : base + 2 * n * n].view(np.complex128).reshape(n, n)
        lam = theta[base + 2 * n * n : base + per_op].view(np.complex128)
        out.append((u, lam))
    return out


def m_step(chain, coeffs_batch, pairs, config, spec=None, minimize_spec=None):
    """Fit the learnable operators' (U, lam) with coefficients held fixed.

    Energy is non-increasing; fixed operators come back bit-for-bit
    untouched. An operator whose eigenvector matrix drifts into
    numerical singularity is reverted to its pre-step value.
    """
    spec = spec or TrainSpec(n_ops=len(chain))
    n = chain.n
    learnable = [k for k in range(len(chain)) if k not in spec.fixed_ops]
    if not learnable:
        return chain
    mspec = minimize_spec or MinimizeSpec(max_iters=spec.mstep_max_iters)

    def build_chain(theta):
        theta = np.ascontiguousarray(theta)
        ops = list(chain.ops)
        for (u, lam), k in zip(_unpack(theta, n, len(learnable)), learnable):
            ops[k] = LieOperator.from_matrices(u, lam)
        return TransformChain(tuple(ops))

    def objective(theta):
        try:
            trial = build_chain(theta)
        except NonDiagonalizableError:
            return np.inf, np.zeros_like(theta)
        with np.errstate(over="ignore", invalid="ignore"):
            try:
                report = energy_total(trial, coeffs_batch, pairs, config, op_grads=True)
            except OverflowGuardError:
                return np.inf, np.zeros_like(theta)
        if not np.isfinite(report.total):
            return np.inf, np.zeros_like(theta)
        grad = np.concatenate(
            [
                np.concatenate(
                    [report.g_u[k].ravel().view(np.float64), report.g_lambda[k].view(np.float64)]
                )
                for k in learnable
            ]
        )
        return report.total, grad

    theta0 = _pack([chain.ops[k] for k in learnable])
    result = minimize(objective, theta0, mspec)

    ops = list(chain.ops)
    for (u, lam), k in zip(_unpack(np.ascontiguousarray(result.x), n, len(learnable)), learnable):
        try:
            ops[k] = LieOperator.from_matrices(u, lam)
        except NonDiagonalizableError as exc:
            log.warning("operator %d reverted after fitting step: %s", k, exc)
    return TransformChain(tuple(ops))


def rescale_degeneracy(op):
    """Balance the power of U's columns against the rows of U^{-1}.

    Applies the diagonal rescale R_jj = (sum_i |U^-1_ji|^2 /
    sum_i |U_ij|^2)^{1/4} that minimizes the joint power
    sum |U_ij|^2 + sum |(U^-1)_ji|^2 while leaving the reconstructed
    generator unchanged. Squares are squared magnitudes, so R is real
    and positive.
    """
    col_power = np.sum(np.abs(op.u) ** 2, axis=0)
    row_power = np.sum(np.abs(op.u_inv) ** 2, axis=1)
    if np.any(col_power < 1e-300) or np.any(row_power < 1e-300):
        raise DegenerateColumnError("zero-power eigenvector column")
    r = (row_power / col_power) ** 0.25
    return LieOperator.from_matrices(op.u * r[None, :], op.lam, op.real_valued)


@dataclass
class EpochStats:
    epoch: int
    e_pre: float  # batch energy after the inference step
    e_post: float  # batch energy after the fitting step
    mean_psnr: float
    grad_norm: float
    skipped_pairs: int = 0


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)

    def csv(self):
        lines = ["epoch,e_pre,e_post,mean_psnr,grad_norm,skipped_pairs"]
        for s in self.epochs:
            lines.append(
                f"{s.epoch},{s.e_pre:.17g},{s.e_post:.17g},{s.mean_psnr:.6f},"
                f"{s.grad_norm:.17g},{s.skipped_pairs}"
            )
        return "\n".join(lines) + "\n"


def train(pairs_source, config, spec, preset_ops=None, policy=None,
          initial_chain=None, start_epoch=0, checkpoint_dir=None, threads=1,
          infer_spec=None, minimize_spec=None):
    """Alternating optimization of coefficients and operators.

    pairs_source(epoch) must yield the epoch's batch of PatchPair (fresh
    data each epoch). Returns (chain, TrainLog). With a checkpoint_dir,
    the chain is written after initialization and after every epoch, so
    a run can resume bit-for-bit from the latest checkpoint (pass it as
    initial_chain with the matching start_epoch).
    """
    from .data_eval import psnr
    from .operator import apply_chain

    policy = policy or InferencePolicy()
    if initial_chain is not None:
        chain = initial_chain
    else:
        first = pairs_source(start_epoch)
        n = first[0].n if first else None
        if n is None:
            raise ValueError("pairs_source yielded an empty batch")
        chain = init_chain(spec, n, preset_ops)
    history = TrainLog()

    def checkpoint(epoch):
        if checkpoint_dir is not None:
            save_chain(f"{checkpoint_dir}/checkpoint_{epoch:04d}.lgt", chain)

    if start_epoch == 0:
        checkpoint(0)
    for epoch in range(start_epoch, spec.epochs):
        batch = pairs_source(epoch)
        if len(batch) < spec.batch_size:
            log.warning("epoch %d: source yielded %d pairs (< batch_size %d)",
                        epoch, len(batch), spec.batch_size)
        results = infer_batch(chain, batch, config, policy, infer_spec, threads=threads)
        kept = [(r.coeffs, p) for r, p in zip(results, batch) if r is not None]
        skipped = len(batch) - len(kept)
        if not kept:
            log.warning("epoch %d: every pair failed inference; skipping epoch", epoch)
            continue
        coeffs_batch = [c for c, _ in kept]
        kept_pairs = [p for _, p in kept]
        e_pre = energy_total(chain, coeffs_batch, kept_pairs, config, op_grads=False).total
        chain = m_step(chain, coeffs_batch, kept_pairs, config, spec, minimize_spec)
        post = energy_total(chain, coeffs_batch, kept_pairs, config, op_grads=True)
        if post.total > e_pre * (1 + 1e-9) + 1e-12:
            log.warning("epoch %d: energy rose across fitting step (%g -> %g)",
                        epoch, e_pre, post.total)
        ops = list(chain.ops)
        for k in range(len(ops)):
            if k not in spec.fixed_ops:
                ops[k] = rescale_degeneracy(ops[k])
        chain = TransformChain(tuple(ops))

        mask = config.mask_vector(chain.n)
        scores = []
        for coeffs, pair in kept:
            recon, _ = apply_chain(chain, coeffs, pair.x_src)
            scores.append(psnr(recon, pair.x_tgt, mask))
        grad_norm = max(
            (float(np.max(np.abs(g.view(np.float64)))) for g in post.g_u + post.g_lambda),
            default=0.0,
        )
        history.epochs.append(
            EpochStats(
                epoch=epoch + 1,
                e_pre=float(e_pre),
                e_post=float(post.total),
                mean_psnr=float(np.mean(scores)),
                grad_norm=grad_norm,
                skipped_pairs=skipped,
            )
        )
        checkpoint(epoch + 1)
        log.info("epoch %d: E %.6g -> %.6g, mean PSNR %.2f dB",
                 epoch + 1, e_pre, post.total, history.epochs[-1].mean_psnr)
    return chain, history
