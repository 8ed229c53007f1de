"""Learning continuous transformation operators from image patch pairs.

Subpackages:
  operator   eigen-basis transformation operators, chains, LGT1 files
  energy     the fitting objective and its analytic gradients
  optimize   quasi-Newton minimizer shared by inference and learning
  inference  per-pair coefficient estimation with adaptive smoothing
  learning   operator learning by alternating inference and fitting
  affine     hand-coded affine generators and synthetic ground truth
  data_eval  patch extraction, PSNR, block-matching baselines, model table
  cli        command-line front end (synth | infer | train | eval | gradcheck)
"""

from .operator import (
    Coefficients,
    LieOperator,
    NonDiagonalizableError,
    OverflowGuardError,
    TransformChain,
    apply_chain,
    apply_exact,
    apply_smoothed,
    load_chain,
    make_operator,
    reconstruct_a,
    save_chain,
)
from .energy import EnergyConfig, EnergyReport, PatchPair, energy_total, gradcheck

__all__ = [
    "Coefficients",
    "LieOperator",
    "NonDiagonalizableError",
    "OverflowGuardError",
    "TransformChain",
    "apply_chain",
    "apply_exact",
    "apply_smoothed",
    "load_chain",
    "make_operator",
    "reconstruct_a",
    "save_chain",
    "EnergyConfig",
    "EnergyReport",
    "PatchPair",
    "energy_total",
    "gradcheck",
]

__version__ = "0.1.0"
