"""Differentially private synthetic text generation, desk scale.

Pipeline: ingest labeled text -> audit author contributions -> fine-tune a
prompt-conditioned generator (autoregressive or text diffusion) with DP-SGD
-> sample a labeled synthetic corpus -> measure downstream utility.
"""

from dpsynth.privacy import (
    AuditReport,
    DpSgdConfig,
    PrivacyBudget,
    RdpCurve,
    audit_author_contributions,
    calibrate_noise,
    compose,
    default_delta,
    effective_budget,
    group_privacy,
    rdp_gaussian,
    rdp_subsampled_gaussian,
    to_epsilon_delta,
)

__version__ = "0.1.0"

__all__ = [
    "AuditReport",
    "DpSgdConfig",
    "PrivacyBudget",
    "RdpCurve",
    "audit_author_contributions",
    "calibrate_noise",
    "compose",
    "default_delta",
    "effective_budget",
    "group_privacy",
    "rdp_gaussian",
    "rdp_subsampled_gaussian",
    "to_epsilon_delta",
]
