"""Deterministic derivation of per-stage seeds from one master seed.

Every pipeline stage draws its randomness from ``stage_seed(master, name)``
so that a single ``--seed`` flag reproduces the whole run while each stage
stays independently reproducible.
"""

STAGE_OFFSETS = {
    "synth": 0,
    "split": 1,
    "causal": 2,
    "predictor": 3,
    "noise": 4,
}


def stage_seed(master: int, stage: str) -> int:
    if stage not in STAGE_OFFSETS:
        raise KeyError(f"unknown pipeline stage {stage!r}")
    return int(master) * 100 + STAGE_OFFSETS[stage]
