"""Three-phase cosine curriculum over loss weights, temperatures, and
parameter freezing.

Normalized progress p = step / total_steps is split into an alignment
segment [0, a), a joint segment [a, z) and a polish segment [z, 1];
boundaries belong to the later phase.  Within the first two segments each
weight follows interp(start, end, t) = end + (start - end)(1 + cos(pi t))/2,
so trajectories are continuous across boundaries; the polish triple is held
constant.  During polish the sense machinery (sense projections, token
embeddings, weight head) is frozen.
"""

import math
import warnings
from dataclasses import dataclass

from .model import SENSE_MACHINERY_PREFIXES

ALIGNMENT, JOINT, POLISH = "alignment", "joint", "polish"


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    a: float = 0.2
    z: float = 0.5
    align_weights: tuple = (0.54, 0.44, 0.02)
    joint_weights: tuple = (0.40, 0.40, 0.20)
    polish_weights: tuple = (0.15, 0.15, 0.70)
    tau_sns: float = 0.05
    tau_ctx: float = 0.07
    tau_pool: float = 0.7
    temp_decay: bool = False

    def __post_init__(self):
        if not (0.0 < self.a < self.z < 1.0):
            raise ValueError(f"need 0 < a < z < 1, got a={self.a}, z={self.z}")
        for name in ("align_weights", "joint_weights", "polish_weights"):
            triple = getattr(self, name)
            if len(triple) != 3 or any(w < 0 for w in triple):
                raise ValueError(f"{name} must be three non-negative weights")
        for name in ("tau_sns", "tau_ctx", "tau_pool"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")


@dataclass(frozen=True)
class PhaseWeights:
    phase: str
    w_sns: float
    w_ctx: float
    w_lm: float
    tau_sns: float
    tau_ctx: float
    freeze_sense_machinery: bool

    def triple(self):
        return (self.w_sns, self.w_ctx, self.w_lm)


def interp(a_val, b_val, t):
    """Cosine interpolation from a_val (t=0) to b_val (t=1).

    Endpoints are returned exactly (b + (a-b) need not round back to a in
    floating point).  t outside [0, 1] is clamped with a warning: resuming
    with off-by-one step accounting should degrade gracefully, not crash.
    """
    if t < 0.0 or t > 1.0:
        warnings.warn(f"interp progress {t} outside [0, 1]; clamping", stacklevel=2)
        t = min(1.0, max(0.0, t))
    if t == 0.0:
        return a_val
    if t == 1.0:
        return b_val
    return b_val + 0.5 * (a_val - b_val) * (1.0 + math.cos(math.pi * t))


def phase_of(p, cfg):
    if p < cfg.a:
        return ALIGNMENT
    if p < cfg.z:
        return JOINT
    return POLISH


def weights_at_progress(p, cfg):
    """PhaseWeights at normalized progress p in [0, 1]."""
    phase = phase_of(p, cfg)
    if phase == ALIGNMENT:
        t = p / cfg.a
        triple = tuple(interp(x, y, t) for x, y in zip(cfg.align_weights, cfg.joint_weights))
    elif phase == JOINT:
        t = (p - cfg.a) / (cfg.z - cfg.a)
        triple = tuple(interp(x, y, t) for x, y in zip(cfg.joint_weights, cfg.polish_weights))
    else:
        triple = tuple(cfg.polish_weights)
    if cfg.temp_decay:
        scale = 1.0 - 0.5 * min(1.0, max(0.0, p))
        tau_sns, tau_ctx = cfg.tau_sns * scale, cfg.tau_ctx * scale
    else:
        tau_sns, tau_ctx = cfg.tau_sns, cfg.tau_ctx
    return PhaseWeights(phase=phase, w_sns=triple[0], w_ctx=triple[1], w_lm=triple[2],
                        tau_sns=tau_sns, tau_ctx=tau_ctx,
                        freeze_sense_machinery=(phase == POLISH))


def weights_at(step, cfg):
    """PhaseWeights for a 0-based step index; p = step / total_steps."""
    if step < 0 or step > cfg.total_steps:
        warnings.warn(f"step {step} outside [0, total_steps]; clamping", stacklevel=2)
        step = min(cfg.total_steps, max(0, step))
    return weights_at_progress(step / cfg.total_steps, cfg)


def freeze_mask(phase, params):
    """Parameter name -> True if trainable in this phase.

    Polish freezes the sense machinery; the context transformer and the
    output head keep training (the head is untied first if it was tied).
    """
    frozen = phase == POLISH
    out = {}
    for name in params.names():
        is_sense = name.startswith(SENSE_MACHINERY_PREFIXES)
        out[name] = not (frozen and is_sense)
    return out
