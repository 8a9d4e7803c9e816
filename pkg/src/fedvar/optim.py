"""Adam with explicit, serialisable state."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.t < 0:
            raise ValueError("step counter must be non-negative")

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **hyper)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["m"] = self.m.tolist()
        d["v"] = self.v.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        d = dict(d)
        return cls(np.asarray(d.pop("m"), dtype=float), np.asarray(d.pop("v"), dtype=float), **d)


def adam_step(state: AdamState, params, grad, direction: str = "ascend") -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update; ``"ascend"`` maximises (used for the ELBO)."""
    params = np.asarray(params, dtype=float)
    grad = np.asarray(grad, dtype=float)
    if params.shape != grad.shape or params.shape != state.m.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grad {grad.shape}, state {state.m.shape}")
    if direction not in ("ascend", "descend"):
        raise ValueError("direction must be 'ascend' or 'descend'")
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1**t)
    v_hat = v / (1 - state.beta2**t)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    new = params + step if direction == "ascend" else params - step
    return replace(state, m=m, v=v, t=t), new
