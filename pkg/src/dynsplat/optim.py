"""Adam with named parameter groups, resized coherently on densify and prune."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import InvalidParameterError

BETA1 = 0.9
BETA2 = 0.999
EPS = 1e-15


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(param, dtype=np.float64), np.zeros_like(param, dtype=np.float64))

    def copy(self) -> "AdamState":
        return AdamState(self.m.copy(), self.v.copy(), self.step)


def _flat(arr: np.ndarray, name: str) -> np.ndarray:
    if arr.dtype != np.float64 or not arr.flags.c_contiguous:
        raise InvalidParameterError(f"{name} must be a C-contiguous float64 array")
    return arr.reshape(-1)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float,
              beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS) -> None:
    """One bias-corrected Adam update of ``param`` in place."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    if grad.shape != param.shape or state.m.shape != param.shape:
        raise InvalidParameterError(
            f"shape mismatch: param {param.shape}, grad {grad.shape}, moments {state.m.shape}")
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    K.adam_update(_flat(param, "param"), grad.reshape(-1), _flat(state.m, "m"),
                  _flat(state.v, "v"), lr, beta1, beta2, eps, bc1, bc2)


class Adam:
    """Adam over a dict of named arrays, each with its own learning rate.

    Arrays listed in ``unit_rows`` are renormalized row-wise after each step
    (quaternions).
    """

    def __init__(self, params: dict[str, np.ndarray], lrs: dict[str, float],
                 beta1: float = BETA1, beta2: float = BETA2, eps: float = EPS,
                 unit_rows: tuple[str, ...] = ()):
        missing = set(params) - set(lrs)
        if missing:
            raise InvalidParameterError(f"no learning rate for {sorted(missing)}")
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.unit_rows = tuple(unit_rows)
        self.state = {name: AdamState.zeros_like(p) for name, p in params.items()}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, param in params.items():
            grad = grads.get(name)
            if grad is None:
                continue
            adam_step(param, grad, self.state[name], self.lrs[name],
                      self.beta1, self.beta2, self.eps)
            if name in self.unit_rows:
                param /= np.linalg.norm(param, axis=1, keepdims=True)

    def remap_rows(self, origin: np.ndarray, names=None) -> None:
        """Reindex per-row moments after densify/prune.

        Row ``i`` of the new state copies old row ``origin[i]``; rows with
        ``origin == -1`` start from zero moments.
        """
        origin = np.asarray(origin, dtype=np.int64)
        fresh = origin < 0
        src = np.where(fresh, 0, origin)
        for name in names if names is not None else list(self.state):
            st = self.state[name]
            m = st.m[src] if len(st.m) else np.zeros((len(origin),) + st.m.shape[1:])
            v = st.v[src] if len(st.v) else np.zeros((len(origin),) + st.v.shape[1:])
            m[fresh] = 0.0
            v[fresh] = 0.0
            self.state[name] = AdamState(np.ascontiguousarray(m), np.ascontiguousarray(v), st.step)

    def reset(self, name: str) -> None:
        """Zero the moments of one parameter (used after an opacity reset)."""
        st = self.state[name]
        st.m[...] = 0.0
        st.v[...] = 0.0

    def copy(self) -> "Adam":
        out = Adam.__new__(Adam)
        out.lrs = dict(self.lrs)
        out.beta1, out.beta2, out.eps = self.beta1, self.beta2, self.eps
        out.unit_rows = self.unit_rows
        out.state = {k: s.copy() for k, s in self.state.items()}
        return out
