"""Parameter registry and bias-corrected Adam."""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor

__all__ = ["ParamSet", "Adam", "NonFiniteGradientError", "global_norm"]


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN or inf; the update step was rejected."""


class ParamSet:
    """Ordered mapping from parameter names to numpy arrays.

    Names use '/'-separated paths whose first segment is the parameter
    group (enc_c, enc_s, dec, scorer). Binding a ParamSet to a tape
    creates one leaf tensor per parameter for that step.
    """

    def __init__(self):
        self._arrays: dict[str, np.ndarray] = {}

    def add(self, name: str, array: np.ndarray) -> np.ndarray:
        if name in self._arrays:
            raise ValueError(f"duplicate parameter name: {name}")
        self._arrays[name] = array
        return array

    def __getitem__(self, name: str) -> np.ndarray:
        return self._arrays[name]

    def __setitem__(self, name: str, array: np.ndarray):
        self._arrays[name] = array

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self):
        return self._arrays.items()

    def group(self, name: str) -> str:
        return name.split("/", 1)[0]

    def groups(self) -> set[str]:
        return {self.group(n) for n in self._arrays}

    def bind(self, tape: Tape | None) -> dict[str, Tensor]:
        """Leaf tensors for every parameter (detached when tape is None)."""
        if tape is None:
            return {n: Tensor(a) for n, a in self._arrays.items()}
        return {n: tape.leaf(a) for n, a in self._arrays.items()}

    def grads_from(self, tape_grads: dict[int, np.ndarray],
                   binding: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Dense per-parameter gradients; unreachable leaves get zeros."""
        out = {}
        for name, arr in self._arrays.items():
            g = tape_grads.get(binding[name].node_id)
            out[name] = np.zeros_like(arr) if g is None else g
        return out

    def copy(self) -> "ParamSet":
        dup = ParamSet()
        for n, a in self._arrays.items():
            dup.add(n, a.copy())
        return dup

    def assign_from(self, other: "ParamSet"):
        if self.names() != other.names():
            raise ValueError("parameter name mismatch")
        for n in self._arrays:
            np.copyto(self._arrays[n], other[n])


def global_norm(grads: dict[str, np.ndarray]) -> float:
    """L2 norm of all gradients flattened into one vector.

    Accumulated in float64 so the value does not depend on dict order.
    """
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    return float(np.sqrt(total))


class Adam:
    """Bias-corrected Adam over a dict of named parameter arrays.

    Update: p -= lr * m_hat / (sqrt(v_hat) + eps), applied in place.
    """

    def __init__(self, params: ParamSet, lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(a) for n, a in params.items()}
        self.v = {n: np.zeros_like(a) for n, a in params.items()}

    def step(self, params: ParamSet, grads: dict[str, np.ndarray]):
        """One in-place update. Rejects non-finite gradients untouched."""
        for name in self.m:
            if not np.all(np.isfinite(grads[name])):
                raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name in self.m:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p = params[name]
            p -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/step": np.array([self.step_count], dtype=np.int64)}
        for n, a in self.m.items():
            out[f"{prefix}/m/{n}"] = a
        for n, a in self.v.items():
            out[f"{prefix}/v/{n}"] = a
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays[f"{prefix}/step"][0])
        for n in self.m:
            np.copyto(self.m[n], arrays[f"{prefix}/m/{n}"])
            np.copyto(self.v[n], arrays[f"{prefix}/v/{n}"])
