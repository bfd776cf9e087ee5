from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np

from ..core.exceptions import raise_invalid_input_error, raise_shape_error
from ..utils.linalg import Matrix, as_matrix


@dataclass(frozen=True)
class TokenBlocks:
    """The concatenated sequence [x_p; x_s; x_o] plus the output-token mask."""
    x_p: Matrix
    x_s: Tuple[Matrix, ...]
    x_o: Matrix
    mask_o: np.ndarray

    def __post_init__(self):
        x_p = as_matrix(self.x_p, "x_p")
        styles = self.x_s
        if isinstance(styles, np.ndarray):
            styles = (styles,)
        x_s = tuple(as_matrix(s, f"x_s[{k}]") for k, s in enumerate(styles))
        x_o = as_matrix(self.x_o, "x_o")
        if not x_s:
            raise_shape_error("x_s", "at least one style block", "none")
        widths = {x_p.shape[1], x_o.shape[1], *(s.shape[1] for s in x_s)}
        if len(widths) != 1:
            raise_shape_error("token widths", "one shared d", sorted(widths))
        mask = np.asarray(self.mask_o, dtype=np.int8).reshape(-1)
        if mask.shape[0] != x_o.shape[0]:
            raise_shape_error("mask_o", x_o.shape[0], mask.shape[0])
        if np.any((mask != 0) & (mask != 1)):
            raise_invalid_input_error("mask_o", "entries must be 0 or 1")
        object.__setattr__(self, "x_p", x_p)
        object.__setattr__(self, "x_s", x_s)
        object.__setattr__(self, "x_o", x_o)
        object.__setattr__(self, "mask_o", mask)

    @property
    def d(self) -> int:
        return self.x_p.shape[1]

    @property
    def style(self) -> Matrix:
        """All style blocks concatenated into the single s slot."""
        return np.concatenate(self.x_s, axis=0)

    @property
    def style_sizes(self) -> List[int]:
        return [s.shape[0] for s in self.x_s]

    @property
    def counts(self) -> Tuple[int, int, int]:
        return self.x_p.shape[0], sum(self.style_sizes), self.x_o.shape[0]

    def stacked(self) -> Matrix:
        return np.concatenate([self.x_p, self.style, self.x_o], axis=0)

    def with_rows(self, stacked: Matrix) -> "TokenBlocks":
        """Split a stacked [p; s; o] matrix back into blocks, keeping the style split and mask."""
        n_p, n_s, _ = self.counts
        bounds = np.cumsum([n_p, *self.style_sizes])
        pieces = np.split(stacked, bounds, axis=0)
        return replace(self, x_p=pieces[0], x_s=tuple(pieces[1:-1]), x_o=pieces[-1])


@dataclass(frozen=True)
class ProjectionWeights:
    """Square query/key/value projections."""
    W_q: Matrix
    W_k: Matrix
    W_v: Matrix

    def __post_init__(self):
        for name in ("W_q", "W_k", "W_v"):
            w = as_matrix(getattr(self, name), name)
            if w.shape[0] != w.shape[1]:
                raise_shape_error(name, "square matrix", w.shape)
            object.__setattr__(self, name, w)
        if not (self.W_q.shape == self.W_k.shape == self.W_v.shape):
            raise_shape_error("projection weights", "matching shapes", (self.W_q.shape, self.W_k.shape, self.W_v.shape))

    @property
    def d(self) -> int:
        return self.W_q.shape[0]


@dataclass(frozen=True)
class DitBlockWeights:
    """One toy DiT block: attention projections and a 2-layer ReLU MLP."""
    proj: ProjectionWeights
    W_mlp1: Matrix
    W_mlp2: Matrix

    def __post_init__(self):
        d = self.proj.d
        w1 = as_matrix(self.W_mlp1, "W_mlp1")
        w2 = as_matrix(self.W_mlp2, "W_mlp2")
        if w1.shape[0] != d or w2.shape[1] != d or w1.shape[1] != w2.shape[0]:
            raise_shape_error("MLP weights", f"({d}, h) and (h, {d})", (w1.shape, w2.shape))
        object.__setattr__(self, "W_mlp1", w1)
        object.__setattr__(self, "W_mlp2", w2)


@dataclass(frozen=True)
class QkvBlocks:
    """Per-block queries, keys and values; style blocks already concatenated."""
    Q_p: Matrix
    Q_s: Matrix
    Q_o: Matrix
    K_p: Matrix
    K_s: Matrix
    K_o: Matrix
    V_p: Matrix
    V_s: Matrix
    V_o: Matrix

    @property
    def counts(self) -> Tuple[int, int, int]:
        return self.K_p.shape[0], self.K_s.shape[0], self.K_o.shape[0]

    @property
    def d(self) -> int:
        return self.Q_o.shape[1]

    def keys(self) -> Matrix:
        return np.concatenate([self.K_p, self.K_s, self.K_o], axis=0)

    def values(self) -> Matrix:
        return np.concatenate([self.V_p, self.V_s, self.V_o], axis=0)

    def queries(self) -> Matrix:
        return np.concatenate([self.Q_p, self.Q_s, self.Q_o], axis=0)


@dataclass(frozen=True)
class BlockAttention:
    """Output-query logits and the three attention blocks they normalise into."""
    logits_Z: Matrix
    alpha_p: Matrix
    alpha_s: Matrix
    alpha_o: Matrix

    def concatenated(self) -> Matrix:
        return np.concatenate([self.alpha_p, self.alpha_s, self.alpha_o], axis=1)


@dataclass(frozen=True)
class LayerTrace:
    """What one layer computed for the output queries."""
    layer: int
    logits_Z: Matrix
    alpha: Matrix
    h_o: Matrix
    lam: Optional[float]
    mode: str
    prompt_branch: Optional[Matrix] = None
    style_branch: Optional[Matrix] = None


@dataclass(frozen=True)
class StackResult:
    """Final blocks and the per-layer trace of a stack run."""
    output: TokenBlocks
    trace: List[LayerTrace] = field(default_factory=list)


@dataclass(frozen=True)
class ReferenceTokens:
    """A clean target (N_o rows) and the style exemplar (N_s rows)."""
    target: Matrix
    style: Matrix

    def __post_init__(self):
        target = as_matrix(self.target, "target")
        style = as_matrix(self.style, "style")
        if target.shape[1] != style.shape[1]:
            raise_shape_error("reference widths", target.shape[1], style.shape[1])
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "style", style)


@dataclass(frozen=True)
class GaussianEndpoints:
    """Diagonal Gaussian source (pi_0, noise) and target (pi_1, data)."""
    mu0: np.ndarray
    mu1: np.ndarray
    var0: np.ndarray
    var1: np.ndarray

    def __post_init__(self):
        arrays = {}
        for name in ("mu0", "mu1", "var0", "var1"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(-1)
            if not np.all(np.isfinite(arr)):
                raise_invalid_input_error(name, "non-finite entries")
            arrays[name] = arr
        if len({a.shape[0] for a in arrays.values()}) != 1:
            raise_shape_error("endpoint dimensions", "equal lengths", {k: a.shape[0] for k, a in arrays.items()})
        if np.any(arrays["var0"] <= 0) or np.any(arrays["var1"] <= 0):
            raise_invalid_input_error("variances", "must be > 0")
        for name, arr in arrays.items():
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.mu0.shape[0]


@dataclass(frozen=True)
class Trajectory:
    """States of one sample on an increasing time grid from 0 to 1."""
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64).reshape(-1)
        states = np.asarray(self.states, dtype=np.float64)
        if states.ndim == 1:
            states = states.reshape(-1, 1)
        if states.shape[0] != times.shape[0]:
            raise_shape_error("trajectory", f"{times.shape[0]} states", states.shape[0])
        if np.any(np.diff(times) <= 0):
            raise_invalid_input_error("times", "must be strictly increasing")
        if abs(times[0]) > 1e-12 or abs(times[-1] - 1.0) > 1e-12:
            raise_invalid_input_error("times", "must run from 0 to 1")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "states", states)
