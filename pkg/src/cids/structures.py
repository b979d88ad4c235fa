"""Structure masks shared by the graph, environment and learner modules."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import StructuralAssumptionError


@dataclass(frozen=True, eq=False)
class StructureMasks:
    """Binary one-step causal structure.

    ``m_s_to_s[i, j] == 1`` is an edge ``s^i_t -> s^j_{t+1}``; ``m_a_to_s[j] == 1``
    is an edge ``a_t -> s^j_{t+1}``. Every dimension must cause itself at the next
    step, so the diagonal of ``m_s_to_s`` is all ones.
    """

    m_s_to_s: np.ndarray
    m_a_to_s: np.ndarray

    def __post_init__(self):
        ss = np.array(self.m_s_to_s, dtype=np.int64)
        a = np.array(self.m_a_to_s, dtype=np.int64).reshape(-1)
        if ss.ndim != 2 or ss.shape[0] != ss.shape[1]:
            raise StructuralAssumptionError(f"m_s_to_s must be square, got shape {ss.shape}")
        if a.shape[0] != ss.shape[0]:
            raise StructuralAssumptionError("m_a_to_s length does not match m_s_to_s")
        if not (np.isin(ss, (0, 1)).all() and np.isin(a, (0, 1)).all()):
            raise StructuralAssumptionError("mask entries must be 0 or 1")
        if not (np.diag(ss) == 1).all():
            missing = np.flatnonzero(np.diag(ss) == 0).tolist()
            raise StructuralAssumptionError(f"state dims {missing} lack a self-edge (diagonal of m_s_to_s must be 1)")
        ss.setflags(write=False)
        a.setflags(write=False)
        object.__setattr__(self, "m_s_to_s", ss)
        object.__setattr__(self, "m_a_to_s", a)

    @property
    def d(self) -> int:
        return self.m_a_to_s.shape[0]

    def __eq__(self, other):
        if not isinstance(other, StructureMasks):
            return NotImplemented
        return np.array_equal(self.m_s_to_s, other.m_s_to_s) and np.array_equal(self.m_a_to_s, other.m_a_to_s)

    def __hash__(self):
        return hash((self.m_s_to_s.tobytes(), self.m_a_to_s.tobytes()))

    def __repr__(self):
        return f"StructureMasks(m_s_to_s={self.m_s_to_s.tolist()}, m_a_to_s={self.m_a_to_s.tolist()})"

    @classmethod
    def identity(cls, d: int, m_a_to_s=None) -> "StructureMasks":
        a = np.zeros(d, dtype=np.int64) if m_a_to_s is None else m_a_to_s
        return cls(np.eye(d, dtype=np.int64), a)

    def dais_dims(self) -> frozenset:
        return frozenset(np.flatnonzero(self.m_a_to_s).tolist())

    def cross_edges(self) -> frozenset:
        """Off-diagonal ``(source, destination)`` pairs of ``m_s_to_s``."""
        src, dst = np.nonzero(self.m_s_to_s)
        return frozenset((int(i), int(j)) for i, j in zip(src, dst) if i != j)

    def to_dict(self) -> dict:
        return {"m_s_to_s": self.m_s_to_s.tolist(), "m_a_to_s": self.m_a_to_s.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "StructureMasks":
        return cls(np.array(data["m_s_to_s"]), np.array(data["m_a_to_s"]))


def random_masks(d: int, rng: np.random.Generator, p_action: float = 0.5, p_cross: float = 0.3) -> StructureMasks:
    """Draw masks with independent Bernoulli entries (diagonal fixed to 1)."""
    ss = (rng.random((d, d)) < p_cross).astype(np.int64)
    np.fill_diagonal(ss, 1)
    a = (rng.random(d) < p_action).astype(np.int64)
    return StructureMasks(ss, a)


def compose_cids_mask(masks: StructureMasks) -> np.ndarray:
    """CIDS selector: DAIS dims OR dims with an off-diagonal edge into a DAIS dim."""
    ss = masks.m_s_to_s.copy()
    np.fill_diagonal(ss, 0)
    aia = (ss @ masks.m_a_to_s > 0).astype(np.int64)
    return np.maximum(aia, masks.m_a_to_s)
