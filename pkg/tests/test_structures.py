import numpy as np
import pytest

from cids.exceptions import StructuralAssumptionError
from cids.structures import StructureMasks, compose_cids_mask, random_masks


def test_identity_has_no_cross_edges():
    m = StructureMasks.identity(4)
    assert m.d == 4
    assert m.cross_edges() == frozenset()
    assert m.dais_dims() == frozenset()


def test_zero_diagonal_rejected():
    ss = np.eye(3, dtype=int)
    ss[1, 1] = 0
    with pytest.raises(StructuralAssumptionError, match=r"\[1\]"):
        StructureMasks(ss, [0, 0, 0])


@pytest.mark.parametrize(
    "ss, a",
    [
        (np.ones((2, 3)), [0, 0]),
        (np.eye(2), [0, 0, 0]),
        (np.eye(2) * 2, [0, 0]),
    ],
)
def test_malformed_masks_rejected(ss, a):
    with pytest.raises(StructuralAssumptionError):
        StructureMasks(ss, a)


def test_masks_are_read_only():
    m = StructureMasks.identity(2, [1, 0])
    with pytest.raises(ValueError):
        m.m_a_to_s[0] = 0


def test_dict_round_trip_and_equality():
    rng = np.random.default_rng(3)
    for _ in range(20):
        m = random_masks(int(rng.integers(1, 6)), rng)
        back = StructureMasks.from_dict(m.to_dict())
        assert back == m
        assert hash(back) == hash(m)


def test_cross_edges_and_dais():
    ss = np.eye(3, dtype=int)
    ss[2, 0] = 1
    m = StructureMasks(ss, [1, 0, 0])
    assert m.cross_edges() == frozenset({(2, 0)})
    assert m.dais_dims() == frozenset({0})
    np.testing.assert_array_equal(compose_cids_mask(m), [1, 0, 1])
