import math
import warnings

import numpy as np
import pytest

from poseflow.ligand import Bond, LigandConformer


def _quiet_conformer(elements, coords, bonds):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return LigandConformer(elements, coords, bonds)


def make_cf3_cf3():
    """Ethane-like heavy-atom molecule: two carbons, three fluorines each."""
    tet = math.radians(109.47)
    c0 = np.zeros(3)
    c1 = np.array([1.5, 0.0, 0.0])
    coords = [c0, c1]
    elements = ["C", "C"]
    bonds = [Bond(0, 1)]
    for base, sign in ((0, 1.0), (1, -1.0)):
        for k in range(3):
            phi = 2 * math.pi * k / 3
            # Direction makes the tetrahedral angle with the bond to the other C.
            d = np.array(
                [sign * math.cos(tet), math.sin(tet) * math.cos(phi), math.sin(tet) * math.sin(phi)]
            )
            coords.append(coords[base] + 1.35 * d)
            elements.append("F")
            bonds.append(Bond(base, len(coords) - 1))
    return _quiet_conformer(elements, np.array(coords), bonds)


def make_benzene():
    coords = []
    for k in range(6):
        ang = 2 * math.pi * k / 6
        coords.append([1.4 * math.cos(ang), 1.4 * math.sin(ang), 0.0])
    bonds = [Bond(k, (k + 1) % 6, order=1, in_ring=True) for k in range(6)]
    return _quiet_conformer(["C"] * 6, np.array(coords), bonds)


def make_chain4():
    """Zigzag chain A-B-C-D; only B-C is rotatable."""
    coords = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.4, 0.6, 0.0],
            [2.8, 0.0, 0.1],
            [4.2, 0.6, 0.4],
        ]
    )
    bonds = [Bond(0, 1), Bond(1, 2), Bond(2, 3)]
    return _quiet_conformer(["C", "N", "C", "O"], coords, bonds)


def make_branched():
    """Six-ring core with a nested two-bond branch and a terminal oxygen.

    Rotatable bonds: (ring atom 0)-(6) with moving {6,7,8}, and (6)-(7) with
    moving {7,8}; the bond (3)-(9) has a terminal atom so it is not rotatable.
    """
    coords = []
    for k in range(6):
        ang = 2 * math.pi * k / 6
        coords.append([1.4 * math.cos(ang), 1.4 * math.sin(ang), 0.0])
    bonds = [Bond(k, (k + 1) % 6, order=1, in_ring=True) for k in range(6)]
    elements = ["C"] * 6
    # Branch off atom 0: b1 (idx 6), b2 (idx 7), b3 (idx 8), zigzag out of plane.
    coords.append([2.8, 0.3, 0.5])
    coords.append([3.9, -0.3, 1.2])
    coords.append([5.2, 0.3, 1.5])
    elements += ["C", "C", "N"]
    bonds += [Bond(0, 6), Bond(6, 7), Bond(7, 8)]
    # Terminal O on ring atom 3.
    coords.append([-2.6, -0.2, 0.7])
    elements.append("O")
    bonds.append(Bond(3, 9))
    return _quiet_conformer(elements, np.array(coords), bonds)


@pytest.fixture
def cf3_cf3():
    return make_cf3_cf3()


@pytest.fixture
def benzene():
    return make_benzene()


@pytest.fixture
def chain4():
    return make_chain4()


@pytest.fixture
def branched():
    return make_branched()
