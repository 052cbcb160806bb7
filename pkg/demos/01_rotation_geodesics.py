"""Geodesics and sampling on the rotation groups.

Walks through the building blocks the flow-matching losses rest on: SLERP
interpolation, the constant body-frame geodesic velocity, canonical-metric
norms, periodic torsions, and Haar-uniform sampling.
"""

import math

import numpy as np

from poseflow import (
    Rotation3,
    TangentSO3,
    Torsion,
    canonical_norm,
    geodesic_velocity_so3,
    sample_rotation_uniform,
    slerp_so3,
    slerp_torsion,
    torsion_delta,
)
from poseflow.manifold import skew, unskew

rng = np.random.default_rng(0)

print("== SLERP between two rotations ==")
r0 = Rotation3.from_axis_angle([1, 0, 0], math.radians(10))
r1 = Rotation3.from_axis_angle([0, 1, 0], math.radians(80))
for t in (0.0, 0.25, 0.5, 0.75, 1.0):
    rt = slerp_so3(r0, r1, t)
    print(f"  t={t:4.2f}  angle from r0 = {math.degrees(r0.angle_to(rt)):6.2f} deg")

print("\n== Geodesic velocity is constant along the path ==")
k = geodesic_velocity_so3(r0, r1)
print(f"  k = {np.round(k.k, 4)}  (|k| = {k.norm():.4f} rad = geodesic length)")
h = 1e-6
for t in (0.1, 0.5, 0.9):
    rm, rp = slerp_so3(r0, r1, t - h), slerp_so3(r0, r1, t + h)
    rt = slerp_so3(r0, r1, t)
    fd = unskew(rt.matrix().T @ (rp.matrix() - rm.matrix()) / (2 * h))
    print(f"  t={t}: finite-difference body velocity ~ {np.round(fd, 4)}")

print("\n== Canonical metric tr(X^T Y) ==")
kv = np.array([1.0, 0.0, 0.0])
print(f"  |k=(1,0,0)|_g = {canonical_norm(TangentSO3(kv)):.6f}  (sqrt 2)")
x = skew(kv)
print(f"  direct trace evaluation: {math.sqrt(np.trace(x.T @ x)):.6f}")

print("\n== Torsions wrap to (-p/2, p/2] ==")
t0, t1 = Torsion(math.radians(170)), Torsion(math.radians(-170))
print(f"  delta(170 deg -> -170 deg) = {math.degrees(torsion_delta(t0, t1)):+.1f} deg"
      "  (shortest path through the boundary)")
p = 2 * math.pi / 3
ta, tb = Torsion(math.radians(50), p), Torsion(math.radians(-50), p)
print(f"  threefold bond, delta(50 -> -50 deg) = {math.degrees(torsion_delta(ta, tb)):+.1f} deg")
print(f"  midpoint: {math.degrees(slerp_torsion(ta, tb, 0.5).theta):+.1f} deg")

print("\n== Haar-uniform rotations ==")
n = 20000
angles = np.array([2 * math.acos(min(1.0, abs(sample_rotation_uniform(rng).q[0])))
                   for _ in range(n)])
hist, edges = np.histogram(angles, bins=8, range=(0, math.pi), density=True)
print("  rotation-angle density vs (1-cos t)/pi:")
for lo, hi, got in zip(edges[:-1], edges[1:], hist):
    mid = 0.5 * (lo + hi)
    want = (1 - math.cos(mid)) / math.pi
    bar = "#" * int(40 * got)
    print(f"  [{lo:4.2f},{hi:4.2f})  got {got:5.3f}  expect {want:.3f}  {bar}")
