"""Rotations, Euler-angle rate Jacobians, skew maps and ellipsoid geometry.

Euler angles follow the x-y-z convention: ``R = Rx(phi) @ Ry(theta) @ Rz(psi)``.
The valid domain is ``T = (-pi, pi) x (-pi/2, pi/2) x (-pi, pi)``; angles are
stored unwrapped and only wrapped when a domain check is requested.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EULER_DOMAIN_HALF_WIDTH = np.array([np.pi, np.pi / 2, np.pi])


class InvalidGeometryError(ValueError):
    """Raised when an ellipsoid shape matrix is not symmetric positive definite."""


def skew(a) -> np.ndarray:
    """Skew-symmetric matrix S(a) such that S(a) @ b == cross(a, b)."""
    ax, ay, az = a
    return np.array([[0.0, -az, ay], [az, 0.0, -ax], [-ay, ax, 0.0]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_xyz(eta) -> np.ndarray:
    """Rotation matrix of x-y-z Euler angles (phi, theta, psi)."""
    phi, theta, psi = eta
    return rot_x(phi) @ rot_y(theta) @ rot_z(psi)


def euler_rate_jacobian(eta) -> np.ndarray:
    """Jacobian J_B mapping Euler-angle rates to angular velocity: w = J_B(eta) @ eta_dot.

    det(J_B) = cos(theta); invertible away from theta = +-pi/2.
    """
    phi, theta, _ = eta
    cphi, sphi = np.cos(phi), np.sin(phi)
    ctheta, stheta = np.cos(theta), np.sin(theta)
    return np.array(
        [
            [1.0, 0.0, stheta],
            [0.0, cphi, -ctheta * sphi],
            [0.0, sphi, ctheta * cphi],
        ]
    )


def euler_in_domain(eta, tol: float = 0.0) -> bool:
    """Check membership of (wrapped) Euler angles in the domain T."""
    wrapped = np.arctan2(np.sin(eta), np.cos(eta))
    return bool(np.all(np.abs(wrapped) < EULER_DOMAIN_HALF_WIDTH - tol))


def euler_from_rotation(rotation: np.ndarray) -> np.ndarray:
    """Invert rot_xyz for theta strictly inside (-pi/2, pi/2)."""
    # R[0, 2] = sin(theta) for R = Rx Ry Rz
    theta = np.arcsin(np.clip(rotation[0, 2], -1.0, 1.0))
    phi = np.arctan2(-rotation[1, 2], rotation[2, 2])
    psi = np.arctan2(-rotation[0, 1], rotation[0, 0])
    return np.array([phi, theta, psi])


def _check_spd(mat: np.ndarray, name: str) -> np.ndarray:
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (3, 3):
        raise InvalidGeometryError(f"{name} must be 3x3, got {mat.shape}")
    if not np.all(np.abs(mat - mat.T) <= 1e-12):
        raise InvalidGeometryError(f"{name} is not symmetric within 1e-12")
    eigvals = np.linalg.eigvalsh(mat)
    if np.any(eigvals <= 0.0):
        raise InvalidGeometryError(f"{name} has non-positive eigenvalues {eigvals}")
    return mat


@dataclass(frozen=True)
class Ellipsoid:
    """Solid ellipsoid {p : (p - center)^T P (p - center) <= 1}.

    P is symmetric positive definite; its eigenvalues are the inverse squared
    semi-axis lengths.
    """

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        object.__setattr__(self, "shape", _check_spd(self.shape, "shape matrix"))

    @classmethod
    def from_semi_axes(cls, center, semi_axes, rotation=None) -> "Ellipsoid":
        semi_axes = np.asarray(semi_axes, dtype=float)
        if np.any(semi_axes <= 0):
            raise InvalidGeometryError(f"semi-axes must be positive, got {semi_axes}")
        diag = np.diag(1.0 / semi_axes**2)
        if rotation is None:
            shape = diag
        else:
            rotation = np.asarray(rotation, dtype=float)
            shape = rotation @ diag @ rotation.T
            shape = 0.5 * (shape + shape.T)
        return cls(center, shape)

    @classmethod
    def sphere(cls, center, radius: float) -> "Ellipsoid":
        return cls.from_semi_axes(center, [radius, radius, radius])

    @property
    def semi_axes(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.linalg.eigvalsh(self.shape))[::-1]

    def contains(self, point) -> bool:
        d = np.asarray(point, dtype=float) - self.center
        return float(d @ self.shape @ d) <= 1.0

    def is_sphere(self, tol: float = 1e-12) -> bool:
        off = self.shape - np.diag(np.diag(self.shape))
        diag = np.diag(self.shape)
        return np.max(np.abs(off)) <= tol * max(1.0, diag.max()) and np.ptp(diag) <= tol * diag.max()

    def translated(self, offset) -> "Ellipsoid":
        return Ellipsoid(self.center + np.asarray(offset, dtype=float), self.shape)


def sphere_margin(center_a, radius_a: float, center_b, radius_b: float) -> float:
    """Closed-form margin for two spheres; same value as ellipsoid_margin."""
    d = float(np.linalg.norm(np.asarray(center_a, dtype=float) - np.asarray(center_b, dtype=float)))
    if d <= radius_b:
        return -1.0
    return ((d - radius_b) / radius_a) ** 2 - 1.0


def ellipsoid_margin(a: Ellipsoid, b: Ellipsoid, tol: float = 1e-10) -> float:
    """Separation margin m = min {(p-c_a)^T P_a (p-c_a) : p in b} - 1.

    m <= 0 iff the ellipsoids overlap; m is continuous in both centers. The
    constrained minimum is found by root-finding on the Lagrange-multiplier
    parameterization; `tol` bounds the boundary residual of the minimizer.
    """
    pa, pb = a.shape, b.shape
    ca, cb = a.center, b.center

    d0 = ca - cb
    if float(d0 @ pb @ d0) <= 1.0:
        # unconstrained minimizer c_a lies inside b
        return -1.0

    def boundary_residual(mu: float) -> float:
        p = np.linalg.solve(pa + mu * pb, pa @ ca + mu * (pb @ cb))
        d = p - cb
        return float(d @ pb @ d) - 1.0

    from scipy.optimize import brentq

    mu_hi = 1.0
    while boundary_residual(mu_hi) > 0.0:
        mu_hi *= 4.0
        if mu_hi > 1e20:
            raise InvalidGeometryError("multiplier bracketing failed")
    mu = brentq(boundary_residual, 0.0, mu_hi, xtol=1e-15, rtol=8.9e-16, maxiter=200)
    if abs(boundary_residual(mu)) > tol:
        raise InvalidGeometryError("multiplier residual above tolerance")
    p = np.linalg.solve(pa + mu * pb, pa @ ca + mu * (pb @ cb))
    d = p - ca
    return float(d @ pa @ d) - 1.0
