"""Local projections onto PD constraint manifolds and their Jacobians.

All functions accept a single argument or a stack with leading batch axes.
Matrix Jacobians are returned flattened row-major: entry [a, b] is the
derivative of output entry a = 3*i + j with respect to F entry b = 3*k + l.
"""

from dataclasses import dataclass
from typing import Any, Tuple

import numpy as np

from src.utils.errors import InvalidArgumentError, NumericalFailureError
from src.utils.logging import get_logger

logger = get_logger(__name__)

SINGULAR_CLAMP = 1e-6
VOLUME_TOLERANCE = 1e-12
VOLUME_MAX_ITERATIONS = 50


@dataclass(frozen=True)
class Plane:
    """Half-space boundary phi(p) = n.p - offset; phi >= 0 is outside the obstacle."""

    normal: np.ndarray
    offset: float = 0.0

    def __post_init__(self) -> None:
        normal = np.asarray(self.normal, dtype=float)
        norm = np.linalg.norm(normal)
        if normal.shape != (3,) or norm == 0.0:
            raise InvalidArgumentError("Plane normal must be a non-zero 3-vector")
        object.__setattr__(self, "normal", normal / norm)
        object.__setattr__(self, "offset", float(self.offset))

    def phi(self, points: np.ndarray) -> np.ndarray:
        """Signed distance of point(s) (..., 3)."""
        return np.asarray(points, dtype=float) @ self.normal - self.offset


def signed_svd(F: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """SVD with det(U Vh) = +1.

    The column of U paired with the smallest singular value (and that value)
    is negated when the plain SVD has det(U Vh) < 0.

    Returns:
        (U, s, Vh) with F = U diag(s) Vh
    """
    U, s, Vh = np.linalg.svd(np.asarray(F, dtype=float))
    sign = np.where(np.linalg.det(U) * np.linalg.det(Vh) < 0.0, -1.0, 1.0)
    U[..., :, 2] *= sign[..., None]
    s[..., 2] *= sign
    return U, s, Vh


def _compose(U: np.ndarray, diag: np.ndarray, Vh: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j,...jk->...ik", U, diag, Vh)


def project_corotated(F: np.ndarray) -> np.ndarray:
    """Closest rotation to F.

    Example:
        >>> project_corotated(np.diag([2.0, 0.5, 1.0]))
        array([[1., 0., 0.],
               [0., 1., 0.],
               [0., 0., 1.]])
    """
    U, _, Vh = signed_svd(F)
    return U @ Vh


def _volume_kkt(D: np.ndarray, lam: np.ndarray, d: np.ndarray):
    """Residual and Jacobian of the KKT system of min |d|^2 s.t. prod(D) = 1."""
    partial = np.stack([D[..., 1] * D[..., 2], D[..., 0] * D[..., 2], D[..., 0] * D[..., 1]], axis=-1)
    residual = np.concatenate(
        [d - lam[..., None] * partial, (D.prod(axis=-1) - 1.0)[..., None]], axis=-1
    )
    jac = np.zeros(D.shape[:-1] + (4, 4))
    for i in range(3):
        for k in range(3):
            if i == k:
                jac[..., i, k] = 1.0
            else:
                other = 3 - i - k
                jac[..., i, k] = -lam * D[..., other]
        jac[..., i, 3] = -partial[..., i]
        jac[..., 3, i] = partial[..., i]
    return residual, jac


def _solve_volume_singular_values(s: np.ndarray):
    """Solve the volume KKT system for each row of singular values.

    Returns:
        (D, lam, kkt_jacobian) at the solution
    """
    batch = np.shape(s)[:-1]
    s = np.asarray(s, dtype=float).reshape(-1, 3)
    prod = s.prod(axis=-1)
    if np.any(prod <= 0.0):
        raise NumericalFailureError("Volume projection requires positive singular values")
    D = s / np.cbrt(prod)[..., None]
    d = D - s
    partial = np.stack([D[..., 1] * D[..., 2], D[..., 0] * D[..., 2], D[..., 0] * D[..., 1]], axis=-1)
    lam = np.einsum("...i,...i->...", d, partial) / np.einsum("...i,...i->...", partial, partial)

    # Symmetric rows are solved by the starting point
    uniform = np.ptp(s, axis=-1) <= 1e-14 * np.abs(s).max(axis=-1)
    scale = 1.0 + np.linalg.norm(s, axis=-1)
    for iteration in range(VOLUME_MAX_ITERATIONS + 1):
        residual, jac = _volume_kkt(D, lam, d)
        err = np.linalg.norm(residual, axis=-1)
        done = uniform | (err <= VOLUME_TOLERANCE * scale)
        if np.all(done):
            return D.reshape(batch + (3,)), lam.reshape(batch), jac.reshape(batch + (4, 4))
        if iteration == VOLUME_MAX_ITERATIONS:
            break
        delta = np.linalg.solve(jac, -residual[..., None])[..., 0]
        delta[done] = 0.0
        d = d + delta[..., :3]
        lam = lam + delta[..., 3]
        D = s + d

    worst = float(np.max(np.where(done, 0.0, err)))
    raise NumericalFailureError(
        f"Volume projection did not converge in {VOLUME_MAX_ITERATIONS} iterations "
        f"(residual {worst:.3e})"
    )


def project_volume(F: np.ndarray) -> np.ndarray:
    """Closest unit-determinant matrix to F in singular-value space.

    Solves min |d|^2 subject to prod(sigma_i + d_i) = 1 by Newton iteration on
    the 4x4 KKT system in (d, lambda), starting from the unit-determinant
    rescaling sigma / cbrt(prod sigma). When the singular values agree to 1e-14
    relative, the symmetric reduction D = t(1, 1, 1), t^3 = 1 has its root at
    that starting point, so those elements take no Newton step.

    Raises:
        NumericalFailureError: If a singular value is not positive or Newton
            fails to converge
    """
    U, s, Vh = signed_svd(F)
    D, _, _ = _solve_volume_singular_values(s)
    return _compose(U, D, Vh)


def project_muscle(F: np.ndarray, m: np.ndarray, r: np.ndarray | float) -> np.ndarray:
    """Project the stretched fiber Fm onto the sphere of radius r.

    Falls back to r*m when |Fm| = 0.
    """
    m = np.asarray(m, dtype=float)
    q = np.einsum("...ij,...j->...i", np.asarray(F, dtype=float), m)
    return project_fiber(q, m, r)


def project_fiber(q: np.ndarray, m: np.ndarray, r: np.ndarray | float) -> np.ndarray:
    """Sphere projection of fiber vector(s) q (..., 3)."""
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    norm = np.asarray(np.linalg.norm(q, axis=-1))
    safe = np.where(norm > 0.0, norm, 1.0)
    direction = np.where((norm > 0.0)[..., None], q / safe[..., None], np.broadcast_to(m, q.shape))
    return r[..., None] * direction if r.ndim else float(r) * direction


def project_soft_collision(x_node: np.ndarray, plane: Plane) -> np.ndarray:
    """Project penetrating node position(s) back onto the plane."""
    x_node = np.asarray(x_node, dtype=float)
    depth = np.asarray(np.minimum(plane.phi(x_node), 0.0))
    return x_node - depth[..., None] * plane.normal


def _isotropic_jacobian(
    U: np.ndarray,
    s: np.ndarray,
    Vh: np.ndarray,
    g: np.ndarray,
    g_jac: np.ndarray,
) -> np.ndarray:
    """Jacobian of F -> U diag(g(s)) Vh for a symmetric spectral function g.

    In the rotated frame M = U^T dF V the derivative has diagonal
    K_pp = sum_r dg_p/ds_r M_rr and off-diagonal
    K_pq = a_pq sym(M)_pq + b_pq skew(M)_pq with
    a = (g_p - g_q)/(s_p - s_q), b = (g_p + g_q)/(s_p + s_q).
    """
    V = np.swapaxes(Vh, -1, -2)
    scale = np.abs(s).max(axis=-1)[..., None, None]
    floor = SINGULAR_CLAMP * np.maximum(scale, np.finfo(float).tiny)

    s_p, s_q = s[..., :, None], s[..., None, :]
    g_p, g_q = g[..., :, None], g[..., None, :]
    diff = s_p - s_q
    near = np.abs(diff) < floor
    diag_jac = np.diagonal(g_jac, axis1=-2, axis2=-1)
    a = np.where(
        near,
        diag_jac[..., :, None] - g_jac,
        (g_p - g_q) / np.where(near, 1.0, diff),
    )
    b = (g_p + g_q) / np.maximum(s_p + s_q, floor)

    batch = s.shape[:-1]
    C = np.zeros(batch + (3, 3, 3, 3))
    for p in range(3):
        for r in range(3):
            C[..., p, p, r, r] = g_jac[..., p, r]
        for q in range(3):
            if p == q:
                continue
            C[..., p, q, p, q] = 0.5 * (a[..., p, q] + b[..., p, q])
            C[..., p, q, q, p] = 0.5 * (a[..., p, q] - b[..., p, q])

    T = np.einsum("...pqrs,...kr,...ls->...pqkl", C, U, V, optimize=True)
    J = np.einsum("...ip,...jq,...pqkl->...ijkl", U, V, T, optimize=True)
    return J.reshape(batch + (9, 9))


def corotated_jacobian(F: np.ndarray) -> np.ndarray:
    """dR/dF as (..., 9, 9); sigma_i + sigma_j is clamped below at 1e-6 max(sigma)."""
    U, s, Vh = signed_svd(F)
    g = np.ones_like(s)
    return _isotropic_jacobian(U, s, Vh, g, np.zeros(s.shape + (3,)))


def volume_jacobian(F: np.ndarray) -> np.ndarray:
    """dD/dF as (..., 9, 9) from the differentiated KKT conditions."""
    U, s, Vh = signed_svd(F)
    D, _, kkt = _solve_volume_singular_values(s)
    # d(residual)/d(sigma) equals the d-columns of the KKT Jacobian minus the identity rows
    rhs = kkt[..., :, :3].copy()
    rhs[..., :3, :3] -= np.eye(3)
    sensitivity = -np.linalg.solve(kkt, rhs)
    g_jac = np.eye(3) + sensitivity[..., :3, :]
    return _isotropic_jacobian(U, s, Vh, D, g_jac)


def fiber_jacobian(q: np.ndarray, r: np.ndarray | float) -> np.ndarray:
    """dp/dq = (r/|q|)(I - q_hat q_hat^T) as (..., 3, 3); zero where |q| = 0."""
    q = np.asarray(q, dtype=float)
    r = np.asarray(r, dtype=float)
    norm = np.asarray(np.linalg.norm(q, axis=-1))
    safe = np.where(norm > 0.0, norm, 1.0)
    q_hat = q / safe[..., None]
    factor = np.where(norm > 0.0, r / safe, 0.0)
    eye = np.broadcast_to(np.eye(3), q.shape + (3,))
    return factor[..., None, None] * (eye - q_hat[..., :, None] * q_hat[..., None, :])


def muscle_jacobian(F: np.ndarray, m: np.ndarray, r: np.ndarray | float) -> np.ndarray:
    """dp/dF as (..., 3, 9)."""
    m = np.asarray(m, dtype=float)
    q = np.einsum("...ij,...j->...i", np.asarray(F, dtype=float), m)
    jq = fiber_jacobian(q, r)
    return np.einsum("...ik,...l->...ikl", jq, np.broadcast_to(m, q.shape)).reshape(q.shape[:-1] + (3, 9))


def soft_collision_jacobian(x_node: np.ndarray, plane: Plane) -> np.ndarray:
    """dz/dx as (..., 3, 3): tangent projector when penetrating, identity otherwise."""
    x_node = np.asarray(x_node, dtype=float)
    active = np.asarray(plane.phi(x_node) < 0.0)
    eye = np.broadcast_to(np.eye(3), x_node.shape + (3,)).copy()
    eye[active] -= np.outer(plane.normal, plane.normal)
    return eye


def projection_jacobian(kind: str, F: np.ndarray, aux: Any = None) -> np.ndarray:
    """Dispatch to the Jacobian of the named projection.

    Args:
        kind: corotated, volume, muscle or soft_collision
        F: Deformation gradient(s); node position(s) for soft_collision
        aux: (m, r) for muscle, Plane for soft_collision, unused otherwise

    Returns:
        np.ndarray: (..., 9, 9), (..., 3, 9) or (..., 3, 3)

    Raises:
        InvalidArgumentError: On an unknown kind or missing auxiliary data
    """
    if kind == "corotated":
        return corotated_jacobian(F)
    if kind == "volume":
        return volume_jacobian(F)
    if kind == "muscle":
        if aux is None:
            raise InvalidArgumentError("Muscle Jacobian needs (fiber, radius)")
        m, r = aux
        return muscle_jacobian(F, m, r)
    if kind == "soft_collision":
        if not isinstance(aux, Plane):
            raise InvalidArgumentError("Soft-collision Jacobian needs a Plane")
        return soft_collision_jacobian(F, aux)
    raise InvalidArgumentError(f"Unknown projection kind: {kind}")
