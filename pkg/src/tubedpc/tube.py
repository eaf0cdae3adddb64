"""Online robust-tube construction around nominal rollouts.

Per batch: linearize the learned dynamics along every trajectory point,
pool the Jacobians into conservative constant matrices (sign-preserving
entrywise max magnitude), solve the discrete algebraic Riccati equation by
fixed-point iteration, derive the auxiliary feedback gain and the one-step
error contraction rate, and turn the rate into a per-step constraint
tightening schedule with symmetrically shrunk boxes. Also computes the
disturbance-admissibility bounds and numerically verifies the contraction
certificate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from . import models as md
from .closedloop import ConstraintBox


class DareError(RuntimeError):
    """Fixed-point iteration failed: local dynamics look non-stabilizable."""


class CertificateError(RuntimeError):
    """A certificate validity condition failed for this batch."""


@dataclass
class TubeCertificate:
    """Everything the tightening and the admissibility analysis need."""

    P: np.ndarray
    K: np.ndarray
    rho: float
    c_lower: float       # lambda_min(P)
    c_upper: float       # lambda_max(P)
    k_max: float         # induced infinity norm of K
    delta_loc: float
    w1_hat: float
    w2_hat: float
    w3_hat: float
    w_bound: float
    admissible: bool

    def to_dict(self):
        return {
            "P": self.P.tolist(), "K": self.K.tolist(), "rho": self.rho,
            "c_lower": self.c_lower, "c_upper": self.c_upper, "k_max": self.k_max,
            "delta_loc": self.delta_loc, "w1_hat": self.w1_hat,
            "w2_hat": self.w2_hat, "w3_hat": self.w3_hat,
            "w_bound": self.w_bound, "admissible": self.admissible,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)


@dataclass
class TighteningSchedule:
    """Per-step tube widths eps_k = eps * (1 - sqrt(rho)^k) / (1 - sqrt(rho))."""

    base_eps: float
    rho: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)

    @property
    def supremum(self):
        return self.base_eps / (1.0 - np.sqrt(self.rho))

    def value_at(self, k):
        r = np.sqrt(self.rho)
        return self.base_eps * (1.0 - r ** np.asarray(k, dtype=np.float64)) / (1.0 - r)

    def window(self, k, n):
        """eps_k .. eps_{k+n-1}, continuing the closed form past the horizon."""
        return self.value_at(np.arange(k, k + n))


@dataclass
class TightenedBounds:
    """Per-step boxes obtained by shrinking the original box by eps_k * half-width."""

    x_low: np.ndarray   # (N, n_x)
    x_high: np.ndarray
    u_low: np.ndarray   # (N, n_u)
    u_high: np.ndarray
    r_x: np.ndarray
    r_u: np.ndarray

    def step_boxes(self):
        return [ConstraintBox(self.x_low[k], self.x_high[k], self.u_low[k], self.u_high[k])
                for k in range(self.x_low.shape[0])]


# ---------------------------------------------------------------------------
# Jacobians
# ---------------------------------------------------------------------------

def _conservative_reduce(stack):
    idx = np.argmax(np.abs(stack), axis=0)
    return np.take_along_axis(stack, idx[None, ...], axis=0)[0]


def conservative_bound(jacobians):
    """Entrywise max-magnitude over a batch of equal-shape matrices, keeping
    the sign of the selected entry."""
    mats = [np.asarray(j, dtype=np.float64) for j in jacobians]
    if not mats:
        raise ValueError("empty Jacobian batch")
    if any(m.shape != mats[0].shape for m in mats):
        raise ValueError("Jacobian shapes differ")
    return _conservative_reduce(np.stack(mats, axis=0))


def point_jacobians(dynamics, x_points, u_points, d_points, chunk=256):
    """State and input Jacobians of the constrained-output block of the
    dynamics at many points at once.

    Returns (A (M, n_x, n_x), B (M, n_x, n_u)); batched seeded backward
    passes, one per output row, chunked to bound memory. `dynamics` is a
    DynamicsParams or a callable (x, u, d) -> output tensor.
    """
    x_points = np.atleast_2d(np.asarray(x_points, dtype=np.float64))
    u_points = np.atleast_2d(np.asarray(u_points, dtype=np.float64))
    d_points = np.atleast_2d(np.asarray(d_points, dtype=np.float64))
    m = x_points.shape[0]
    n_x, n_u = x_points.shape[1], u_points.shape[1]
    is_params = isinstance(dynamics, md.DynamicsParams)
    a_out = np.empty((m, n_x, n_x))
    b_out = np.empty((m, n_x, n_u))
    for lo in range(0, m, chunk):
        hi = min(lo + chunk, m)
        tape = de.Tape()
        x = tape.leaf(x_points[lo:hi])
        u = tape.leaf(u_points[lo:hi])
        d = tape.constant(d_points[lo:hi])
        if is_params:
            out = md.dynamics_forward(x, u, d, dynamics, tape=tape,
                                      binding=md.bind(md.dynamics_arrays(dynamics), tape))
        else:
            out = dynamics(x, u, d)
        for r in range(n_x):
            seed = np.zeros(out.shape)
            seed[:, r] = 1.0
            grads = tape.backward_seeded(out, seed)
            a_out[lo:hi, r, :] = grads[x.node_id]
            b_out[lo:hi, r, :] = grads[u.node_id]
    if not (np.all(np.isfinite(a_out)) and np.all(np.isfinite(b_out))):
        raise ValueError("non-finite Jacobian entries")
    return a_out, b_out


def batch_jacobians(dynamics, trajectories):
    """One conservative (A, B) pair per trajectory in the batch.

    Linearizes at every step of every trajectory, then pools each
    trajectory's step Jacobians with the sign-preserving max-magnitude rule.
    """
    if not trajectories:
        raise ValueError("no trajectories to linearize")
    xs, us, ds, counts = [], [], [], []
    for traj in trajectories:
        s, a, d = traj.states_array(), traj.actions_array(), traj.aux_array()
        b, n = s.shape[0], s.shape[1]
        xs.append(s.reshape(b * n, -1))
        us.append(a.reshape(b * n, -1))
        ds.append(d.reshape(b * n, -1))
        counts.extend([n] * b)
    a_pts, b_pts = point_jacobians(dynamics, np.concatenate(xs), np.concatenate(us), np.concatenate(ds))
    a_list, b_list = [], []
    start = 0
    for n in counts:
        a_list.append(_conservative_reduce(a_pts[start:start + n]))
        b_list.append(_conservative_reduce(b_pts[start:start + n]))
        start += n
    return a_list, b_list


# ---------------------------------------------------------------------------
# Riccati machinery
# ---------------------------------------------------------------------------

def dare_residual(a, b, q, r, p):
    """Max-norm fixed-point residual of a candidate DARE solution."""
    btpb = b.T @ p @ b + r
    res = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(btpb, b.T @ p @ a) + q - p
    return float(np.max(np.abs(res)))


def solve_dare(a, b, q, r, tol=1e-13, max_iter=10000):
    """Fixed-point iteration P <- A'PA - A'PB (B'PB+R)^-1 B'PA + Q from P0=Q.

    Converges for stabilizable (A, B) with Q > 0; symmetrized every sweep.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    p = q.copy()
    for _ in range(max_iter):
        btpb = b.T @ p @ b + r
        nxt = a.T @ p @ a - a.T @ p @ b @ np.linalg.solve(btpb, b.T @ p @ a) + q
        nxt = (nxt + nxt.T) / 2.0
        delta = np.max(np.abs(nxt - p))
        p = nxt
        if delta <= tol:
            break
    else:
        raise DareError(f"no convergence in {max_iter} iterations (last delta {delta:.3e})")
    if not np.all(np.isfinite(p)):
        raise DareError("iteration produced non-finite values")
    if np.min(np.linalg.eigvalsh(p)) <= 0:
        raise DareError("solution is not positive definite")
    return p


def feedback_gain(a, b, p, r):
    """K = -(B'PB + R)^-1 B'PA."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    inner = b.T @ p @ b + r
    if abs(np.linalg.det(inner)) < 1e-300:
        raise np.linalg.LinAlgError("B'PB + R is singular")
    return -np.linalg.solve(inner, b.T @ p @ a)


def _inv_sqrt_pd(p):
    w, v = np.linalg.eigh(p)
    if np.min(w) <= 0:
        raise CertificateError("P is not positive definite")
    return v @ np.diag(1.0 / np.sqrt(w)) @ v.T


def contraction_rate(p, k, q, r):
    """rho = 1 - lambda_min(P^-1/2 (Q + K'RK) P^-1/2); must lie in (0, 1)."""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    k = np.atleast_2d(np.asarray(k, dtype=np.float64))
    q = np.atleast_2d(np.asarray(q, dtype=np.float64))
    r = np.atleast_2d(np.asarray(r, dtype=np.float64))
    p_is = _inv_sqrt_pd(p)
    m = p_is @ (q + k.T @ r @ k) @ p_is
    rho = 1.0 - float(np.min(np.linalg.eigvalsh((m + m.T) / 2.0)))
    if not 0.0 < rho < 1.0:
        raise CertificateError(f"contraction rate {rho:.6g} outside (0, 1)")
    return rho


def tightening_schedule(eps, rho, n):
    """Closed-form widths for k = 0..n-1; zero at k=0, bounded by eps/(1-sqrt(rho))."""
    if eps <= 0:
        raise ValueError("base width eps must be positive")
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    if n < 1:
        raise ValueError("horizon must be >= 1")
    root = np.sqrt(rho)
    ks = np.arange(n, dtype=np.float64)
    values = eps * (1.0 - root ** ks) / (1.0 - root)
    return TighteningSchedule(base_eps=float(eps), rho=float(rho), values=values)


def tightened_sets(box, schedule):
    """X_k = [x_l + eps_k r_x, x_h - eps_k r_x]; same for U_k with r_u."""
    eps = schedule.values if isinstance(schedule, TighteningSchedule) else np.asarray(schedule, dtype=np.float64)
    if np.any(eps >= 1.0):
        raise ValueError("eps_k >= 1 empties a box; base width too large for this geometry")
    r_x, r_u = box.r_x, box.r_u
    e = eps[:, None]
    return TightenedBounds(
        x_low=box.x_low + e * r_x, x_high=box.x_high - e * r_x,
        u_low=box.u_low + e * r_u, u_high=box.u_high - e * r_u,
        r_x=r_x, r_u=r_u)


def disturbance_bounds(c_lower, c_upper, k_max, eps, box, w_bound):
    """(delta_loc, w1^, w2^, w3^, admissible) for a disturbance of size w_bound.

    delta_loc = c_upper * w_bound^2, so w1^ always equals w_bound exactly.
    """
    delta_loc = c_upper * w_bound ** 2
    w1 = float(np.sqrt(delta_loc / c_upper))
    ratio = float(np.sqrt(c_lower / c_upper))
    w2 = ratio * eps * float(np.min(box.r_x))
    w3 = np.inf if k_max == 0 else ratio * eps * float(np.min(box.r_u)) / k_max
    admissible = bool(w_bound <= min(w1, w2, w3))
    return delta_loc, w1, w2, w3, admissible


def verify_contraction(a, b, k, p, rho, samples, tol=1e-9):
    """Max observed V(e+)/V(e) over sampled errors, e+ = (A + BK) e.

    Raises if any sample breaks V(e+) <= rho V(e) + tol.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    k = np.atleast_2d(np.asarray(k, dtype=np.float64))
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    cl = a + b @ k
    worst = 0.0
    for e in samples:
        v = float(e @ p @ e)
        if v == 0.0:
            continue
        e_next = cl @ e
        v_next = float(e_next @ p @ e_next)
        if v_next > rho * v + tol:
            raise CertificateError(
                f"contraction violated: V(e+)={v_next:.6g} > rho*V(e)+tol={rho * v + tol:.6g}")
        worst = max(worst, v_next / v)
    return worst


def lyapunov_margin(a, b, k, p, q, r):
    """lambda_max of (A+BK)'P(A+BK) - P + Q + K'RK; <= 0 is the exact
    Riccati decrease inequality, small positive values are solver residual."""
    cl = a + b @ k
    m = cl.T @ p @ cl - p + q + k.T @ r @ k
    return float(np.max(np.linalg.eigvalsh((m + m.T) / 2.0)))


def k_inf_norm(k):
    """Induced infinity norm (max absolute row sum)."""
    return float(np.max(np.sum(np.abs(np.atleast_2d(k)), axis=1)))


def build_certificate(a_max, b_max, q, r, eps, box, w_bound, n_steps,
                      n_check_samples=1000, rng=None):
    """DARE -> gain -> rate -> schedule -> bounds, with validity checks.

    Raises DareError / CertificateError when this batch's conservative
    dynamics do not admit a valid tube; callers keep the previous one.
    """
    p = solve_dare(a_max, b_max, q, r)
    k = feedback_gain(a_max, b_max, p, r)
    rho = contraction_rate(p, k, q, r)
    eigs = np.linalg.eigvalsh(p)
    c_lower, c_upper = float(eigs[0]), float(eigs[-1])
    k_max = k_inf_norm(k)
    schedule = tightening_schedule(eps, rho, n_steps)
    if schedule.supremum >= 1.0:
        raise CertificateError(
            f"schedule supremum {schedule.supremum:.4f} >= 1 would empty the boxes")
    delta_loc, w1, w2, w3, admissible = disturbance_bounds(c_lower, c_upper, k_max, eps, box, w_bound)
    if rng is not None and n_check_samples > 0:
        n_x = p.shape[0]
        errs = rng.normal(size=(n_check_samples, n_x))
        errs /= np.linalg.norm(errs, axis=1, keepdims=True)
        verify_contraction(a_max, b_max, k, p, rho, errs)
    cert = TubeCertificate(P=p, K=k, rho=rho, c_lower=c_lower, c_upper=c_upper,
                           k_max=k_max, delta_loc=delta_loc, w1_hat=w1, w2_hat=w2,
                           w3_hat=w3, w_bound=w_bound, admissible=admissible)
    return cert, schedule
