"""Differentiable closed-loop rollout over the prediction horizon and the
three loss components (identification, constraint, objective) plus their
weighted composite.

A rollout chains policy and dynamics on one tape so a single backward pass
reaches both parameter sets. States carry °C directly; constraint penalties
are squared-ReLU box violations; the objective prices the predicted
total-energy channel against the tariff window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffengine as de
from . import models as md


class RolloutDivergence(ValueError):
    """A state went non-finite during unrolling."""


@dataclass
class ConstraintBox:
    """Axis-aligned state and input bounds (closed sets)."""

    x_low: np.ndarray
    x_high: np.ndarray
    u_low: np.ndarray
    u_high: np.ndarray

    def __post_init__(self):
        self.x_low = np.asarray(self.x_low, dtype=np.float64)
        self.x_high = np.asarray(self.x_high, dtype=np.float64)
        self.u_low = np.asarray(self.u_low, dtype=np.float64)
        self.u_high = np.asarray(self.u_high, dtype=np.float64)
        if not (np.all(self.x_low < self.x_high) and np.all(self.u_low < self.u_high)):
            raise ValueError("box bounds must satisfy low < high elementwise")

    @property
    def r_x(self):
        return (self.x_high - self.x_low) / 2.0

    @property
    def r_u(self):
        return (self.u_high - self.u_low) / 2.0


def comfort_box(n_x=8, n_u=4, x_bounds=(19.0, 24.0), u_bounds=(16.0, 26.0)):
    """The case-study box: comfort band on zones, setpoint range on inputs."""
    return ConstraintBox(np.full(n_x, x_bounds[0]), np.full(n_x, x_bounds[1]),
                         np.full(n_u, u_bounds[0]), np.full(n_u, u_bounds[1]))


@dataclass
class Trajectory:
    """One rolled-out batch: per-step state/action/aux tensors plus prices.

    states[k] is x-hat_k for k = 0..N-1 (x-hat_0 equals the supplied initial
    condition); the extra x-hat_N lands in final_state and enters no loss.
    aux[k] is the auxiliary triple the dynamics consumed at step k (measured
    at k=0, the previous step's prediction afterwards).
    """

    states: list
    actions: list
    aux: list
    prices: np.ndarray
    final_state: object

    @property
    def horizon(self):
        return len(self.states)

    @property
    def batch_size(self):
        return de.value_of(self.states[0]).shape[0]

    def states_array(self):
        return np.stack([de.value_of(s) for s in self.states], axis=1)

    def actions_array(self):
        return np.stack([de.value_of(a) for a in self.actions], axis=1)

    def aux_array(self):
        return np.stack([de.value_of(d) for d in self.aux], axis=1)


@dataclass
class ScenarioBatch:
    """Sampled rollout inputs: initial outputs and tariff windows."""

    x0: np.ndarray      # (B, n_x)
    d0: np.ndarray      # (B, n_d)
    prices: np.ndarray  # (B, >= 2N-1) forward-looking price windows

    @property
    def batch_size(self):
        return self.x0.shape[0]


def sample_scenarios(rng, batch_size, n_steps, box, price_window_fn,
                     aux_low, aux_high, steps_per_day=96):
    """Draw initial states uniformly inside the box, auxiliaries uniformly in
    their configured ranges, and price windows from random times of day."""
    x0 = rng.uniform(box.x_low, box.x_high, size=(batch_size, box.x_low.size))
    aux_low = np.asarray(aux_low, dtype=np.float64)
    aux_high = np.asarray(aux_high, dtype=np.float64)
    d0 = rng.uniform(aux_low, aux_high, size=(batch_size, aux_low.size))
    width = 2 * n_steps - 1
    prices = np.empty((batch_size, width))
    starts = rng.integers(0, steps_per_day, size=batch_size)
    for i, s in enumerate(starts):
        prices[i] = price_window_fn(int(s), width)
    return ScenarioBatch(x0=x0, d0=d0, prices=prices)


def _price_window(prices, k, n):
    """(B, n) slice starting at column k, clamping past the end."""
    idx = np.minimum(np.arange(k, k + n), prices.shape[1] - 1)
    return prices[:, idx]


def _tightening_window(tightening, k, n):
    if tightening is None:
        return None
    if hasattr(tightening, "window"):
        return np.asarray(tightening.window(k, n), dtype=np.float64)
    arr = np.asarray(tightening, dtype=np.float64)
    idx = np.minimum(np.arange(k, k + n), arr.size - 1)
    return arr[idx]


def rollout(x0, d0, prices, dynamics, policy, n_steps, tightening=None, tape=None):
    """Unroll the closed loop for n_steps on one tape.

    dynamics/policy are parameter dataclasses, or plain callables for toy
    systems: dynamics(x, u, d) -> next output tensor, policy(inp) -> action.
    The tightening sequence, when given, is appended to every policy input
    (sliding window, closed-form continuation past the horizon).
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    d0 = np.atleast_2d(np.asarray(d0, dtype=np.float64))
    prices = np.atleast_2d(np.asarray(prices, dtype=np.float64))
    batch = x0.shape[0]

    dyn_callable = callable(dynamics) and not isinstance(dynamics, md.DynamicsParams)
    pol_callable = callable(policy) and not isinstance(policy, md.PolicyParams)
    dyn_binding = None if (dyn_callable or tape is None) else md.bind(md.dynamics_arrays(dynamics), tape)
    pol_binding = None if (pol_callable or tape is None) else md.bind(md.policy_arrays(policy), tape)

    def wrap_const(arr):
        return tape.constant(arr) if tape is not None else de.Tensor(np.asarray(arr, dtype=np.float64))

    x = wrap_const(x0)
    d = wrap_const(d0)
    states, actions, aux = [], [], []
    n_x = x0.shape[1]
    try:
        for k in range(n_steps):
            win = _price_window(prices, k, n_steps)
            eps = _tightening_window(tightening, k, n_steps)
            inp = md.PolicyInput(
                state=de.concat([x, d]),
                prices=wrap_const(win),
                tightening=None if eps is None else wrap_const(np.tile(eps, (batch, 1))))
            if pol_callable:
                u = policy(inp)
            else:
                u = md.policy_forward(inp, policy, binding=pol_binding)
            if dyn_callable:
                out = dynamics(x, u, d)
            else:
                out = md.dynamics_forward(x, u, d, dynamics, binding=dyn_binding)
            states.append(x)
            actions.append(u)
            aux.append(d)
            x = out.slice(0, n_x)
            d = out.slice(n_x, out.shape[-1])
    except ValueError as err:
        raise RolloutDivergence(f"rollout diverged at step {k}: {err}") from err
    return Trajectory(states=states, actions=actions, aux=aux,
                      prices=prices[:, :n_steps], final_state=x)


# ---------------------------------------------------------------------------
# losses (tensor in, tensor out; plain arrays work too)
# ---------------------------------------------------------------------------

def identification_loss(x, u, d, target, dynamics, tape=None, binding=None):
    """Mean squared 2-norm of the one-step prediction error over a batch."""
    if not isinstance(x, de.Tensor):
        x, u, d = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (x, u, d))
    batch = np.atleast_2d(de.value_of(x)).shape[0]
    if batch < 1:
        raise ValueError("identification batch must be nonempty")
    pred = md.dynamics_forward(x, u, d, dynamics, tape=tape, binding=binding)
    tgt = np.atleast_2d(np.asarray(target, dtype=np.float64))
    return de.scale(de.reduce_sum(de.square(de.sub(pred, tgt))), 1.0 / batch)


def _per_step_boxes(bounds, n_steps):
    if isinstance(bounds, ConstraintBox):
        return [bounds] * n_steps
    bounds = list(bounds)
    if len(bounds) != n_steps:
        raise ValueError(f"need {n_steps} per-step boxes, got {len(bounds)}")
    return bounds


def constraint_loss(traj, bounds):
    """Squared-ReLU box penalty averaged over batch and horizon."""
    n = traj.horizon
    boxes = _per_step_boxes(bounds, n)
    batch = traj.batch_size
    total = None
    for k in range(n):
        box = boxes[k]
        xk, uk = traj.states[k], traj.actions[k]
        term = de.reduce_sum(de.square(de.relu(de.sub(xk, box.x_high))))
        term = de.add(term, de.reduce_sum(de.square(de.relu(de.sub(box.x_low, xk)))))
        term = de.add(term, de.reduce_sum(de.square(de.relu(de.sub(uk, box.u_high)))))
        term = de.add(term, de.reduce_sum(de.square(de.relu(de.sub(box.u_low, uk)))))
        total = term if total is None else de.add(total, term)
    return de.scale(total, 1.0 / (batch * n))


def objective_loss(traj):
    """Batch-mean cumulative priced energy: sum_k tau_k * E_hat_k."""
    if traj.prices is None:
        raise ValueError("trajectory carries no prices")
    batch = traj.batch_size
    total = None
    for k in range(traj.horizon):
        dk = traj.aux[k]
        e_k = dk.slice(0, 1) if isinstance(dk, de.Tensor) else de.Tensor(np.atleast_2d(dk)[:, :1])
        tau_k = traj.prices[:, k].reshape(-1, 1)
        term = de.reduce_sum(de.mul(e_k, tau_k))
        total = term if total is None else de.add(total, term)
    return de.scale(total, 1.0 / batch)


def composite_loss(l_id, l_cons, l_obj, lam_id, lam_cons, lam_obj):
    """Weighted sum of the three components."""
    if min(lam_id, lam_cons, lam_obj) < 0:
        raise ValueError("loss weights must be >= 0")
    terms = [de.scale(l if isinstance(l, de.Tensor) else de.Tensor(np.asarray(l, dtype=np.float64)), lam)
             for l, lam in ((l_id, lam_id), (l_cons, lam_cons), (l_obj, lam_obj))]
    return de.add(de.add(terms[0], terms[1]), terms[2])
