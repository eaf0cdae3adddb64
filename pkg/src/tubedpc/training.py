"""Two-stage training of the dynamics model and control policy.

Stage 1 warm-starts the dynamics model on identification data until
validation stalls. Stage 2 runs joint epochs: closed-loop rollouts, the
constraint/objective losses, PCGrad surgery between the identification
gradient and the control gradient on the shared model parameters, and a
rising coupling curriculum. The guaranteed variant additionally rebuilds
the tube certificate from batch Jacobians before every batch and feeds the
tightening sequence to the policy and the constraint penalty.

Three controller variants share this machinery:
  dpc-c  -- model pre-trained alone (MSE + constraint penalty), then frozen
            while the policy trains against it;
  e2e    -- joint training, no tightening;
  e2e-g  -- joint training with online tightening.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import closedloop as cl
from . import diffengine as de
from . import models as md
from . import plant as pl
from . import tube


class Adam:
    """Adaptive moment estimation over named parameter arrays, in place."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, named_params, named_grads):
        self.t += 1
        for k, p in named_params.items():
            g = named_grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1 ** self.t)
            v_hat = self.v[k] / (1 - self.beta2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def pcgrad_project(g_dpc, g_id, eps_num=1e-12):
    """Remove the component of g_dpc that opposes g_id.

    g~ = g_dpc - min(0, <g_dpc, g_id>) / (||g_id||^2 + eps_num) * g_id
    """
    g_dpc = np.asarray(g_dpc, dtype=np.float64)
    g_id = np.asarray(g_id, dtype=np.float64)
    if g_dpc.shape != g_id.shape:
        raise ValueError("gradient vectors must have equal length")
    inner = float(g_dpc @ g_id)
    if inner >= 0.0:
        return g_dpc.copy()
    return g_dpc - inner / (float(g_id @ g_id) + eps_num) * g_id


def combine_model_gradient(g_id, g_proj, beta):
    """g_f = g_id + beta * g~."""
    g_id = np.asarray(g_id, dtype=np.float64)
    g_proj = np.asarray(g_proj, dtype=np.float64)
    if g_id.shape != g_proj.shape:
        raise ValueError("gradient vectors must have equal length")
    return g_id + beta * g_proj


def beta_step(levels, current_idx, history, patience):
    """Advance one curriculum level when validation has improved over the
    last `patience` epochs; never retreats, saturates at the top level."""
    if current_idx >= len(levels) - 1:
        return len(levels) - 1
    if len(history) >= patience + 1 and history[-1] < history[-1 - patience]:
        return current_idx + 1
    return current_idx


@dataclass
class TrainConfig:
    lam_id: float = 0.1
    lam_cons: float = 10.0
    lam_obj: float = 0.075
    lr_model: float = 1e-4
    lr_policy: float = 5e-3
    batch_size: int = 256
    warm_start_patience: int = 10
    warm_start_tol: float = 0.01
    beta_levels: tuple = (0.1, 0.5, 1.0)
    horizon: int = 8
    q_weight: float = 10.0
    r_weight: float = 1.0
    base_eps: float = 0.08
    warm_start_max_epochs: int = 120
    warm_start_lr: float = 1e-3
    joint_epochs: int = 30
    batches_per_epoch: int = 8
    val_fraction: float = 0.2
    w_bound_inflation: float = 1.25
    policy_hidden: tuple = (64, 64)
    policy_out_bias: float = None  # None: midpoint of the input box
    d_model: int = 32
    n_blocks: int = 2
    n_heads: int = 2
    d_ff: int = 64
    x_bounds: tuple = (19.0, 24.0)
    u_bounds: tuple = (16.0, 26.0)
    aux_low: tuple = (0.0, 0.0, 25.0)
    aux_high: tuple = (3.5, 1.0, 45.0)
    # training scenarios start from a widened state range so the policy
    # learns recovery behavior outside the comfort band (deployment will
    # visit such states; certification still samples the original box)
    x0_margin_low: float = 0.8
    x0_margin_high: float = 0.3

    def __post_init__(self):
        if min(self.lam_id, self.lam_cons, self.lam_obj) < 0:
            raise ValueError("loss weights must be >= 0")
        if min(self.lr_model, self.lr_policy, self.warm_start_lr) <= 0:
            raise ValueError("learning rates must be positive")
        if self.warm_start_patience < 1:
            raise ValueError("patience must be >= 1")
        if tuple(self.beta_levels) != tuple(sorted(self.beta_levels)):
            raise ValueError("beta levels must be ascending")

    def box(self, n_x, n_u):
        return cl.comfort_box(n_x, n_u, self.x_bounds, self.u_bounds)

    def sampling_box(self, n_x, n_u):
        return cl.comfort_box(
            n_x, n_u,
            (self.x_bounds[0] - self.x0_margin_low, self.x_bounds[1] + self.x0_margin_high),
            self.u_bounds)

    def to_dict(self):
        d = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            d[k] = list(v) if isinstance(v, tuple) else v
        return d

    @classmethod
    def from_dict(cls, d):
        kwargs = {}
        for k, f_ in cls.__dataclass_fields__.items():
            if k in d:
                v = d[k]
                kwargs[k] = tuple(v) if isinstance(f_.default, tuple) else v
        return cls(**kwargs)


VARIANTS = ("dpc-c", "e2e", "e2e-g")


def policy_input_dim(config, n_x, n_d, guaranteed):
    return n_x + n_d + config.horizon + (config.horizon if guaranteed else 0)


def make_scalers(config, n_x, n_d, n_u, guaranteed):
    """Fixed standardization constants from the configured physical ranges."""
    t_c, t_h = 21.0, 7.0
    aux_lo = np.asarray(config.aux_low, dtype=np.float64)
    aux_hi = np.asarray(config.aux_high, dtype=np.float64)
    aux_c = (aux_lo + aux_hi) / 2.0
    aux_h = np.maximum((aux_hi - aux_lo) / 2.0, 1e-3)
    sp_c, sp_h = (config.u_bounds[0] + config.u_bounds[1]) / 2.0, \
        (config.u_bounds[1] - config.u_bounds[0]) / 2.0
    dyn_center = np.concatenate([np.full(n_x, t_c), aux_c[:n_d], np.full(n_u, sp_c)])
    dyn_half = np.concatenate([np.full(n_x, t_h), aux_h[:n_d], np.full(n_u, sp_h)])
    n = config.horizon
    pol_center = np.concatenate([np.full(n_x, t_c), aux_c[:n_d], np.full(n, 0.4)])
    pol_half = np.concatenate([np.full(n_x, t_h), aux_h[:n_d], np.full(n, 0.25)])
    if guaranteed:
        pol_center = np.concatenate([pol_center, np.full(n, 0.1)])
        pol_half = np.concatenate([pol_half, np.full(n, 0.1)])
    return (md.FeatureScaler(dyn_center, dyn_half),
            md.FeatureScaler(pol_center, pol_half))


@dataclass
class IdentData:
    """Identification transitions split into train and validation."""

    x_train: np.ndarray
    u_train: np.ndarray
    d_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    u_val: np.ndarray
    d_val: np.ndarray
    y_val: np.ndarray

    @property
    def n_train(self):
        return self.x_train.shape[0]

    def train_batch(self, rng, size):
        idx = rng.integers(0, self.n_train, size=size)
        return self.x_train[idx], self.u_train[idx], self.d_train[idx], self.y_train[idx]


def split_dataset(dataset, n_zones, val_fraction, rng):
    x, u, d, y = pl.transitions(dataset, n_zones)
    n = x.shape[0]
    if n < 2:
        raise ValueError("dataset too small to split")
    perm = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    vi, ti = perm[:n_val], perm[n_val:]
    return IdentData(x[ti], u[ti], d[ti], y[ti], x[vi], u[vi], d[vi], y[vi])


def eval_id_loss(dynamics, x, u, d, y):
    pred = md.dynamics_forward(x, u, d, dynamics)
    return float(np.mean(np.sum((pred - y) ** 2, axis=1)))


def estimate_w_bound(dynamics, data, inflation=1.25):
    """Max 2-norm one-step temperature residual on validation, inflated."""
    pred = md.dynamics_forward(data.x_val, data.u_val, data.d_val, dynamics)
    n_x = data.x_val.shape[1]
    res = np.linalg.norm(pred[:, :n_x] - data.y_val[:, :n_x], axis=1)
    return float(np.max(res)) * inflation


def _id_step(dynamics, named, opt, batch, penalty_weight=0.0, box=None):
    """One identification update; optional squared-ReLU penalty on the
    predicted temperatures (used by the dpc-c pre-training stage)."""
    x, u, d, y = batch
    tape = de.Tape()
    binding = md.bind(named, tape)
    loss = cl.identification_loss(x, u, d, y, dynamics, tape=tape, binding=binding)
    if penalty_weight > 0.0:
        pred = md.dynamics_forward(x, u, d, dynamics, tape=tape, binding=binding)
        temps = pred.slice(0, box.x_low.size)
        pen = de.add(de.reduce_sum(de.square(de.relu(de.sub(temps, box.x_high)))),
                     de.reduce_sum(de.square(de.relu(de.sub(box.x_low, temps)))))
        loss = de.add(loss, de.scale(pen, penalty_weight / x.shape[0]))
    grads = tape.backward(loss)
    opt.step(named, {k: grads[binding[k].node_id] for k in named})
    return float(loss.value)


def warm_start(dynamics, data, patience, tolerance, lr, batch_size, rng,
               max_epochs=120, penalty_weight=0.0, box=None, records=None):
    """Train the dynamics model alone until validation stalls.

    Stops when validation loss has not improved by more than `tolerance`
    for `patience` consecutive epochs; the best-validation parameters are
    restored into `dynamics` before returning. Returns the epoch history.
    """
    if data.n_train < 1:
        raise ValueError("empty identification dataset")
    named = md.dynamics_arrays(dynamics)
    opt = Adam(lr=lr)
    batches = max(1, data.n_train // batch_size)
    best_val = eval_id_loss(dynamics, data.x_val, data.u_val, data.d_val, data.y_val)
    best = {k: v.copy() for k, v in named.items()}
    stall = 0
    history = [best_val]
    for epoch in range(max_epochs):
        for _ in range(batches):
            _id_step(dynamics, named, opt, data.train_batch(rng, batch_size),
                     penalty_weight=penalty_weight, box=box)
        val = eval_id_loss(dynamics, data.x_val, data.u_val, data.d_val, data.y_val)
        history.append(val)
        if records is not None:
            records.append({"stage": "warm_start", "epoch": epoch, "val_id": val})
        if val < best_val - tolerance:
            best_val = val
            best = {k: v.copy() for k, v in named.items()}
            stall = 0
        else:
            stall += 1
            if stall >= patience:
                break
    for k in named:
        named[k][...] = best[k]
    return history


@dataclass
class TrainState:
    policy: md.PolicyParams
    dynamics: md.DynamicsParams
    opt_policy: Adam
    opt_model: Adam
    config: TrainConfig
    box: cl.ConstraintBox
    sample_box: cl.ConstraintBox
    rng: np.random.Generator
    beta_idx: int = 0
    epoch: int = 0
    schedule: object = None           # TighteningSchedule or zero array
    certificate: object = None
    w_bound_estimate: float = 0.0
    events: list = field(default_factory=list)
    val_history: list = field(default_factory=list)

    @property
    def beta(self):
        return self.config.beta_levels[self.beta_idx]


def _rollout_losses(state, scen, tightening, tape=None):
    cfg = state.config
    traj = cl.rollout(scen.x0, scen.d0, scen.prices, state.dynamics, state.policy,
                      cfg.horizon, tightening=tightening, tape=tape)
    if tightening is None or isinstance(tightening, np.ndarray):
        boxes = state.box
    else:
        boxes = tube.tightened_sets(state.box, tightening).step_boxes()
    l_cons = cl.constraint_loss(traj, boxes)
    l_obj = cl.objective_loss(traj)
    return traj, l_cons, l_obj


def _rebuild_certificate(state, scen):
    """Nominal untaped rollout -> Jacobians -> conservative bounds -> tube."""
    cfg = state.config
    try:
        traj, _, _ = _rollout_losses(state, scen, state.schedule)
        a_list, b_list = tube.batch_jacobians(state.dynamics, [traj])
        a_max = tube.conservative_bound(a_list)
        b_max = tube.conservative_bound(b_list)
        n_x = a_max.shape[0]
        cert, sched = tube.build_certificate(
            a_max, b_max, cfg.q_weight * np.eye(n_x), cfg.r_weight * np.eye(b_max.shape[1]),
            eps=cfg.base_eps, box=state.box, w_bound=state.w_bound_estimate,
            n_steps=cfg.horizon)
        state.certificate = cert
        state.schedule = sched
    except (tube.DareError, tube.CertificateError, cl.RolloutDivergence) as err:
        state.events.append({"epoch": state.epoch, "type": "certificate_reused",
                             "reason": str(err)})


def joint_epoch(state, data, config, tightening="none", price_window_fn=None,
                update_model=True, use_id=True):
    """One epoch of joint training over scenario batches.

    tightening: "none" reproduces plain joint training; "online" rebuilds
    the certificate per batch and routes the eps-sequence into the policy
    input and the per-step constraint boxes.
    """
    if tightening not in ("none", "online"):
        raise ValueError(f"unknown tightening mode '{tightening}'")
    cfg = config
    pol_named = md.policy_arrays(state.policy)
    dyn_named = md.dynamics_arrays(state.dynamics)
    for _ in range(cfg.batches_per_epoch):
        scen = cl.sample_scenarios(state.rng, cfg.batch_size, cfg.horizon,
                                   state.sample_box, price_window_fn,
                                   cfg.aux_low, cfg.aux_high)
        if tightening == "online":
            _rebuild_certificate(state, scen)
        sched = state.schedule if tightening == "online" else None
        try:
            tape = de.Tape()
            traj, l_cons, l_obj = _rollout_losses(state, scen, sched, tape=tape)
            l_dpc = de.add(de.scale(l_cons, cfg.lam_cons), de.scale(l_obj, cfg.lam_obj))
            grads = tape.backward(l_dpc)
        except cl.RolloutDivergence as err:
            state.events.append({"epoch": state.epoch, "type": "diverged_batch",
                                 "reason": str(err)})
            continue

        def leaf_grads(named):
            by_id = {id(arr): k for k, arr in named.items()}
            out = {}
            for nid, node in enumerate(tape.nodes):
                if node.op == "leaf" and id(node.value) in by_id:
                    out[by_id[id(node.value)]] = grads[nid]
            return out

        g_pi = leaf_grads(pol_named)
        if g_pi:
            state.opt_policy.step(pol_named, g_pi)

        if update_model:
            g_dpc_named = leaf_grads(dyn_named)
            g_dpc = md.flatten_named({k: g_dpc_named[k] for k in dyn_named})
            if use_id:
                xb, ub, db, yb = data.train_batch(state.rng, cfg.batch_size)
                tape_id = de.Tape()
                binding = md.bind(dyn_named, tape_id)
                l_id = cl.identification_loss(xb, ub, db, yb, state.dynamics,
                                              tape=tape_id, binding=binding)
                id_grads = tape_id.backward(l_id)
                g_id = md.flatten_named({k: id_grads[binding[k].node_id] for k in dyn_named})
                g_proj = pcgrad_project(g_dpc, g_id)
                g_f = combine_model_gradient(g_id, g_proj, state.beta)
            else:
                g_f = g_dpc
            state.opt_model.step(dyn_named, md.unflatten_like(g_f, dyn_named))
    state.epoch += 1
    return state


def _validate(state, data, val_scen, tightening):
    cfg = state.config
    sched = state.schedule if tightening == "online" else None
    try:
        _, l_cons, l_obj = _rollout_losses(state, val_scen, sched)
        l_id = eval_id_loss(state.dynamics, data.x_val, data.u_val, data.d_val, data.y_val)
        comp = cl.composite_loss(l_id, l_cons, l_obj, cfg.lam_id, cfg.lam_cons, cfg.lam_obj)
        return float(comp.value), l_id, float(l_cons.value), float(l_obj.value)
    except cl.RolloutDivergence:
        return float("inf"), float("inf"), float("inf"), float("inf")


def train_variant(variant, dataset, config, seed, tariff=None, records=None):
    """Full training pipeline for one controller variant.

    Returns a dict with the trained parameters (best validation), the final
    tube certificate and schedule (guaranteed variant), the event log, the
    validation history and the estimated disturbance bound.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant '{variant}', expected one of {VARIANTS}")
    cfg = config
    tariff = tariff or pl.TOUTariff()
    records = records if records is not None else []
    root = np.random.default_rng(seed)
    r_split, r_init, r_warm, r_joint, r_val = root.spawn(5)

    n_zones = dataset["outputs"].shape[1] - 3
    n_u = dataset["setpoints"].shape[1]
    n_d = 3
    data = split_dataset(dataset, n_zones, cfg.val_fraction, r_split)
    box = cfg.box(n_zones, n_u)
    guaranteed = variant == "e2e-g"

    dyn_scaler, pol_scaler = make_scalers(cfg, n_zones, n_d, n_u, guaranteed)
    dynamics = md.init_dynamics(
        int(r_init.integers(2 ** 31)), n_x=n_zones, n_u=n_u, n_d=n_d,
        d_model=cfg.d_model, n_blocks=cfg.n_blocks, n_heads=cfg.n_heads,
        d_ff=cfg.d_ff, scaler=dyn_scaler, out_bias=data.y_train.mean(axis=0))
    out_bias = cfg.policy_out_bias
    if out_bias is None:
        out_bias = (cfg.u_bounds[0] + cfg.u_bounds[1]) / 2.0
    policy = md.init_policy(
        int(r_init.integers(2 ** 31)),
        input_dim=policy_input_dim(cfg, n_zones, n_d, guaranteed),
        hidden=cfg.policy_hidden, output_dim=n_u, scaler=pol_scaler,
        out_bias=np.full(n_u, out_bias))

    # stage 1: dynamics alone (dpc-c adds the constraint penalty here)
    warm_start(dynamics, data, cfg.warm_start_patience, cfg.warm_start_tol,
               cfg.warm_start_lr, cfg.batch_size, r_warm,
               max_epochs=cfg.warm_start_max_epochs,
               penalty_weight=cfg.lam_cons if variant == "dpc-c" else 0.0,
               box=box, records=records)
    w_bound = estimate_w_bound(dynamics, data, cfg.w_bound_inflation)

    sample_box = cfg.sampling_box(n_zones, n_u)
    state = TrainState(policy=policy, dynamics=dynamics,
                       opt_policy=Adam(lr=cfg.lr_policy), opt_model=Adam(lr=cfg.lr_model),
                       config=cfg, box=box, sample_box=sample_box, rng=r_joint,
                       w_bound_estimate=w_bound,
                       schedule=np.zeros(cfg.horizon) if guaranteed else None)

    tightening = "online" if guaranteed else "none"
    update_model = variant != "dpc-c"
    price_fn = tariff.window_from_step
    val_scen = cl.sample_scenarios(r_val, cfg.batch_size, cfg.horizon, sample_box,
                                   price_fn, cfg.aux_low, cfg.aux_high)

    def snapshot():
        return ({k: v.copy() for k, v in md.policy_arrays(policy).items()},
                {k: v.copy() for k, v in md.dynamics_arrays(dynamics).items()},
                copy.deepcopy(state.certificate),
                copy.deepcopy(state.schedule))

    val0 = _validate(state, data, val_scen, tightening)[0]
    state.val_history.append(val0)
    records.append({"stage": "joint", "variant": variant, "epoch": 0,
                    "val_composite": val0, "beta": state.beta, "rho": None,
                    "events": 0})

    best_val = val0
    best = snapshot()
    for _ in range(cfg.joint_epochs):
        joint_epoch(state, data, cfg, tightening=tightening,
                    price_window_fn=price_fn, update_model=update_model,
                    use_id=update_model)
        val, l_id, l_cons, l_obj = _validate(state, data, val_scen, tightening)
        state.val_history.append(val)
        rho = state.certificate.rho if state.certificate is not None else None
        records.append({"stage": "joint", "variant": variant, "epoch": state.epoch,
                        "val_composite": val, "val_id": l_id, "val_cons": l_cons,
                        "val_obj": l_obj, "beta": state.beta, "rho": rho,
                        "events": len(state.events)})
        if update_model:
            state.beta_idx = beta_step(cfg.beta_levels, state.beta_idx,
                                       state.val_history, cfg.warm_start_patience)
        if val < best_val:
            best_val = val
            best = snapshot()
    for k, v in md.policy_arrays(policy).items():
        v[...] = best[0][k]
    for k, v in md.dynamics_arrays(dynamics).items():
        v[...] = best[1][k]
    certificate, schedule = best[2], best[3]
    if guaranteed and certificate is None:
        # best epoch predates the first valid certificate; keep the latest one
        certificate, schedule = state.certificate, state.schedule

    return {"variant": variant, "policy": policy, "dynamics": dynamics,
            "certificate": certificate, "schedule": schedule,
            "events": state.events, "val_history": state.val_history,
            "w_bound": w_bound, "records": records, "best_val": best_val}
