"""Closed-loop deployment on the plant, metric computation, variant
comparison and plot-ready reporting.

At every 15-minute step the policy receives the measured plant outputs,
the next-N tariff prices and (guaranteed variant) the tightening sequence;
its setpoints drive the plant. Metrics: the electricity bill in EUR
(per-step energy times the active tariff price) and the temperature
violation in degC-steps (magnitude of comfort-band excursions summed over
zones and steps).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import models as md
from . import plant as pl
from . import tube


@dataclass
class RunConfig:
    days: int = 3
    start_step: int = 0          # steps after midnight on day one
    seed: int = 0                # plant noise + weather
    init_temp: float = 21.0
    recompute_online: bool = False  # rebuild eps from deployment Jacobians
    label: str = ""

    def __post_init__(self):
        if self.days < 1:
            raise ValueError("simulation must cover at least one day")

    @property
    def n_steps(self):
        return self.days * 96


@dataclass
class Metrics:
    electricity_bill_eur: float
    temperature_violation_degc_step: float
    bill_steps: np.ndarray
    violation_steps: np.ndarray

    def summary(self):
        return {"electricity_bill_eur": self.electricity_bill_eur,
                "temperature_violation_degC_step": self.temperature_violation_degc_step}


def _schedule_window(schedule, horizon):
    if schedule is None:
        return None
    if isinstance(schedule, tube.TighteningSchedule):
        return schedule.window(0, horizon)
    arr = np.asarray(schedule, dtype=np.float64)
    idx = np.minimum(np.arange(horizon), arr.size - 1)
    return arr[idx]


def _online_schedule(dynamics, outputs, setpoints, config, box, w_bound, horizon,
                     fallback):
    """Rebuild the tightening from the Jacobians at the measured point."""
    n_x = box.x_low.size
    try:
        a_pts, b_pts = tube.point_jacobians(
            dynamics, outputs[:n_x], setpoints, outputs[n_x:])
        _, sched = tube.build_certificate(
            a_pts[0], b_pts[0], config.q_weight * np.eye(n_x),
            config.r_weight * np.eye(setpoints.size), eps=config.base_eps,
            box=box, w_bound=w_bound, n_steps=horizon)
        return sched
    except (tube.DareError, tube.CertificateError):
        return fallback


def deploy(policy, plant_instance, run, tariff, horizon=8, schedule=None,
           dynamics=None, train_config=None, box=None, w_bound=0.0):
    """Run the policy on the plant for run.n_steps control intervals.

    Returns (Metrics, trace). The trace holds everything needed to
    recompute the metrics exactly.
    """
    expects_tightening = schedule is not None
    n_steps = run.n_steps
    cfg = plant_instance.config
    ambient = pl.ambient_trace(n_steps, seed=run.seed + 1, dt=cfg.dt,
                               start_step=run.start_step)
    plant_instance.reset(temps=run.init_temp, start_step=run.start_step)

    n_z = cfg.n_zones
    trace = {"step": np.arange(n_steps), "hour": np.empty(n_steps),
             "temps": np.empty((n_steps, n_z)),
             "setpoints": np.empty((n_steps, cfg.n_setpoints)),
             "energy_kwh": np.empty(n_steps), "energy_appl_kwh": np.empty(n_steps),
             "t_ret": np.empty(n_steps), "price": np.empty(n_steps),
             "ambient": ambient.copy(), "clamped": np.zeros(n_steps, dtype=bool)}

    current_schedule = schedule
    for t in range(n_steps):
        global_step = run.start_step + t
        outputs = plant_instance.state.outputs()
        prices = tariff.window_from_step(global_step, horizon, dt=cfg.dt)
        eps = _schedule_window(current_schedule, horizon) if expects_tightening else None
        inp = md.PolicyInput(state=outputs, prices=prices, tightening=eps)
        u = md.policy_forward(inp, policy)
        hour = (global_step * cfg.dt / 3600.0) % 24.0
        trace["hour"][t] = hour
        trace["temps"][t] = plant_instance.state.temps
        trace["price"][t] = tariff.price_at(hour)
        state, info = plant_instance.step(u, ambient[t])
        trace["setpoints"][t] = info["setpoints"]
        trace["energy_kwh"][t] = info["energy_kwh"]
        trace["energy_appl_kwh"][t] = state.energy_appl_kwh
        trace["t_ret"][t] = state.t_ret
        trace["clamped"][t] = info["clamped"]
        if expects_tightening and run.recompute_online and dynamics is not None:
            current_schedule = _online_schedule(
                dynamics, outputs, info["setpoints"], train_config,
                box, w_bound, horizon, fallback=current_schedule)
    return compute_metrics(trace), trace


def compute_metrics(trace, comfort=(19.0, 24.0)):
    """Bill and violation from a trace; pure and exactly recomputable."""
    low, high = comfort
    bill_steps = trace["energy_kwh"] * trace["price"]
    temps = trace["temps"]
    viol = np.maximum(temps - high, 0.0) + np.maximum(low - temps, 0.0)
    violation_steps = viol.sum(axis=1)
    return Metrics(electricity_bill_eur=float(bill_steps.sum()),
                   temperature_violation_degc_step=float(violation_steps.sum()),
                   bill_steps=bill_steps, violation_steps=violation_steps)


def bill_by_period(trace, tariff):
    """Bill split by tariff price level (the wrapped off-peak period merges);
    the subtotals sum exactly to the total bill."""
    out = {}
    for start, end, price in tariff.periods:
        mask = (trace["hour"] >= start) & (trace["hour"] < end)
        key = f"{price}"
        out[key] = out.get(key, 0.0) + float((trace["energy_kwh"][mask]
                                              * trace["price"][mask]).sum())
    return out


def thermostat_policy(setpoint, n_u=4, input_dim=19):
    """Hand-coded reference: constant setpoints regardless of inputs."""
    return md.PolicyParams(layers=[(np.zeros((input_dim, n_u)),
                                    np.full(n_u, float(setpoint)))])


def compare_variants(artifacts, plant_config, run, tariff, horizon=8):
    """Deploy each variant on an identically seeded plant and weather.

    artifacts: {variant: {"policy": ..., "schedule": ... or None}}.
    Returns rows of (variant, bill, violation) plus the traces.
    """
    rows = []
    traces = {}
    for variant, art in artifacts.items():
        plant_instance = pl.RCPlant(plant_config, seed=run.seed)
        metrics, trace = deploy(art["policy"], plant_instance, run, tariff,
                                horizon=horizon, schedule=art.get("schedule"))
        rows.append({"variant": variant,
                     "electricity_bill_eur": metrics.electricity_bill_eur,
                     "temperature_violation_degC_step":
                         metrics.temperature_violation_degc_step})
        traces[variant] = trace
    return rows, traces


def write_comparison(path_csv, path_json, rows):
    with open(path_csv, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["variant", "electricity_bill_eur",
                                                "temperature_violation_degC_step"])
        writer.writeheader()
        writer.writerows(rows)
    with open(path_json, "w") as fh:
        json.dump(rows, fh, sort_keys=True, indent=2)
        fh.write("\n")


def report(trace, out_dir, comfort=(19.0, 24.0), seed=None):
    """Plot-ready CSVs (zone temperatures with the comfort band; power vs
    price) plus a JSON metric summary; returns the written paths."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    n_steps, n_z = trace["temps"].shape
    temp_path = os.path.join(out_dir, "temperatures.csv")
    with open(temp_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_h"] + [f"Z{i + 1:02d}_T" for i in range(n_z)]
                        + ["band_low", "band_high"])
        for t in range(n_steps):
            time_h = trace["step"][t] * 0.25
            writer.writerow([f"{time_h:.2f}"]
                            + [f"{v:.6f}" for v in trace["temps"][t]]
                            + [comfort[0], comfort[1]])

    power_path = os.path.join(out_dir, "power.csv")
    with open(power_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_h", "energy_kwh", "price_eur_per_kwh"])
        for t in range(n_steps):
            writer.writerow([f"{trace['step'][t] * 0.25:.2f}",
                             f"{trace['energy_kwh'][t]:.9f}",
                             f"{trace['price'][t]:.6f}"])

    metrics = compute_metrics(trace, comfort=comfort)
    summary = metrics.summary()
    if seed is not None:
        summary["weather_seed"] = seed + 1
        summary["plant_seed"] = seed
    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return {"temperatures": temp_path, "power": power_path, "summary": summary_path}
