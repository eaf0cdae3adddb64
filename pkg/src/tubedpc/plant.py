"""Ground-truth simulation: a multi-zone RC thermal network with
thermostat-driven heat-pump power, a time-of-use tariff, a synthetic winter
ambient trace, bounded process noise, and dataset generation for system
identification.

Physics: each zone is a lumped heat capacitance C_i coupled to its ring and
floor neighbours through resistances R_ij and to ambient through R_out,i.
Heating power per zone is proportional to the positive part of
(group setpoint - zone temperature), saturated at the heater capacity:

    T_i+ = T_i + dt/C_i [ sum_j (T_j - T_i)/R_ij + (T_out - T_i)/R_out,i + q_i ] + w_i

Electrical energy per step is sum_i q_i * dt / COP plus an appliance base
load; zones that have fallen below the heat pump's minimum operating
temperature are served by electric-resistance backup at COP ~1 instead
(low-source cutout), which makes deep underheating expensive without
changing the thermal response. Four thermostat setpoints map onto eight
zones as fixed two-zones-per-floor groups. Process noise is Gaussian,
truncated at three sigma so the per-step disturbance norm stays bounded.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

#: Off-peak 22-06, mid-peak 06-16, high-peak 16-19, super-peak 19-22 (EUR/kWh)
DEFAULT_TARIFF_PERIODS = [
    (0.0, 6.0, 0.214),
    (6.0, 16.0, 0.316),
    (16.0, 19.0, 0.502),
    (19.0, 22.0, 0.605),
    (22.0, 24.0, 0.214),
]


@dataclass
class TOUTariff:
    """Ordered (start hour, end hour, price) periods partitioning the day.

    Intervals are half-open [start, end): 16:00 already pays the high-peak
    price.
    """

    periods: list = field(default_factory=lambda: list(DEFAULT_TARIFF_PERIODS))

    def __post_init__(self):
        periods = sorted(self.periods)
        if not periods or periods[0][0] != 0.0 or periods[-1][1] != 24.0:
            raise ValueError("tariff periods must cover [0, 24)")
        for (s0, e0, _), (s1, _, _) in zip(periods, periods[1:]):
            if e0 != s1:
                raise ValueError(f"tariff periods leave a gap or overlap at hour {e0}")
        self.periods = periods

    def price_at(self, hour):
        h = float(hour) % 24.0
        for start, end, price in self.periods:
            if start <= h < end:
                return price
        raise RuntimeError("unreachable: periods partition the day")

    def window_from_step(self, step, n, dt=900.0):
        """Prices for control steps step .. step+n-1."""
        hours = ((np.arange(step, step + n) * dt) / 3600.0) % 24.0
        return np.array([self.price_at(h) for h in hours])


def tou_price(tariff, hour):
    """Active tariff price at a time of day (hours)."""
    return tariff.price_at(hour)


@dataclass
class RCPlantConfig:
    n_zones: int = 8
    heat_capacity: float = 3.6e6      # J/degC per zone
    r_ring: float = 0.05              # degC/W between ring neighbours
    r_floor: float = 0.04             # degC/W between vertically stacked zones
    r_out: float = 0.012              # degC/W zone to ambient
    heater_gain: float = 2000.0       # W per degC of setpoint excess
    heater_capacity: float = 5000.0   # W per zone
    cop: float = 3.5
    hp_min_temp: float = 17.5         # below this zone temp the heat pump cuts
    backup_cop: float = 1.0           # out and resistance backup carries q_i
    appliance_base: float = 0.15      # kWh per step
    appliance_peak: float = 0.25      # extra kWh per step at the evening peak
    dt: float = 900.0                 # s
    noise_scale: float = 0.04         # degC per step, truncated at 3 sigma
    t_ret_nominal: float = 30.0       # degC heat-pump return at zero load
    t_ret_gain: float = 12.0          # degC rise at full load
    t_ret_alpha: float = 0.3          # first-order response per step
    t_ret_noise: float = 0.05         # degC

    def __post_init__(self):
        if min(self.heat_capacity, self.r_ring, self.r_floor, self.r_out, self.dt) <= 0:
            raise ValueError("capacitances, resistances and dt must be positive")

    @property
    def zone_groups(self):
        """Setpoint index serving each zone (two consecutive zones per group)."""
        return np.arange(self.n_zones) // 2

    @property
    def n_setpoints(self):
        return int(self.zone_groups[-1]) + 1 if self.n_zones else 0

    def conductance_matrix(self):
        """Symmetric inter-zone conductances (W/degC); ring plus floor slabs."""
        n = self.n_zones
        g = np.zeros((n, n))
        if n >= 2:
            for i in range(n):
                j = (i + 1) % n
                if i != j:
                    g[i, j] = g[j, i] = 1.0 / self.r_ring
        for i in range(n - 2):
            g[i, i + 2] = g[i + 2, i] = 1.0 / self.r_floor
        return g

    def w_bound(self):
        """Norm bound on the injected per-step temperature disturbance."""
        return 3.0 * self.noise_scale * np.sqrt(self.n_zones)

    def appliance_load(self, step_of_day):
        """Deterministic daily appliance profile (kWh per step)."""
        hour = (step_of_day * self.dt / 3600.0) % 24.0
        bump = np.exp(-0.5 * ((hour - 19.0) / 2.0) ** 2) + 0.6 * np.exp(-0.5 * ((hour - 7.5) / 1.5) ** 2)
        return self.appliance_base + self.appliance_peak * bump

    def to_dict(self):
        return {k: getattr(self, k) for k in (
            "n_zones", "heat_capacity", "r_ring", "r_floor", "r_out",
            "heater_gain", "heater_capacity", "cop", "hp_min_temp",
            "backup_cop", "appliance_base", "appliance_peak", "dt",
            "noise_scale", "t_ret_nominal", "t_ret_gain", "t_ret_alpha",
            "t_ret_noise")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PlantState:
    temps: np.ndarray
    t_ret: float
    energy_total_kwh: float
    energy_appl_kwh: float
    time_step: int

    def outputs(self):
        """Measured output vector: zone temps, total/appliance energy, T_ret."""
        return np.concatenate([self.temps, [self.energy_total_kwh,
                                            self.energy_appl_kwh, self.t_ret]])


class SimulationFault(RuntimeError):
    """Non-finite plant state."""


class RCPlant:
    """Stateful single-worker plant instance; clone via a fresh seed."""

    def __init__(self, config=None, seed=0):
        self.config = config or RCPlantConfig()
        self.rng = np.random.default_rng(seed)
        self._g_zz = self.config.conductance_matrix()
        self._g_out = 1.0 / self.config.r_out
        self.reset()

    def reset(self, temps=21.0, t_ret=None, start_step=0):
        cfg = self.config
        temps = np.asarray(temps, dtype=np.float64)
        if temps.ndim == 0:
            temps = np.full(cfg.n_zones, float(temps))
        self.state = PlantState(
            temps=temps.copy(),
            t_ret=cfg.t_ret_nominal if t_ret is None else float(t_ret),
            energy_total_kwh=cfg.appliance_load(start_step),
            energy_appl_kwh=cfg.appliance_load(start_step),
            time_step=start_step)
        return self.state

    def heater_power(self, setpoints, temps=None):
        """Per-zone heating power (W) for given group setpoints."""
        cfg = self.config
        temps = self.state.temps if temps is None else temps
        sp_zone = np.asarray(setpoints, dtype=np.float64)[cfg.zone_groups]
        return np.minimum(cfg.heater_gain * np.maximum(sp_zone - temps, 0.0),
                          cfg.heater_capacity)

    def step(self, setpoints, t_ambient, with_noise=True):
        """Advance one control interval; returns (PlantState, info dict)."""
        cfg = self.config
        s = self.state
        sp = np.asarray(setpoints, dtype=np.float64)
        clamped = bool(np.any(sp < 16.0) or np.any(sp > 26.0))
        sp = np.clip(sp, 16.0, 26.0)

        q = self.heater_power(sp)
        flows = self._g_zz @ s.temps - self._g_zz.sum(axis=1) * s.temps \
            + self._g_out * (t_ambient - s.temps) + q
        if with_noise and cfg.noise_scale > 0:
            w = np.clip(cfg.noise_scale * self.rng.standard_normal(cfg.n_zones),
                        -3.0 * cfg.noise_scale, 3.0 * cfg.noise_scale)
        else:
            w = np.zeros(cfg.n_zones)
        temps_next = s.temps + (cfg.dt / cfg.heat_capacity) * flows + w

        # heat pump cannot serve zones that have gone too cold; resistance
        # backup delivers the same q_i at backup_cop electrical efficiency
        cop_per_zone = np.where(s.temps >= cfg.hp_min_temp, cfg.cop, cfg.backup_cop)
        e_hp = float(np.sum(q / cop_per_zone)) * cfg.dt / 3.6e6
        e_appl = cfg.appliance_load(s.time_step)
        load_frac = float(np.sum(q)) / (cfg.n_zones * cfg.heater_capacity)
        t_ret_target = cfg.t_ret_nominal + cfg.t_ret_gain * load_frac
        ret_noise = 0.0
        if with_noise and cfg.t_ret_noise > 0:
            ret_noise = float(np.clip(cfg.t_ret_noise * self.rng.standard_normal(),
                                      -3.0 * cfg.t_ret_noise, 3.0 * cfg.t_ret_noise))
        t_ret_next = s.t_ret + cfg.t_ret_alpha * (t_ret_target - s.t_ret) + ret_noise

        if not (np.all(np.isfinite(temps_next)) and np.isfinite(t_ret_next)):
            raise SimulationFault("non-finite plant state")

        self.state = PlantState(temps=temps_next, t_ret=t_ret_next,
                                energy_total_kwh=e_hp + e_appl,
                                energy_appl_kwh=e_appl,
                                time_step=s.time_step + 1)
        info = {"q": q, "heat_delivered_j": float(np.sum(q)) * cfg.dt,
                "clamped": clamped, "noise": w, "energy_kwh": e_hp + e_appl,
                "setpoints": sp}
        return self.state, info

    def steady_state(self, setpoints, t_ambient):
        """Fixed point of the noiseless update for constant inputs, assuming
        the heater stays in the same regime (off / proportional) throughout."""
        cfg = self.config
        sp = np.clip(np.asarray(setpoints, dtype=np.float64), 16.0, 26.0)
        sp_zone = sp[cfg.zone_groups]
        lap = np.diag(self._g_zz.sum(axis=1)) - self._g_zz
        # iterate on the heater regime until self-consistent
        temps = np.full(cfg.n_zones, float(t_ambient))
        for _ in range(200):
            active = sp_zone > temps
            a = lap + np.diag(self._g_out + cfg.heater_gain * active)
            rhs = self._g_out * t_ambient + cfg.heater_gain * active * sp_zone
            new = np.linalg.solve(a, rhs)
            if np.array_equal(active, sp_zone > new):
                return new
            temps = new
        return temps


def ambient_trace(n_steps, seed, mean=6.0, amplitude=4.0, noise=0.5,
                  dt=900.0, start_step=0, peak_hour=14.0):
    """Synthetic winter outdoor temperature: daily sinusoid in [2, 10] degC
    plus bounded noise, reproducible by seed."""
    rng = np.random.default_rng(seed)
    hours = ((np.arange(start_step, start_step + n_steps) * dt) / 3600.0) % 24.0
    base = mean - amplitude * np.cos(2.0 * np.pi * (hours - peak_hour + 12.0) / 24.0)
    return base + np.clip(noise * rng.standard_normal(n_steps), -3 * noise, 3 * noise)


def generate_dataset(config, steps, seed, dwell_range=(4, 16),
                     level_range=(16.0, 26.0), cold_fraction=0.25):
    """Multi-level setpoint excitation over a synthetic winter trace.

    Piecewise-constant random levels per thermostat with dwell times of
    4-16 steps; most levels sit in the occupied upper range with occasional
    cold sweeps (the building spends identification time near where it
    operates, while still visiting the full band). Returns per-step
    outputs and setpoints (steps rows give steps-1 one-step transitions).
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    cfg = config
    rng = np.random.default_rng(seed)
    plant = RCPlant(cfg, seed=rng.integers(2 ** 31))
    plant.reset(temps=rng.uniform(19.0, 23.0, size=cfg.n_zones))
    amb = ambient_trace(steps, seed=rng.integers(2 ** 31), dt=cfg.dt)

    lo, hi = level_range
    split = lo + 0.35 * (hi - lo)

    def draw_level():
        if rng.uniform() < cold_fraction:
            return rng.uniform(lo, split)
        return rng.uniform(split, hi)

    n_u = cfg.n_setpoints
    levels = np.array([draw_level() for _ in range(n_u)])
    remaining = rng.integers(dwell_range[0], dwell_range[1] + 1, size=n_u)

    outputs = np.empty((steps, cfg.n_zones + 3))
    setpoints = np.empty((steps, n_u))
    for j in range(steps):
        for g in range(n_u):
            if remaining[g] == 0:
                levels[g] = draw_level()
                remaining[g] = rng.integers(dwell_range[0], dwell_range[1] + 1)
            remaining[g] -= 1
        outputs[j] = plant.state.outputs()
        setpoints[j] = levels
        plant.step(levels, amb[j])
    return {"outputs": outputs, "setpoints": setpoints, "ambient": amb}


def transitions(dataset, n_zones):
    """(x_j, u_j, d_j, y_{j+1}) arrays from a generated dataset."""
    outs = dataset["outputs"]
    sps = dataset["setpoints"]
    x = outs[:-1, :n_zones]
    d = outs[:-1, n_zones:]
    u = sps[:-1]
    y = outs[1:]
    return x, u, d, y


def feature_names(n_zones, n_setpoints):
    zones = [f"Z{i + 1:02d}_T" for i in range(n_zones)]
    aux = ["Fa_E_All", "Fa_E_Appl", "Bd_T_HP_return"]
    sps = [f"P{g + 1}_T_Thermostat_sp" for g in range(n_setpoints)]
    return zones + aux + sps


def save_dataset_csv(path, dataset, config):
    names = feature_names(config.n_zones, config.n_setpoints)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time"] + names)
        for j in range(dataset["outputs"].shape[0]):
            row = [j] + list(dataset["outputs"][j]) + list(dataset["setpoints"][j])
            writer.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])


def load_dataset_csv(path, n_zones):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    data = np.array([[float(v) for v in row[1:]] for row in rows[1:]])
    return {"outputs": data[:, :n_zones + 3], "setpoints": data[:, n_zones + 3:],
            "ambient": None}
