"""One JSON config with plant / training / certification / run sections.

Every CLI command takes --config <json>; missing keys fall back to these
defaults, so a partial file overriding a few values is enough.
"""

from __future__ import annotations

import json

from .certification import CertConfig
from .harness import RunConfig
from .plant import DEFAULT_TARIFF_PERIODS, RCPlantConfig, TOUTariff
from .training import TrainConfig


def default_config():
    return {
        "plant": RCPlantConfig().to_dict(),
        "tariff": [list(p) for p in DEFAULT_TARIFF_PERIODS],
        "training": TrainConfig().to_dict(),
        "certification": {"m_val": 8000, "delta": 0.05, "mu_bound": 0.9},
        "run": {"days": 3, "start_step": 0, "init_temp": 21.0,
                "recompute_online": False},
        "dataset_steps": 8000,
    }


def _merge(base, override):
    out = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            out[k] = _merge(base[k], v)
        else:
            out[k] = v
    return out


def load_config(path=None):
    cfg = default_config()
    if path:
        with open(path) as fh:
            cfg = _merge(cfg, json.load(fh))
    return cfg


def plant_config(cfg):
    return RCPlantConfig.from_dict(cfg["plant"])


def tariff(cfg):
    return TOUTariff(periods=[tuple(p) for p in cfg["tariff"]])


def train_config(cfg):
    return TrainConfig.from_dict(cfg["training"])


def cert_config(cfg):
    return CertConfig(**cfg["certification"])


def run_config(cfg, seed=0, label=""):
    r = dict(cfg["run"])
    return RunConfig(days=r.get("days", 3), start_step=r.get("start_step", 0),
                     seed=seed, init_temp=r.get("init_temp", 21.0),
                     recompute_online=r.get("recompute_online", False), label=label)
