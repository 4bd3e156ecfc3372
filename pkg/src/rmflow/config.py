"""Run configuration: one JSON file, defaults filled in per manifold."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

from .data import DatasetSpec
from .errors import InvalidArgument, InvalidSpec
from .geometry import manifold_from_spec
from .net import NetConfig

OBJECTIVES = ("rmf_mt", "rmf_sum", "rmf_direct", "alpha_rmf", "imf", "rfm", "cfg")

# Optimiser settings shared by every manifold.
COMMON_TRAIN = {
    "base_lr": 5e-4,
    "weight_decay": 0.01,
    "betas": [0.9, 0.999],
    "eps": 1e-8,
    "pcgrad_eps": 1e-12,
    "seed": 0,
    "log_wallclock": True,
}

# Per-manifold defaults, sized to train on one CPU core in minutes for the
# sphere and Euclidean cases.
MANIFOLD_DEFAULTS = {
    "sphere": {"net": {"hidden_dim": 512, "num_layers": 4},
               "train": {"p_eq": 0.75, "batch_size": 1024, "epochs": 30}},
    "euclidean": {"net": {"hidden_dim": 512, "num_layers": 4},
                  "train": {"p_eq": 0.75, "batch_size": 1024, "epochs": 30}},
    "torus": {"net": {"hidden_dim": 512, "num_layers": 4},
              "train": {"p_eq": 0.75, "batch_size": 2048, "epochs": 5000}},
    "so3": {"net": {"hidden_dim": 512, "num_layers": 4},
            "train": {"p_eq": 0.10, "batch_size": 1024, "epochs": 200}},
}


@dataclass
class RunConfig:
    dataset: DatasetSpec
    net: NetConfig
    objective: dict
    train: dict
    sample: dict
    eval: dict
    reverse_time: bool = False
    output_dir: str = "runs/default"
    track_val: bool = False

    @property
    def manifold(self):
        return manifold_from_spec(self.dataset.manifold)

    def to_dict(self):
        net = self.net.to_dict()
        net.pop("manifold")
        return {
            "dataset": self.dataset.to_dict(),
            "net": net,
            "objective": dict(self.objective),
            "train": copy.deepcopy(self.train),
            "sample": dict(self.sample),
            "eval": copy.deepcopy(self.eval),
            "reverse_time": self.reverse_time,
            "output_dir": self.output_dir,
            "track_val": self.track_val,
        }

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve(raw: dict) -> RunConfig:
    """Fill defaults and validate. Raises InvalidSpec / InvalidArgument on bad input."""
    if "dataset" not in raw:
        raise InvalidSpec("config needs a 'dataset' section")
    unknown = set(raw) - {"dataset", "net", "objective", "train", "sample", "eval",
                          "reverse_time", "output_dir", "track_val"}
    if unknown:
        raise InvalidSpec(f"unknown config sections: {sorted(unknown)}")
    dataset = DatasetSpec.from_dict(raw["dataset"])
    kind = manifold_from_spec(dataset.manifold).name
    defaults = MANIFOLD_DEFAULTS[kind]

    net_raw = _merge({"time_embed_dim": 64, "activation": "silu"}, defaults["net"])
    net_raw = _merge(net_raw, raw.get("net", {}))
    if "manifold" in net_raw and net_raw["manifold"] != dataset.manifold:
        raise InvalidSpec("net.manifold disagrees with dataset.manifold")
    net_raw["manifold"] = dataset.manifold
    net = NetConfig.from_dict(net_raw)

    train = _merge(_merge(COMMON_TRAIN, defaults["train"]), raw.get("train", {}))
    if "seed" not in raw.get("train", {}) and "seed" in raw.get("net", {}):
        train["seed"] = net.seed
    if int(train["batch_size"]) < 1 or int(train["epochs"]) < 1:
        raise InvalidSpec("batch_size and epochs must be >= 1")
    if not 0.0 <= float(train["p_eq"]) <= 1.0:
        raise InvalidSpec("p_eq must lie in [0, 1]")

    obj = raw.get("objective", {"name": "rmf_mt"})
    obj = {"name": obj} if isinstance(obj, str) else dict(obj)
    name = obj.get("name", "rmf_mt")
    if name not in OBJECTIVES:
        raise InvalidSpec(f"unknown objective {name!r}; choose from {OBJECTIVES}")
    if name == "alpha_rmf":
        a = float(obj.setdefault("alpha", 0.5))
        if not 0.0 < a <= 1.0:
            raise InvalidSpec("alpha must lie in (0, 1]")
    if name == "cfg":
        p = float(obj.setdefault("p_drop", 0.1))
        if not 0.0 <= p <= 1.0:
            raise InvalidSpec("p_drop must lie in [0, 1]")
        obj.setdefault("combine", "pcgrad")
        if net.num_classes == 0:
            raise InvalidSpec("cfg objective needs net.num_classes > 0")
    obj["name"] = name

    sample = _merge({"steps": 1, "omega": 0.0, "label": None, "n": 1000, "seed": 0},
                    raw.get("sample", {}))
    ev = _merge({"bandwidth": 1.0, "max_points": 10_000, "seeds": [0, 1, 2, 3, 4], "steps": [1],
                 "n_samples": None}, raw.get("eval", {}))
    if float(ev["bandwidth"]) <= 0:
        raise InvalidArgument("eval.bandwidth must be positive")
    return RunConfig(
        dataset=dataset, net=net, objective=obj, train=train, sample=sample, eval=ev,
        reverse_time=bool(raw.get("reverse_time", False)),
        output_dir=str(raw.get("output_dir", "runs/default")),
        track_val=bool(raw.get("track_val", False)),
    )


def load(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidSpec(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    return resolve(raw)
