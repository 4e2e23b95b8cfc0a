"""JSON serialization of trained models.

Floats are written with ``repr`` precision, so a save/load round trip restores
every weight bit for bit.
"""

from __future__ import annotations

import json

import numpy as np

from .architectures import ArchitectureKind, HyperParams, TrainedModel, build_network
from .cohort import DataError, StandardizationStats, make_schema

FORMAT_VERSION = 1


def _encode(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": a.ravel().tolist()}


def _decode(d):
    return np.array(d["data"], dtype=float).reshape(d["shape"])


def model_to_dict(model: TrainedModel, extra=None):
    net = model.network
    return {
        "format_version": FORMAT_VERSION,
        "kind": net.kind.value,
        "hyperparams": net.hp.to_dict(),
        "schema": [{"name": v.name, "kind": v.kind.value} for v in model.schema or []],
        "stats": model.stats.to_dict() if model.stats is not None else None,
        "n_windows": model.n_windows,
        "window_len": model.window_len,
        "layers": [
            {"type": type(layer).__name__, "params": {k: _encode(v) for k, v in sorted(layer.params.items())}}
            for layer in net.layers
        ],
        "best_epoch": model.best_epoch,
        "history": model.history,
        "extra": extra or {},
    }


def model_from_dict(d) -> TrainedModel:
    if d.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported model format version {d.get('format_version')!r}")
    try:
        schema = make_schema((v["name"], v["kind"]) for v in d["schema"])
        hp = HyperParams(**d["hyperparams"])
        net = build_network(ArchitectureKind(d["kind"]), hp, len(schema), d["n_windows"])
        if [l["type"] for l in d["layers"]] != [type(l).__name__ for l in net.layers]:
            raise DataError("layer layout does not match the architecture kind")
        net.set_weights([{k: _decode(v) for k, v in l["params"].items()} for l in d["layers"]])
        stats = StandardizationStats.from_dict(d["stats"]) if d["stats"] is not None else None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed model artifact: {exc}") from None
    return TrainedModel(net, d["history"], d["best_epoch"], stats, schema,
                        d["n_windows"], d["window_len"])


def save_model(model, path, extra=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, extra), fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> TrainedModel:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read model {path}: {exc}") from None
    return model_from_dict(d)
