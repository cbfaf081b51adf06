"""Checkpoint bundles: a directory with a JSON manifest, the config and
vocabulary snapshots, and raw little-endian binary parameter blocks.

The format is deliberately dumb so that load -> save round-trips are
bit-identical and freeze contracts can be checked by comparing bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import SCHEMA_VERSION, ExperimentConfig
from .data import ClinicalScaler
from .errors import ConfigError, DataError, OrderingError
from .model import ReportSurvivalModel
from .textgen import Vocabulary

STAGES = ("completer", "stage1", "stage2", "stage3")

_DTYPES = {"float32": torch.float32, "float64": torch.float64, "int64": torch.int64}


def check_stage_flags(flags: dict):
    ordered = ("stage1", "stage2", "stage3")
    for prev, cur in zip(ordered, ordered[1:]):
        if flags.get(cur) and not flags.get(prev):
            raise OrderingError(f"stage flag {cur} set without {prev}")


@dataclass
class LoadedBundle:
    config: ExperimentConfig
    vocab: Vocabulary
    model: ReportSurvivalModel
    stage_flags: dict
    scaler: ClinicalScaler


def save_bundle(path, model: ReportSurvivalModel, stage_flags: dict,
                scaler: ClinicalScaler = None):
    path = Path(path)
    (path / "blocks").mkdir(parents=True, exist_ok=True)
    flags = {name: bool(stage_flags.get(name, False)) for name in STAGES}
    check_stage_flags(flags)

    blocks_meta = {}
    for name, module in model.blocks().items():
        state = module.state_dict()
        keys = sorted(state)
        tensors = []
        with (path / "blocks" / f"{name}.bin").open("wb") as fh:
            for key in keys:
                tensor = state[key].detach().cpu().contiguous()
                dtype = str(tensor.dtype).replace("torch.", "")
                if dtype not in _DTYPES:
                    raise ConfigError(f"unsupported tensor dtype in checkpoint: {dtype}")
                fh.write(tensor.numpy().tobytes())
                tensors.append({"key": key, "shape": list(tensor.shape), "dtype": dtype})
        blocks_meta[name] = {"file": f"blocks/{name}.bin", "tensors": tensors}

    extras = {}
    if scaler is not None and scaler.mean is not None:
        extras["clinical_scaler"] = {
            "mean": [float(v) for v in scaler.mean],
            "std": [float(v) for v in scaler.std],
        }
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": model.config.content_hash(),
        "stage_flags": flags,
        "blocks": blocks_meta,
        "extras": extras,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    (path / "config.json").write_text(model.config.to_json())
    (path / "vocab.json").write_text(model.vocab.to_json())


def load_bundle(path) -> LoadedBundle:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"not a checkpoint bundle (no manifest): {path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ConfigError(
            f"unknown checkpoint schema_version: {manifest.get('schema_version')!r}"
        )
    flags = manifest["stage_flags"]
    check_stage_flags(flags)

    config = ExperimentConfig.load(path / "config.json")
    if config.content_hash() != manifest["config_hash"]:
        raise ConfigError("checkpoint config does not match its manifest hash")
    vocab = Vocabulary.from_json((path / "vocab.json").read_text())
    model = ReportSurvivalModel(config, vocab)

    for name, meta in manifest["blocks"].items():
        module = model.blocks().get(name)
        if module is None:
            raise ConfigError(f"checkpoint block {name!r} has no matching module")
        raw = (path / meta["file"]).read_bytes()
        state, offset = {}, 0
        for spec in meta["tensors"]:
            dtype = _DTYPES[spec["dtype"]]
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            nbytes = count * torch.tensor([], dtype=dtype).element_size()
            array = np.frombuffer(raw[offset:offset + nbytes],
                                  dtype=spec["dtype"]).copy()
            state[spec["key"]] = torch.from_numpy(array).reshape(spec["shape"])
            offset += nbytes
        if offset != len(raw):
            raise DataError(f"checkpoint block {name!r} has trailing bytes")
        module.load_state_dict(state)

    scaler = ClinicalScaler()
    scaler_meta = manifest.get("extras", {}).get("clinical_scaler")
    if scaler_meta:
        scaler.mean = np.asarray(scaler_meta["mean"], dtype=np.float64)
        scaler.std = np.asarray(scaler_meta["std"], dtype=np.float64)
    return LoadedBundle(config, vocab, model, dict(flags), scaler)
