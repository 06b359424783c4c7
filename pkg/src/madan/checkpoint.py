"""Checkpoint archive.

A checkpoint is an uncompressed zip file containing

* ``header.txt``: UTF-8 ``key=value`` lines.  Always includes
  ``format=madan-checkpoint`` and ``version=1``; model architecture keys are
  prefixed ``model.``; training state keys (stage, round, epoch, ...) are
  written by the trainer.
* ``arrays/<name>.npy``: one NumPy ``.npy`` file per named array.  Bundle
  parameters are named ``param.<state-dict key>``; optimizer moments
  ``optim.<optimizer>.<param index>.<slot>``.

Entries are written in sorted order with a fixed timestamp, so equal
contents give byte-identical files.
"""
from __future__ import annotations

import io
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

from .models import ModelBundle, ModelConfig

FORMAT = "madan-checkpoint"
VERSION = "1"
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    pass


def save_archive(path, header: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    path = Path(path)
    head = {"format": FORMAT, "version": VERSION}
    head.update({k: str(v) for k, v in header.items()})
    for k, v in head.items():
        if "\n" in k or "\n" in v or "=" in k:
            raise CheckpointError(f"invalid header entry {k!r}")
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
            info = zipfile.ZipInfo("header.txt", date_time=_EPOCH)
            zf.writestr(info, "".join(f"{k}={v}\n" for k, v in head.items()).encode("utf-8"))
            for name in sorted(arrays):
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", date_time=_EPOCH), buf.getvalue())
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointError(f"failed to write checkpoint {path}: {exc}") from exc


def load_archive(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = {}
            for line in zf.read("header.txt").decode("utf-8").splitlines():
                if line:
                    k, v = line.split("=", 1)
                    header[k] = v
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/"):-4]] = np.lib.format.read_array(
                        io.BytesIO(zf.read(name)), allow_pickle=False
                    )
    except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a madan checkpoint")
    if header.get("version") != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header, arrays


def bundle_arrays(bundle: ModelBundle) -> dict[str, np.ndarray]:
    return {f"param.{k}": v.detach().cpu().numpy().copy() for k, v in bundle.state_dict().items()}


def model_header(config: ModelConfig) -> dict[str, str]:
    return {f"model.{k}": v for k, v in config.to_dict().items()}


def config_from_header(header: dict[str, str]) -> ModelConfig:
    return ModelConfig.from_dict({k[len("model."):]: v for k, v in header.items() if k.startswith("model.")})


def restore_bundle(bundle: ModelBundle, arrays: dict[str, np.ndarray]) -> None:
    state = bundle.state_dict()
    missing = [k for k in state if f"param.{k}" not in arrays]
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    bundle.load_state_dict({k: torch.from_numpy(arrays[f"param.{k}"]) for k in state})


def save_bundle(path, bundle: ModelBundle, extra_header: dict[str, str] | None = None) -> None:
    header = model_header(bundle.config)
    header.update(extra_header or {})
    save_archive(path, header, bundle_arrays(bundle))


def load_bundle(path) -> tuple[ModelBundle, dict[str, str], dict[str, np.ndarray]]:
    header, arrays = load_archive(path)
    bundle = ModelBundle(config_from_header(header))
    restore_bundle(bundle, arrays)
    bundle.freeze_source_segmenters()
    return bundle, header, arrays


def optimizer_arrays(name: str, optimizer: torch.optim.Optimizer) -> dict[str, np.ndarray]:
    out = {}
    for idx, slots in optimizer.state_dict()["state"].items():
        for slot, value in slots.items():
            out[f"optim.{name}.{idx}.{slot}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    return out


def restore_optimizer(name: str, optimizer: torch.optim.Optimizer, arrays: dict[str, np.ndarray]) -> None:
    sd = optimizer.state_dict()
    prefix = f"optim.{name}."
    state: dict[int, dict[str, torch.Tensor]] = {}
    for key, value in arrays.items():
        if key.startswith(prefix):
            idx, slot = key[len(prefix):].split(".", 1)
            state.setdefault(int(idx), {})[slot] = torch.from_numpy(value.copy())
    sd["state"] = state
    optimizer.load_state_dict(sd)
