"""Portable checkpoint archive.

A checkpoint is a zip file holding ``meta.json`` (model config, vocabulary,
counters and any JSON-able extras) and one little-endian ``.npy`` array per
tensor. Entries carry a fixed timestamp so identical content gives identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import Vocabulary
from .model import DisentangledVAE, ModelConfig

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


@dataclass
class Checkpoint:
    model: DisentangledVAE
    vocab: Vocabulary
    step: int = 0
    optimizer_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _le(arr: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(arr.astype(arr.dtype.newbyteorder("<"), copy=False))


def _native(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("="), copy=True)


def _flatten(obj, prefix: str, arrays: dict):
    """Replace tensors in a nested structure with references into ``arrays``."""
    if torch.is_tensor(obj):
        key = f"{prefix}.npy"
        arrays[key] = obj.detach().cpu().numpy()
        return {"__array__": key}
    if isinstance(obj, dict):
        return {"__dict__": [[_flatten(k, f"{prefix}/k{i}", arrays), _flatten(v, f"{prefix}/{i}", arrays)]
                             for i, (k, v) in enumerate(obj.items())]}
    if isinstance(obj, (list, tuple)):
        return {"__list__": [_flatten(v, f"{prefix}/{i}", arrays) for i, v in enumerate(obj)]}
    return obj


def _unflatten(obj, arrays: dict):
    if isinstance(obj, dict):
        if "__array__" in obj:
            return torch.from_numpy(_native(arrays[obj["__array__"]]))
        if "__dict__" in obj:
            return {_unflatten(k, arrays): _unflatten(v, arrays) for k, v in obj["__dict__"]}
        if "__list__" in obj:
            return [_unflatten(v, arrays) for v in obj["__list__"]]
    return obj


def _write(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    params = {f"params/{k}.npy": v.detach().cpu().numpy() for k, v in ckpt.model.state_dict().items()}
    optim = _flatten(ckpt.optimizer_state, "optim", arrays)
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": ckpt.model.cfg.to_dict(),
        "vocab": ckpt.vocab.to_dict(),
        "step": ckpt.step,
        "optimizer_state": optim,
        "extra": ckpt.extra,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "meta.json", json.dumps(meta, indent=1, sort_keys=True).encode("utf-8"))
        entries = {**params, **arrays}
        for name in sorted(entries):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, _le(entries[name]), allow_pickle=False)
            _write(zf, name, buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('format_version')}")
        arrays = {n: np.lib.format.read_array(io.BytesIO(zf.read(n)), allow_pickle=False)
                  for n in zf.namelist() if n.endswith(".npy")}
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = DisentangledVAE(cfg)
    state = {}
    for k, ref in model.state_dict().items():
        state[k] = torch.from_numpy(_native(arrays[f"params/{k}.npy"])).to(ref.dtype)
    model.load_state_dict(state)
    return Checkpoint(model, Vocabulary.from_dict(meta["vocab"]), meta["step"],
                      _unflatten(meta["optimizer_state"], arrays), meta.get("extra", {}))
