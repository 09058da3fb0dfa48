"""Checkpoint container.

Layout::

    b"MGSTCKPT" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

The manifest records role, step, config digest, network architecture and,
for every array, its name, shape, little-endian dtype, byte offset and size
inside the payload. A SHA-256 of the payload guards against truncation and
bit rot.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .errors import CorruptCheckpoint, MissingCheckpoint, RoleMismatch
from .networks import build_from_arch

log = logging.getLogger(__name__)

MAGIC = b"MGSTCKPT"
VERSION = 1
_HEADER = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    role: str
    parameters: dict[str, np.ndarray]
    optimizer_state: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config_digest: str = ""
    arch: dict = field(default_factory=dict)
    optimizer_hparams: dict = field(default_factory=dict)


def capture(net: nn.Module, optimizer: torch.optim.Optimizer | None = None, step=0, config_digest="") -> Checkpoint:
    params = {k: v.detach().cpu().numpy().copy() for k, v in net.state_dict().items()}
    opt_state, hparams = {}, {}
    if optimizer is not None:
        names = {id(p): n for n, p in net.named_parameters()}
        for p, state in optimizer.state.items():
            for key, value in state.items():
                opt_state[f"{names[id(p)]}/{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
        group = optimizer.param_groups[0]
        hparams = {k: (list(v) if isinstance(v, tuple) else v) for k, v in group.items()
                   if k != "params" and isinstance(v, (int, float, bool, tuple, list, str, type(None)))}
    return Checkpoint(net.role, params, opt_state, step, config_digest, dict(net.arch), hparams)


def restore(c: Checkpoint, role: str | None = None) -> nn.Module:
    """Rebuild the network stored in ``c`` (optionally insisting on ``role``)."""
    if role is not None and c.role != role:
        raise RoleMismatch(f"checkpoint holds {c.role}, expected {role}")
    net = build_from_arch(c.arch, c.role)
    state = {k: torch.from_numpy(v.copy()) for k, v in c.parameters.items()}
    net.load_state_dict(state)
    return net


def restore_optimizer(c: Checkpoint, net: nn.Module, optimizer: torch.optim.Optimizer) -> None:
    """Load Adam-style moment buffers saved by :func:`capture` into ``optimizer``."""
    params = dict(net.named_parameters())
    for key, value in c.optimizer_state.items():
        name, slot = key.rsplit("/", 1)
        optimizer.state[params[name]][slot] = torch.from_numpy(value.copy())


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(c: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for group, arrays in (("param", c.parameters), ("optim", c.optimizer_state)):
        for name in sorted(arrays):
            arr = _le(arrays[name])
            blob = arr.tobytes()
            entries.append({"group": group, "name": name, "shape": list(arr.shape),
                            "dtype": arr.dtype.str, "offset": offset, "nbytes": len(blob)})
            chunks.append(blob)
            offset += len(blob)
    payload = b"".join(chunks)
    manifest = {
        "role": c.role, "step": c.step, "config_digest": c.config_digest, "arch": c.arch,
        "optimizer_hparams": c.optimizer_hparams, "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = json.dumps(manifest, sort_keys=True).encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(_HEADER.pack(MAGIC, VERSION, len(header)) + header + payload)
    tmp.replace(path)
    return path


def load_checkpoint(path, role: str | None = None, config_digest: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise MissingCheckpoint(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise CorruptCheckpoint(f"{path}: file too short for a checkpoint header")
    magic, version, n = _HEADER.unpack_from(raw)
    if magic != MAGIC or version != VERSION:
        raise CorruptCheckpoint(f"{path}: not a mangastyle checkpoint (magic {magic!r}, version {version})")
    try:
        manifest = json.loads(raw[_HEADER.size:_HEADER.size + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable manifest ({e})") from None
    payload = raw[_HEADER.size + n:]
    if hashlib.sha256(payload).hexdigest() != manifest.get("payload_sha256"):
        raise CorruptCheckpoint(f"{path}: payload checksum mismatch (truncated or modified)")
    if role is not None and manifest["role"] != role:
        raise RoleMismatch(f"{path} holds {manifest['role']}, expected {role}")
    if config_digest is not None and manifest["config_digest"] != config_digest:
        log.warning("%s was written under config %s, current config is %s",
                    path, manifest["config_digest"], config_digest)
    groups = {"param": {}, "optim": {}}
    for e in manifest["arrays"]:
        buf = payload[e["offset"]:e["offset"] + e["nbytes"]]
        arr = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        groups[e["group"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return Checkpoint(
        role=manifest["role"], parameters=groups["param"], optimizer_state=groups["optim"],
        step=manifest["step"], config_digest=manifest["config_digest"], arch=manifest["arch"],
        optimizer_hparams=manifest.get("optimizer_hparams", {}),
    )


def load_network(source, role: str | None = None) -> nn.Module:
    """Accept a module, a :class:`Checkpoint`, or a checkpoint path; return the module."""
    if isinstance(source, nn.Module):
        if role is not None and getattr(source, "role", role) != role:
            raise RoleMismatch(f"network is {source.role}, expected {role}")
        return source
    if isinstance(source, Checkpoint):
        return restore(source, role)
    if source is None:
        raise MissingCheckpoint(f"no {role or 'network'} checkpoint given")
    return restore(load_checkpoint(source, role=role), role)
