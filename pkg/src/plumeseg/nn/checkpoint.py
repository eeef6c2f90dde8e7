"""
Checkpoint files
----------------
``b"CKP1"``, a little-endian uint32 manifest length, a UTF-8 JSON manifest
``{"config", "names", "shapes", "step", ...}``, then float32 little-endian
parameter blocks in manifest order followed by the Adam ``m`` and ``v``
blocks in the same order.
"""

from __future__ import annotations

import json
import os
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from plumeseg.errors import FormatError, IoError
from plumeseg.nn.optim import ModelState
from plumeseg.nn.unet import UNet, UNetConfig

MAGIC = b"CKP1"


def save_checkpoint(model: UNet, path, **extra) -> None:
    state = model.state
    names = list(state.params)
    manifest = {
        "config": model.cfg.to_dict(),
        "names": names,
        "shapes": [list(state.params[n].shape) for n in names],
        "step": int(state.step),
        **extra,
    }
    head = json.dumps(manifest).encode("utf-8")
    blocks = [
        np.ascontiguousarray(buf[n], dtype="<f4").tobytes()
        for buf in (state.params, state.adam_m, state.adam_v)
        for n in names
    ]
    tmp = Path(str(path) + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(MAGIC + struct.pack("<I", len(head)) + head)
            for b in blocks:
                fh.write(b)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[UNet, dict]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack("<I", raw[4:8])
    try:
        manifest = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
        cfg = UNetConfig(**manifest["config"])
        names, shapes = manifest["names"], [tuple(s) for s in manifest["shapes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    payload = np.frombuffer(raw[8 + hlen :], dtype="<f4")
    sizes = [int(np.prod(s)) for s in shapes]
    if payload.size != 3 * sum(sizes):
        raise FormatError(f"{path}: payload size mismatch")
    buffers, offset = [], 0
    for _ in range(3):
        buf = OrderedDict()
        for name, shape, size in zip(names, shapes, sizes):
            buf[name] = payload[offset : offset + size].reshape(shape).astype(np.float32)
            offset += size
        buffers.append(buf)
    state = ModelState(buffers[0], buffers[1], buffers[2], int(manifest.get("step", 0)))
    return UNet(cfg, state=state), manifest
