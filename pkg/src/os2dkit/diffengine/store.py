"""Named parameter storage and checkpoint serialization.

Checkpoint layout (all little-endian):

    b"OS2DKIT-CKPT-1\\n"
    uint64 manifest length in bytes
    manifest JSON: {"tensors": {name: {shape, dtype, trainable, offset, nbytes}},
                    "extra": {...}}
    raw value blocks at the stated offsets (relative to the end of the manifest)

The manifest is serialized with sorted keys and blocks are written in sorted
name order, so save -> load -> save reproduces files byte for byte.
"""

from __future__ import annotations

import json
import os
from typing import Iterator

import numpy as np

from .tensor import Tensor

CKPT_MAGIC = b"OS2DKIT-CKPT-1\n"


class ParameterStore:
    """A unique-name map of tensors, each flagged trainable or frozen.

    Reads through get() are recorded in access_log, which lets tests assert
    structural properties such as two pipeline branches sharing one parameter
    set.  The extra dict carries JSON-serializable metadata and rides along in
    the checkpoint manifest.
    """

    def __init__(self) -> None:
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}
        self.extra: dict = {}
        self.access_log: set[str] = set()

    def add(self, name: str, data, trainable: bool = True, dtype=None) -> Tensor:
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        t = Tensor(np.asarray(data, dtype=dtype), requires_grad=trainable)
        self._entries[name] = t
        self._trainable[name] = bool(trainable)
        return t

    def get(self, name: str) -> Tensor:
        self.access_log.add(name)
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._entries[name]

    def trainable_items(self) -> Iterator[tuple[str, Tensor]]:
        for name, t in self.items():
            if self._trainable[name]:
                yield name, t

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.grad = None

    def reset_access_log(self) -> None:
        self.access_log = set()

    # -- serialization -------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        manifest: dict = {"tensors": {}, "extra": self.extra}
        blocks: list[bytes] = []
        offset = 0
        for name in self.names():
            t = self._entries[name]
            arr = np.ascontiguousarray(t.data.astype(t.data.dtype.newbyteorder("<"), copy=False))
            raw = arr.tobytes()
            manifest["tensors"][name] = {
                "shape": list(t.shape),
                "dtype": str(t.data.dtype.name),
                "trainable": self._trainable[name],
                "offset": offset,
                "nbytes": len(raw),
            }
            blocks.append(raw)
            offset += len(raw)
        mjson = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(np.uint64(len(mjson)).tobytes())
            f.write(mjson)
            for raw in blocks:
                f.write(raw)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ParameterStore":
        with open(path, "rb") as f:
            magic = f.read(len(CKPT_MAGIC))
            if magic != CKPT_MAGIC:
                raise ValueError(f"{path}: not an OS2DKIT-CKPT-1 checkpoint")
            (mlen,) = np.frombuffer(f.read(8), dtype="<u8")
            manifest = json.loads(f.read(int(mlen)).decode("utf-8"))
            data = f.read()
        store = cls()
        store.extra = manifest.get("extra", {})
        for name, meta in manifest["tensors"].items():
            dt = np.dtype(meta["dtype"]).newbyteorder("<")
            arr = np.frombuffer(data, dtype=dt, count=int(np.prod(meta["shape"], dtype=np.int64)) if meta["shape"] else 1,
                                offset=meta["offset"])
            arr = arr.reshape(meta["shape"]).astype(np.dtype(meta["dtype"]), copy=True)
            store.add(name, arr, trainable=meta["trainable"])
        return store
