"""Versioned model container: magic, JSON header, little-endian float32 parameter blocks.

Layout::

    b"OUDM1\\0" | uint32 header length | UTF-8 JSON header | float32 blocks

The header lists each block's name and shape in storage order. Trees are not
tensors, so tree-based kinds keep their preorder node lists in the header.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OUDM1\0"
KINDS = ("lstm", "dense", "logreg", "tree", "forest")


class ArtifactError(ValueError):
    pass


class FingerprintMismatch(ArtifactError):
    pass


@dataclass
class ModelArtifact:
    kind: str
    config: dict
    params: dict
    fingerprint: str
    seed: int
    metrics: dict = field(default_factory=dict)
    trees: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ArtifactError(f"unknown model kind {self.kind!r}")
        # stored precision is the scoring precision, before and after a round trip
        self.params = {k: np.asarray(v, dtype=np.float32) for k, v in self.params.items()}

    def check(self, fingerprint):
        if fingerprint is not None and fingerprint != self.fingerprint:
            raise FingerprintMismatch(
                f"artifact trained on feature space {self.fingerprint[:12]}, "
                f"refusing to score space {fingerprint[:12]}")

    def to_bytes(self) -> bytes:
        names = list(self.params)
        header = {
            "kind": self.kind, "config": self.config, "fingerprint": self.fingerprint,
            "seed": self.seed, "metrics": self.metrics, "trees": self.trees,
            "blocks": [[n, list(np.shape(self.params[n]))] for n in names],
        }
        head = json.dumps(header, sort_keys=True).encode("utf-8")
        body = b"".join(np.ascontiguousarray(self.params[n], dtype="<f4").tobytes()
                        for n in names)
        return MAGIC + struct.pack("<I", len(head)) + head + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ModelArtifact":
        if raw[:len(MAGIC)] != MAGIC:
            raise ArtifactError("not a model artifact (bad magic)")
        pos = len(MAGIC)
        if len(raw) < pos + 4:
            raise ArtifactError("truncated artifact header")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        if len(raw) < pos + n:
            raise ArtifactError("truncated artifact header")
        try:
            header = json.loads(raw[pos:pos + n].decode("utf-8"))
        except ValueError as exc:
            raise ArtifactError(f"corrupt artifact header: {exc}") from None
        pos += n
        params = {}
        for name, shape in header["blocks"]:
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 4 * count > len(raw):
                raise ArtifactError(f"truncated artifact while reading block {name}")
            params[name] = np.frombuffer(raw, dtype="<f4", count=count, offset=pos) \
                .astype(np.float32).reshape(shape)
            pos += 4 * count
        if pos != len(raw):
            raise ArtifactError(f"{len(raw) - pos} trailing bytes after parameter blocks")
        return cls(header["kind"], header["config"], params, header["fingerprint"],
                   header["seed"], header["metrics"], header["trees"])

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ModelArtifact":
        return cls.from_bytes(Path(path).read_bytes())
