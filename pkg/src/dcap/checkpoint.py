"""Checkpoint files.

Layout: UTF-8 ``key=value`` header lines, one ``tensor=<name> <shape>`` line
per tensor, a blank line, then the tensors as little-endian float32 in header
order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1
STAGES = ("pretrained", "metatrained")


class CheckpointError(ValueError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config: dict) -> str:
    return hashlib.sha256(_dumps(config).encode("utf-8")).hexdigest()


@dataclass
class Checkpoint:
    stage: str
    tensors: dict                      # name -> float32 array
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise CheckpointError(f"unknown stage {self.stage!r}")
        has_phi = any(k.startswith("phi.") for k in self.tensors)
        if self.stage == "pretrained" and has_phi:
            raise CheckpointError("pretrained checkpoints carry no attention regressor")
        self.tensors = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.tensors.items()}

    def to_bytes(self) -> bytes:
        lines = [
            f"format_version={FORMAT_VERSION}",
            f"stage={self.stage}",
            f"config_digest={config_digest(self.config)}",
            f"config={_dumps(self.config)}",
            f"history={_dumps(self.history)}",
            f"rng_state={_dumps(self.rng_state)}",
        ]
        for name, arr in self.tensors.items():
            if any(ch.isspace() for ch in name):
                raise CheckpointError(f"tensor name {name!r} contains whitespace")
            lines.append(f"tensor={name} {','.join(str(s) for s in arr.shape) or 'scalar'}")
        header = ("\n".join(lines) + "\n\n").encode("utf-8")
        body = b"".join(arr.astype("<f4").tobytes() for arr in self.tensors.values())
        return header + body

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        end = raw.find(b"\n\n")
        if end < 0:
            raise CheckpointError("missing blank line after header")
        meta, specs = {}, []
        for line in raw[:end].decode("utf-8").split("\n"):
            key, sep, value = line.partition("=")
            if not sep:
                raise CheckpointError(f"malformed header line {line!r}")
            if key == "tensor":
                name, shape = value.split(" ")
                specs.append((name, () if shape == "scalar" else tuple(int(s) for s in shape.split(","))))
            else:
                meta[key] = value
        if int(meta.get("format_version", -1)) != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {meta.get('format_version')}")
        config = json.loads(meta["config"])
        if config_digest(config) != meta["config_digest"]:
            raise CheckpointError("config digest mismatch")
        pos = end + 2
        tensors = {}
        for name, shape in specs:
            n = int(np.prod(shape)) if shape else 1
            chunk = raw[pos:pos + 4 * n]
            if len(chunk) != 4 * n:
                raise CheckpointError(f"truncated data for tensor {name}")
            tensors[name] = np.frombuffer(chunk, dtype="<f4").astype(np.float32).reshape(shape)
            pos += 4 * n
        if pos != len(raw):
            raise CheckpointError("trailing bytes after declared tensors")
        return cls(meta["stage"], tensors, config, json.loads(meta["history"]), json.loads(meta["rng_state"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
