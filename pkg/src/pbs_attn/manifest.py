"""Run manifests: where inputs come from, how to run, where results go.

Example::

    {
      "inputs": {"q": "q.pbst", "k": "k.pbst", "v": "v.pbst"},
      "workload": null,
      "config": {"block_size": 128, "segment_size": 256, "tau": 0.9,
                 "strategy": "key_permute", "precision": "f32"},
      "outputs": {"output": "out.pbst", "report": "report.json"}
    }

Exactly one of ``inputs`` and ``workload`` is set. Relative paths resolve
against the manifest file's directory.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .pipeline import PipelineConfig
from .tensor_core import read_tensor
from .workloads import WorkloadSpec, generate


@dataclass(frozen=True)
class RunManifest:
    config: PipelineConfig = PipelineConfig()
    inputs: dict | None = None
    workload: WorkloadSpec | None = None
    outputs: dict = field(default_factory=dict)
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self):
        if (self.inputs is None) == (self.workload is None):
            raise ConfigError("manifest needs exactly one of 'inputs' or 'workload'")
        if self.inputs is not None:
            missing = {"q", "k", "v"} - set(self.inputs)
            if missing:
                raise ConfigError(f"manifest inputs missing {sorted(missing)}")

    def to_dict(self):
        return {
            "inputs": dict(self.inputs) if self.inputs is not None else None,
            "workload": self.workload.to_dict() if self.workload is not None else None,
            "config": self.config.to_dict(),
            "outputs": dict(self.outputs),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d, base_dir="."):
        if not isinstance(d, dict):
            raise ConfigError("manifest must be a JSON object")
        unknown = set(d) - {"inputs", "workload", "config", "outputs"}
        if unknown:
            raise ConfigError(f"unknown manifest keys: {sorted(unknown)}")
        wl = d.get("workload")
        return cls(
            config=PipelineConfig.from_dict(d.get("config") or {}),
            inputs=d.get("inputs"),
            workload=WorkloadSpec.from_dict(wl) if wl is not None else None,
            outputs=d.get("outputs") or {},
            base_dir=base_dir,
        )

    @classmethod
    def from_json(cls, text, base_dir="."):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"manifest is not valid JSON: {exc}") from None
        return cls.from_dict(data, base_dir)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read(), os.path.dirname(os.path.abspath(path)))

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def load_tensors(self):
        """Return ``(Q, K, V)`` as ``(heads, N, d)`` stacks at the configured precision."""
        dtype = self.config.dtype
        if self.workload is not None:
            return generate(self.workload, self.config.precision)
        stacks = []
        for key in ("q", "k", "v"):
            t = read_tensor(self.resolve(self.inputs[key]))
            stacks.append((t[None] if t.ndim == 2 else t).astype(dtype, copy=False))
        q, k, v = stacks
        if not q.shape[0] == k.shape[0] == v.shape[0]:
            raise ShapeError(
                f"head counts differ: Q {q.shape[0]}, K {k.shape[0]}, V {v.shape[0]}")
        if q.shape[1:] != k.shape[1:] or k.shape[1] != v.shape[1]:
            raise ShapeError(f"inconsistent shapes Q {q.shape}, K {k.shape}, V {v.shape}")
        return tuple(np.ascontiguousarray(x) for x in (q, k, v))
