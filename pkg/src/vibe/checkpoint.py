"""Model checkpoints stored as VIBE containers.

Parameters live under ``param/<name>``, optimiser moments under
``adam_m/<name>`` and ``adam_v/<name>``.  The manifest records the kind of
checkpoint, the architecture as JSON and the optimiser constants, so a
checkpoint rebuilds its model without outside configuration.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .data.container import read_container, write_container
from .errors import ConfigError, FormatError
from .nd import AdamW, Module
from .qformer import Mapper, QFormerConfig
from .vae import TSCVAE, VaeArchitecture

STAGE1, STAGE2 = "stage1", "stage2"


def state_hash(module: Module) -> str:
    """SHA-256 over parameter names, dtypes, shapes and bytes, in name order."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(str(p.data.dtype).encode())
        h.update(repr(p.data.shape).encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def file_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class Checkpoint:
    kind: str
    model: Module
    manifest: dict

    @property
    def architecture(self) -> dict:
        return json.loads(self.manifest["architecture"])


def save_checkpoint(path, kind: str, model: Module, architecture: Mapping,
                    optimizer: Optional[AdamW] = None, extra: Optional[Mapping[str, object]] = None) -> dict:
    tensors = {f"param/{name}": p.data for name, p in model.named_parameters()}
    manifest = {"kind": kind, "architecture": json.dumps(dict(architecture), sort_keys=True),
                "state_hash": state_hash(model)}
    if optimizer is not None:
        names = [name for name, _ in model.named_parameters()]
        for name, m, v in zip(names, optimizer.m, optimizer.v):
            tensors[f"adam_m/{name}"] = m
            tensors[f"adam_v/{name}"] = v
        manifest.update({"adam_step": optimizer.step_count, "adam_beta1": repr(optimizer.beta1),
                         "adam_beta2": repr(optimizer.beta2), "adam_eps": repr(optimizer.eps),
                         "adam_weight_decay": repr(optimizer.weight_decay)})
    manifest.update(extra or {})
    write_container(path, tensors, manifest)
    return manifest


def _build(kind: str, arch: dict) -> Module:
    rng = np.random.default_rng(0)       # weights are overwritten from the file
    if kind == STAGE1:
        return TSCVAE(VaeArchitecture.from_dict(arch), rng)
    if kind == STAGE2:
        return Mapper(QFormerConfig.from_dict(arch), rng)
    raise FormatError(f"unknown checkpoint kind {kind!r}")


def load_checkpoint(path, expect: Optional[str] = None) -> Checkpoint:
    c = read_container(path)
    kind = c.manifest.get("kind")
    if kind is None or "architecture" not in c.manifest:
        raise FormatError(f"{path}: not a model checkpoint")
    if expect is not None and kind != expect:
        raise ConfigError(f"{path}: expected a {expect} checkpoint, found {kind}")
    try:
        arch = json.loads(c.manifest["architecture"])
    except json.JSONDecodeError:
        raise FormatError(f"{path}: architecture entry is not valid JSON") from None
    model = _build(kind, arch)
    state = {name[len("param/"):]: arr for name, arr in c.tensors.items() if name.startswith("param/")}
    model.load_state_dict(state)
    if state_hash(model) != c.manifest.get("state_hash", state_hash(model)):
        raise FormatError(f"{path}: parameter hash does not match the manifest")
    return Checkpoint(kind, model, dict(c.manifest))
