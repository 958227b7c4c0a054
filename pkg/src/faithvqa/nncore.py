"""Small differentiable building blocks on top of torch autograd.

Everything runs in float64. Layers are ordinary ``nn.Module`` objects so the
usual optimizers apply; the extra pieces here are explicit recurrent cells
(so second-order gradients go through plain autograd ops), a ``grad`` helper
that reports disconnected inputs, a parameter store with freeze flags, and
the on-disk checkpoint format.
"""
from __future__ import annotations

import hashlib
import json
import warnings
from pathlib import Path

import numpy as np
import torch
from torch import nn

DTYPE = torch.float64
LEAKY_SLOPE = 0.01
CKPT_VERSION = 1

ACTIVATIONS = {
    "identity": lambda x: x,
    "tanh": torch.tanh,
    "sigmoid": torch.sigmoid,
    "leaky_relu": lambda x: nn.functional.leaky_relu(x, LEAKY_SLOPE),
    "softmax": lambda x: torch.softmax(x, dim=-1),
}


class DisconnectedGradientWarning(UserWarning):
    pass


class CheckpointError(RuntimeError):
    pass


class FC(nn.Module):
    """y = act(W x + b). Each instance owns its parameters."""

    def __init__(self, in_dim: int, out_dim: int, activation: str = "identity", name: str = "fc"):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"{name}: unknown activation {activation!r}")
        self.name = name
        self.activation = activation
        self.linear = nn.Linear(in_dim, out_dim, dtype=DTYPE)

    def forward(self, x):
        if x.shape[-1] != self.linear.in_features:
            raise ValueError(f"{self.name}: expected last dim {self.linear.in_features}, "
                             f"got shape {tuple(x.shape)}")
        return ACTIVATIONS[self.activation](self.linear(x))


class GRUCell(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.x2h = nn.Linear(in_dim, 3 * hidden, dtype=DTYPE)
        self.h2h = nn.Linear(hidden, 3 * hidden, dtype=DTYPE)

    def forward(self, x, h):
        if h.shape[-1] != self.hidden or x.shape[-1] != self.x2h.in_features:
            raise ValueError(f"gru_cell: shapes x={tuple(x.shape)} h={tuple(h.shape)} do not "
                             f"match (in={self.x2h.in_features}, hidden={self.hidden})")
        xr, xz, xn = self.x2h(x).chunk(3, -1)
        hr, hz, hn = self.h2h(h).chunk(3, -1)
        r = torch.sigmoid(xr + hr)
        z = torch.sigmoid(xz + hz)
        n = torch.tanh(xn + r * hn)
        return (1 - z) * n + z * h


class LSTMCell(nn.Module):
    def __init__(self, in_dim: int, hidden: int):
        super().__init__()
        self.hidden = hidden
        self.x2h = nn.Linear(in_dim, 4 * hidden, dtype=DTYPE)
        self.h2h = nn.Linear(hidden, 4 * hidden, dtype=DTYPE)

    def forward(self, x, state):
        h, c = state
        if h.shape[-1] != self.hidden or x.shape[-1] != self.x2h.in_features:
            raise ValueError(f"lstm_cell: shapes x={tuple(x.shape)} h={tuple(h.shape)} do not "
                             f"match (in={self.x2h.in_features}, hidden={self.hidden})")
        i, f, g, o = (self.x2h(x) + self.h2h(h)).chunk(4, -1)
        c = torch.sigmoid(f) * c + torch.sigmoid(i) * torch.tanh(g)
        h = torch.sigmoid(o) * torch.tanh(c)
        return h, c


def grad(scalar, wrt, create_graph: bool = False, retain_graph: bool | None = None):
    """Reverse-mode derivative of `scalar` w.r.t. a tensor or a sequence of tensors.

    With ``create_graph=True`` the results are themselves differentiable, which
    is what the faithfulness loss needs. Inputs the scalar does not depend on
    get a zero gradient and a DisconnectedGradientWarning.
    """
    single = isinstance(wrt, torch.Tensor)
    inputs = [wrt] if single else list(wrt)
    if scalar.numel() != 1:
        raise ValueError(f"grad needs a scalar, got shape {tuple(scalar.shape)}")
    if not scalar.requires_grad:
        grads = [None] * len(inputs)
    else:
        grads = torch.autograd.grad(scalar, inputs, create_graph=create_graph,
                                    retain_graph=retain_graph, allow_unused=True)
    out = []
    for x, g in zip(inputs, grads):
        if g is None:
            warnings.warn("scalar does not depend on an input; returning zero gradient",
                          DisconnectedGradientWarning, stacklevel=2)
            g = torch.zeros_like(x)
        out.append(g)
    return out[0] if single else out


class ParameterStore:
    """Named parameter view over a module with per-entry trainable flags."""

    def __init__(self, module: nn.Module):
        self.module = module

    def names(self) -> list:
        return [n for n, _ in self.module.named_parameters()]

    def __getitem__(self, name):
        return dict(self.module.named_parameters())[name]

    def shapes(self) -> dict:
        return {n: tuple(p.shape) for n, p in self.module.named_parameters()}

    def trainable(self) -> dict:
        return {n: p.requires_grad for n, p in self.module.named_parameters()}

    def freeze(self, prefix: str = "") -> None:
        for n, p in self.module.named_parameters():
            if n.startswith(prefix):
                p.requires_grad_(False)

    def trainable_parameters(self) -> list:
        return [p for p in self.module.parameters() if p.requires_grad]

    def snapshot(self) -> dict:
        return {n: p.detach().clone() for n, p in self.module.named_parameters()}


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_arrays(path, arrays: dict, meta: dict) -> None:
    """Write ``path/manifest.json`` plus ``path/params.bin`` (little-endian float64)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.ravel().tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = {"format": "faithvqa-checkpoint", "version": CKPT_VERSION, **meta,
                "params_sha256": hashlib.sha256(blob).hexdigest(), "params": entries}
    (path / "params.bin").write_bytes(blob)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable manifest ({e})") from None
    if manifest.get("format") != "faithvqa-checkpoint" or manifest.get("version") != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format/version")
    return manifest


def load_arrays(path):
    path = Path(path)
    manifest = read_manifest(path)
    raw = (path / "params.bin").read_bytes()
    if hashlib.sha256(raw).hexdigest() != manifest["params_sha256"]:
        raise CheckpointError(f"{path}: parameter blob is corrupt")
    flat = np.frombuffer(raw, dtype="<f8")
    arrays = {}
    for e in manifest["params"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        arrays[e["name"]] = flat[e["offset"]:e["offset"] + n].reshape(e["shape"]).copy()
    return manifest, arrays


def save_checkpoint(module: nn.Module, path, kind: str, config: dict,
                    extra: dict | None = None) -> None:
    arrays = {n: p.detach().cpu().numpy() for n, p in module.named_parameters()}
    frozen = sorted(n for n, p in module.named_parameters() if not p.requires_grad)
    save_arrays(path, arrays, {"kind": kind, "config": config,
                               "config_hash": config_hash(config), "frozen": frozen,
                               "extra": extra or {}})


def load_checkpoint(module: nn.Module, path, expected_hash: str | None = None,
                    allow_hash_mismatch: bool = False) -> dict:
    """Load parameters into `module` in place; returns the manifest."""
    path = Path(path)
    manifest, arrays = load_arrays(path)
    if manifest["config_hash"] != config_hash(manifest["config"]):
        raise CheckpointError(f"{path}: manifest config does not match its hash")
    if expected_hash is not None and manifest["config_hash"] != expected_hash \
            and not allow_hash_mismatch:
        raise CheckpointError(f"{path}: config hash {manifest['config_hash']} != expected "
                              f"{expected_hash} (pass allow_hash_mismatch to override)")
    params = dict(module.named_parameters())
    if set(params) != set(arrays):
        raise CheckpointError(f"{path}: parameter names differ from the model")
    frozen = set(manifest["frozen"])
    with torch.no_grad():
        for name, arr in arrays.items():
            p = params[name]
            if tuple(p.shape) != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}: "
                                      f"checkpoint {list(arr.shape)} vs model {list(p.shape)}")
            p.copy_(torch.from_numpy(arr))
            p.requires_grad_(name not in frozen)
    return manifest
