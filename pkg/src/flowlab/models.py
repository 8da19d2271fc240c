"""Conditional velocity networks and parameter-tree utilities.

One MLP architecture serves every role in the pipeline: the multi-step
teacher, the few-step student, and the proxy that tracks the student's
output distribution.  Hidden blocks are residual (affine -> layer norm ->
SiLU, added back to the stream) so taps at different depths carry both
coarse and fine information; the output layer starts at zero so an
untrained network predicts zero velocity.

Conditioning is a learned class embedding with one extra row reserved for
the null class (classifier-free guidance / dropped-conditioning analog),
addressed by passing class id -1.
"""

from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as nd
from .rng import Rng

NULL_CLASS = -1

DEFAULT_TAPS = (3, 4, 5, 6, 8, 10, 11)

# sinusoidal time features: geometric frequencies covering periods 1e-2..1,
# enough resolution to separate the 4-step schedule points
def _time_freqs(time_dim: int) -> np.ndarray:
    if time_dim < 2 or time_dim % 2:
        raise ValueError("time_dim must be a positive even number")
    return 2.0 * np.pi / np.geomspace(1.0, 0.01, time_dim // 2)


@dataclass(frozen=True)
class NetConfig:
    width: int = 64
    depth: int = 12
    n_classes: int = 8
    x_dim: int = 2
    time_dim: int = 16
    cond_dim: int = 16


def time_features(t, n: int, time_dim: int = 16) -> np.ndarray:
    """Sinusoidal embedding of a scalar or per-sample timestep."""
    if np.ndim(t) == 0:
        tcol = np.full((n, 1), float(t))
    else:
        tcol = np.asarray(t, dtype=np.float64).reshape(n, 1)
    ang = tcol * _time_freqs(time_dim)[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class VelocityNet:
    """Conditional velocity field v(x_t, t, c) with intermediate taps."""

    def __init__(self, cfg: NetConfig, params: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params

    @classmethod
    def init(cls, cfg: NetConfig, rng: Rng) -> "VelocityNet":
        w = cfg.width
        in_dim = cfg.x_dim + cfg.time_dim + cfg.cond_dim
        p: dict[str, np.ndarray] = {}
        p["in.w"] = rng.normal((in_dim, w)) / np.sqrt(in_dim)
        p["in.b"] = np.zeros(w)
        for i in range(cfg.depth):
            p[f"block{i}.w"] = rng.normal((w, w)) / np.sqrt(w)
            p[f"block{i}.b"] = np.zeros(w)
            p[f"block{i}.ln_g"] = np.ones(w)
            p[f"block{i}.ln_b"] = np.zeros(w)
        p["out.w"] = np.zeros((w, cfg.x_dim))
        p["out.b"] = np.zeros(cfg.x_dim)
        # one spare row for the null class
        p["cond_emb"] = rng.normal((cfg.n_classes + 1, cfg.cond_dim)) * 0.25
        return cls(cfg, p)

    def _cond_index(self, c, n: int) -> np.ndarray:
        idx = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,)).copy()
        if idx.size and (idx.min() < -1 or idx.max() >= self.cfg.n_classes):
            raise ValueError(f"class id out of range [0, {self.cfg.n_classes})")
        idx[idx == NULL_CLASS] = self.cfg.n_classes
        return idx

    def forward(self, x, t, c, params=None, taps=None):
        """Velocity prediction; with ``taps`` also the tapped block outputs.

        ``x`` may be a bare array (inference) or a tape Tensor; ``params``
        may likewise be the raw tree or a tape-wrapped one.  Both code
        paths are the same code.
        """
        p = self.params if params is None else params
        n = nd.value_of(x).shape[0]
        tf = time_features(t, n, self.cfg.time_dim)
        emb = nd.embed_rows(p["cond_emb"], self._cond_index(c, n))
        h = nd.concat_cols([x, tf, emb])
        h = nd.affine(h, p["in.w"], p["in.b"])
        tapset = None if taps is None else set(validate_taps(taps, self.cfg.depth))
        feats = []
        for i in range(self.cfg.depth):
            u = nd.affine(h, p[f"block{i}.w"], p[f"block{i}.b"])
            u = nd.layer_norm(u, p[f"block{i}.ln_g"], p[f"block{i}.ln_b"])
            u = nd.silu(u)
            h = nd.add(h, u)
            if tapset is not None and i in tapset:
                feats.append(h)
        v = nd.affine(h, p["out.w"], p["out.b"])
        if taps is None:
            return v
        return feats, v

    def clone(self) -> "VelocityNet":
        return VelocityNet(self.cfg, copy_params(self.params))

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


def validate_taps(taps, depth: int) -> tuple[int, ...]:
    taps = tuple(sorted(int(t) for t in taps))
    for t in taps:
        if t < 0 or t >= depth:
            raise ValueError(f"tap index {t} out of range for depth {depth}")
    return taps


# ---------------------------------------------------------------------------
# parameter-tree helpers

def copy_params(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


def freeze_params(params: dict[str, np.ndarray]) -> None:
    for v in params.values():
        v.flags.writeable = False


def params_fingerprint(params: dict[str, np.ndarray]) -> bytes:
    import hashlib

    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(np.ascontiguousarray(params[k]).tobytes())
    return h.digest()


def _check_trees(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> None:
    if a.keys() != b.keys():
        raise ValueError("parameter trees have different keys")
    for k in a:
        if a[k].shape != b[k].shape:
            raise ValueError(f"parameter {k!r}: shape {a[k].shape} vs {b[k].shape}")


def ema_update(shadow: dict[str, np.ndarray], live: dict[str, np.ndarray],
               beta: float) -> dict[str, np.ndarray]:
    """shadow' = beta * shadow + (1 - beta) * live, per tensor.

    Computed as live + beta * (shadow - live) so that shadow == live is an
    exact fixed point.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError("beta must be in [0, 1)")
    _check_trees(shadow, live)
    return {k: live[k] + beta * (shadow[k] - live[k]) for k in shadow}


def merge_interpolate(m1: dict[str, np.ndarray], m2: dict[str, np.ndarray],
                      ratio: float = 0.3) -> dict[str, np.ndarray]:
    """Weight-space interpolation; ``ratio`` is the weight on ``m1``.

    Endpoint ratios return exact copies and identical trees merge to an
    exact copy of themselves.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ValueError("ratio must be in [0, 1]")
    _check_trees(m1, m2)
    if ratio == 0.0:
        return copy_params(m2)
    if ratio == 1.0:
        return copy_params(m1)
    return {k: m2[k] + ratio * (m1[k] - m2[k]) for k in m1}


def quantize_weights(net: VelocityNet, bits: int) -> VelocityNet:
    """Symmetric per-tensor quantize-dequantize of every parameter tensor."""
    if bits not in (6, 8, 16):
        raise ValueError("bits must be one of 6, 8, 16")
    levels = 2 ** (bits - 1) - 1
    q: dict[str, np.ndarray] = {}
    for k, v in net.params.items():
        vmax = np.abs(v).max()
        if vmax == 0.0:
            q[k] = v.copy()
            continue
        delta = vmax / levels
        q[k] = np.round(v / delta) * delta
    return VelocityNet(net.cfg, q)


# ---------------------------------------------------------------------------
# checkpoint serialization
#
# Layout (all integers little-endian):
#   magic      4 bytes  b"FLWL"
#   version    u32
#   meta_len   u64, then meta_len bytes of UTF-8 JSON holding the model
#              hyperparameters, training-stage metadata and rng state
#   n_tensors  u32
#   per tensor: name_len u32, name bytes, ndim u32, dims u64 * ndim,
#               data as raw little-endian float64
# Round-trips are bit-exact.

CHECKPOINT_MAGIC = b"FLWL"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Malformed, truncated or incompatible checkpoint file."""


def save_checkpoint(net: VelocityNet, meta: dict, path) -> None:
    meta = dict(meta)
    meta["net_config"] = asdict(net.cfg)
    blob = json.dumps(meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(net.params)))
    for name, arr in net.params.items():
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        for d in arr.shape:
            buf.write(struct.pack("<Q", d))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def load_checkpoint(path) -> tuple[VelocityNet, dict]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (meta_len,) = struct.unpack("<Q", _read_exact(fh, 8))
        meta = json.loads(_read_exact(fh, meta_len).decode())
        cfg = NetConfig(**meta.pop("net_config"))
        (n_tensors,) = struct.unpack("<I", _read_exact(fh, 4))
        params: dict[str, np.ndarray] = {}
        for _ in range(n_tensors):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode()
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0]
                          for _ in range(ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = _read_exact(fh, count * 8)
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    expected = VelocityNet.init(cfg, Rng(0)).params
    if params.keys() != expected.keys():
        raise CheckpointError("tensor names disagree with hyperparameters")
    for k in expected:
        if params[k].shape != expected[k].shape:
            raise CheckpointError(
                f"tensor {k!r}: stored shape {params[k].shape} disagrees with "
                f"hyperparameters (expected {expected[k].shape})")
    return VelocityNet(cfg, params), meta
