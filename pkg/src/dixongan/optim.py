"""Adam with bias correction, and the DCKP checkpoint format."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor
from .errors import FormatError, StateError

DEFAULT_LR = 2e-4
DEFAULT_BETA1 = 0.5
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETA1
    beta2: float = DEFAULT_BETA2
    epsilon: float = DEFAULT_EPS
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, state: AdamState) -> None:
    """One in-place Adam update of ``params`` (name -> Tensor)."""
    for name, p in params.items():
        if p.grad is None:
            raise StateError(f"parameter {name!r} has no gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None:
            m = state.first_moment[name] = np.zeros_like(p.values)
            state.second_moment[name] = np.zeros_like(p.values)
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.values -= (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.epsilon)


def zero_grad(params):
    for p in params.values():
        p.grad = None


# -- DCKP ---------------------------------------------------------------------
#
# "DCKP" | u32 version | u32 len + UTF-8 JSON config
# u32 n_params, each: u32 len + name | u32 ndim | ndim*u32 shape | f32 data
# u32 n_states, each: u32 len + name | 4*f64 (lr, b1, b2, eps) | u64 step
#                     u32 n_moments, each: u32 len + name | f32 m | f32 v
# All fields little-endian.

CKPT_MAGIC = b"DCKP"
CKPT_VERSION = 1


def _put_str(out, s):
    b = s.encode("utf-8")
    out.append(struct.pack("<I", len(b)))
    out.append(b)


def _put_array(out, a):
    out.append(np.asarray(a, dtype="<f4").tobytes(order="C"))


class _Reader:
    def __init__(self, raw):
        self.raw = raw
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint")
        b = self.raw[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def array(self, shape):
        n = int(np.prod(shape)) if shape else 1
        return np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape).copy()


def encode_checkpoint(config: dict, params: dict, states: dict) -> bytes:
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    _put_str(out, json.dumps(config, sort_keys=True))
    out.append(struct.pack("<I", len(params)))
    for name, p in params.items():
        values = p.values if isinstance(p, Tensor) else np.asarray(p)
        _put_str(out, name)
        out.append(struct.pack("<I", values.ndim))
        out.append(struct.pack(f"<{values.ndim}I", *values.shape))
        _put_array(out, values)
    out.append(struct.pack("<I", len(states)))
    for sname, st in states.items():
        _put_str(out, sname)
        out.append(struct.pack("<4dQ", st.lr, st.beta1, st.beta2, st.epsilon, st.step))
        out.append(struct.pack("<I", len(st.first_moment)))
        for name, m in st.first_moment.items():
            _put_str(out, name)
            _put_array(out, m)
            _put_array(out, st.second_moment[name])
    return b"".join(out)


def decode_checkpoint(raw: bytes):
    """Inverse of :func:`encode_checkpoint`. Returns (config, params, states)
    where params maps names to float32 arrays."""
    r = _Reader(raw)
    if r.take(4) != CKPT_MAGIC:
        raise FormatError("not a DCKP checkpoint")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    config = json.loads(r.string())
    params = {}
    (n,) = r.unpack("<I")
    shapes = {}
    for _ in range(n):
        name = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        params[name] = r.array(shape)
        shapes[name] = shape
    states = {}
    (ns,) = r.unpack("<I")
    for _ in range(ns):
        sname = r.string()
        lr, b1, b2, eps, step = r.unpack("<4dQ")
        st = AdamState(lr, b1, b2, eps, step)
        (nm,) = r.unpack("<I")
        for _ in range(nm):
            name = r.string()
            shape = shapes.get(name)
            if shape is None:
                raise FormatError(f"moment for unknown parameter {name!r}")
            st.first_moment[name] = r.array(shape)
            st.second_moment[name] = r.array(shape)
        states[sname] = st
    if r.pos != len(raw):
        raise FormatError("trailing bytes after checkpoint")
    return config, params, states


def save_checkpoint(path, config, params, states):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(config, params, states))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
