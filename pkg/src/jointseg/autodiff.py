"""
Reverse-mode differentiation over a recorded tape.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad``, are appended to the tape together with a
closure computing their input adjoints. ``Tape.backward`` replays the record in
reverse. Outside a tape nothing is recorded, which keeps inference cheap.

Parameters live in a :class:`ParamStore`; each one is flagged as belonging to
the segmentation network or to the auxiliary parts (completion decoder,
point-voxel interaction, loss weights). :class:`Adam` updates them in place.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, FormatError

_ACTIVE = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        from .dense import add
        return add(self, other)

    def __mul__(self, other):
        from .dense import scale
        return scale(self, other)

    __rmul__ = __mul__

    def item(self):
        return float(self.data.reshape(-1)[0])


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def record(out_data, parents, backward):
    """Wrap an op result; register it on the active tape when gradients can flow."""
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tuple(parents), backward))
    return out


@dataclass
class _Node:
    out: Tensor
    parents: tuple
    backward: object


class Tape:
    """Topologically ordered record of executed operations."""

    def __init__(self):
        self.nodes = []
        self._done = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def backward(self, loss):
        """Propagate d(loss)/d(.) to every tensor reached; results land in ``.grad``."""
        if self._done:
            raise ContractError("tape already consumed by a previous backward")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not any(node.out is loss for node in self.nodes):
            raise ContractError("loss was not produced on this tape; run the forward pass first")
        pending = {id(loss): (loss, np.ones_like(loss.data))}
        for node in reversed(self.nodes):
            entry = pending.pop(id(node.out), None)
            if entry is None:
                continue
            g = entry[1]
            node.out.grad = g
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = (parent, pending[key][1] + pg)
                else:
                    pending[key] = (parent, pg)
        for tensor, g in pending.values():
            tensor.grad = g if tensor.grad is None else tensor.grad + g
        self._done = True
        self.nodes = []


@dataclass
class Param:
    tensor: Tensor
    seg: bool
    lr_mult: float = 1.0
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros_like(self.tensor.data)
        if self.v is None:
            self.v = np.zeros_like(self.tensor.data)


@dataclass
class ParamStore:
    """Every trainable tensor of the model, with the segmentation/auxiliary partition."""

    params: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value, seg, lr_mult=1.0):
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = Param(t, bool(seg), float(lr_mult))
        return t

    def __getitem__(self, name):
        return self.params[name].tensor

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def names(self, seg=None):
        return [n for n, p in self.params.items() if seg is None or p.seg == seg]

    def zero_grad(self):
        for p in self.params.values():
            p.tensor.grad = None

    def grads(self):
        """Gradient per parameter name; parameters the loss never reached get zeros."""
        return {
            n: (p.tensor.grad if p.tensor.grad is not None else np.zeros_like(p.tensor.data))
            for n, p in self.params.items()
        }

    def values(self):
        return {n: p.tensor.data.copy() for n, p in self.params.items()}

    def load_values(self, values):
        for n, v in values.items():
            self.params[n].tensor.data = np.array(v, dtype=np.float64)

    def count(self, seg=None):
        return int(sum(self.params[n].tensor.data.size for n in self.names(seg)))


def adam_step(store, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every parameter, scaled by its lr multiplier."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.params.items():
        g = grads[name]
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / c1
        v_hat = p.v / c2
        p.tensor.data = p.tensor.data - lr * p.lr_mult * m_hat / (np.sqrt(v_hat) + eps)


def lr_schedule(epoch, base=1e-3, decay=0.7, every=5):
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return base * decay ** (epoch // every)


# Checkpoint layout (all little-endian):
#   b"JSCK", u32 version, u64 optimizer step, u32 tensor count, then per tensor:
#   u16 name length, utf-8 name, u8 flags (bit 0: segmentation partition),
#   f64 lr multiplier, u8 ndim, u32 * ndim shape,
#   f64 * size values, f64 * size first moment, f64 * size second moment.
CKPT_MAGIC = b"JSCK"
CKPT_VERSION = 1


def save_checkpoint(store, path):
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(store))


def encode_checkpoint(store):
    out = [CKPT_MAGIC, struct.pack("<IQI", CKPT_VERSION, store.step, len(store.params))]
    for name, p in store.params.items():
        raw = name.encode("utf-8")
        data = p.tensor.data
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack("<BdB", 1 if p.seg else 0, p.lr_mult, data.ndim))
        out.append(struct.pack(f"<{data.ndim}I", *data.shape))
        for arr in (data, p.m, p.v):
            out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


def decode_checkpoint(buf):
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"checkpoint truncated: wanted {n} bytes, {len(buf) - pos} left", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4) != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)", 0)
    version, step, count = struct.unpack("<IQI", take(16))
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    store = ParamStore(step=step)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        flags, lr_mult, ndim = struct.unpack("<BdB", take(10))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays = [np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
                  for _ in range(3)]
        store.add(name, arrays[0], seg=bool(flags & 1), lr_mult=lr_mult)
        store.params[name].m = arrays[1]
        store.params[name].v = arrays[2]
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes after checkpoint body", pos)
    return store
