"""The hierarchical teacher (shared + MI + SI modules) and the compact student.

Layer shapes for the default 24 x 1000 input::

    shared block 1   conv 1->36, kernel (24, 137)      -> (36, 1, 864) -> pool -> (36, 1, 288)  [feature tap]
    shared block 2   conv 36->72, kernel (1, 11) pad 5 -> (72, 1, 288) -> pool -> (72, 1, 96)
    branch blocks    36->72->144->288, widths 288 -> 96 -> 32 -> 10
    student          36 -> 72 -> 144, widths 288 -> 96 -> 32

Every block is conv -> ELU -> average pool (1, 3) / (1, 3); every head is a
global average over the remaining width, a dense layer and a softmax.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import tensor as T
from .losses import MI, N_MI, N_SI, SI
from .tensor import Tensor


@dataclass(frozen=True)
class ArchConfig:
    n_channels: int = 24
    n_samples: int = 1000
    temporal_kernel: int = 137
    kernel: int = 11
    pool: int = 3
    shared_widths: tuple[int, int] = (36, 72)
    branch_widths: tuple[int, int, int] = (72, 144, 288)
    student_widths: tuple[int, int, int] = (36, 72, 144)
    n_mi: int = N_MI
    n_si: int = N_SI

    @property
    def input_shape(self) -> tuple[int, int, int, int]:
        return (1, 1, self.n_channels, self.n_samples)


def small_arch() -> ArchConfig:
    """A shrunken clone (4 channels x 64 samples, narrow maps) for finite-difference checks."""
    return ArchConfig(n_channels=4, n_samples=64, temporal_kernel=9, kernel=3, pool=2,
                      shared_widths=(3, 4), branch_widths=(3, 4, 5), student_widths=(3, 4, 5))


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    """Holds child modules and named parameters in definition order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.size != p.data.size:
                raise ValueError(f"parameter {name!r}: expected {p.shape}, got {value.shape}")
            p.data = value.reshape(p.shape).astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


def count_parameters(model: Module) -> int:
    return int(sum(p.data.size for _, p in model.named_parameters()))


class ConvBlock(Module):
    def __init__(self, rng, in_maps, out_maps, kernel_hw, padding_hw, pool, dtype):
        super().__init__()
        kh, kw = kernel_hw
        self.padding = padding_hw
        self.pool = pool
        self.weight = self.add_param("weight", glorot(rng, (out_maps, in_maps, kh, kw), in_maps * kh * kw, out_maps * kh * kw, dtype))
        self.bias = self.add_param("bias", np.zeros(out_maps, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        h = T.conv2d(x, self.weight, self.bias, stride=(1, 1), padding=self.padding)
        return T.avgpool2d(T.elu(h), (1, self.pool), (1, self.pool))


class Head(Module):
    """Global average over height and width, then a dense projection to logits."""

    def __init__(self, rng, in_features, n_classes, dtype):
        super().__init__()
        self.weight = self.add_param("weight", glorot(rng, (n_classes, in_features), in_features, n_classes, dtype))
        self.bias = self.add_param("bias", np.zeros(n_classes, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        b, c = x.shape[:2]
        pooled = T.mean(x, axis=(2, 3)).reshape(b, c)
        return T.dense(pooled, self.weight, self.bias)


def _check_input(x: Tensor, arch: ArchConfig) -> None:
    expected = (arch.n_channels, arch.n_samples)
    if x.data.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != expected:
        raise ValueError(f"expected input (batch, 1, {expected[0]}, {expected[1]}), got {x.shape}")


class SharedModule(Module):
    def __init__(self, rng, arch: ArchConfig, dtype=np.float32):
        super().__init__()
        self.arch = arch
        w1, w2 = arch.shared_widths
        pad = arch.kernel // 2
        self.block1 = self.add_child("block1", ConvBlock(rng, 1, w1, (arch.n_channels, arch.temporal_kernel), (0, 0), arch.pool, dtype))
        self.block2 = self.add_child("block2", ConvBlock(rng, w1, w2, (1, arch.kernel), (0, pad), arch.pool, dtype))
        self.head = self.add_child("head", Head(rng, w2, 2, dtype))

    def forward(self, x: Tensor, temperature: float = 1.0):
        """Returns (paradigm probabilities, block-1 feature tap, paradigm logits)."""
        _check_input(x, self.arch)
        tap = self.block1(x)
        logits = self.head(self.block2(tap))
        return T.tempered_softmax(logits, temperature), tap, logits


class BranchModule(Module):
    def __init__(self, rng, arch: ArchConfig, n_classes: int, dtype=np.float32):
        super().__init__()
        self.arch = arch
        self.n_classes = n_classes
        pad = arch.kernel // 2
        widths = (arch.shared_widths[0],) + tuple(arch.branch_widths)
        self.blocks = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            self.blocks.append(self.add_child(f"block{i + 1}", ConvBlock(rng, a, b, (1, arch.kernel), (0, pad), arch.pool, dtype)))
        self.head = self.add_child("head", Head(rng, widths[-1], n_classes, dtype))

    def feature_shape(self) -> tuple[int, int, int]:
        a = self.arch
        width = (a.n_samples - a.temporal_kernel + 1) // a.pool
        return (a.shared_widths[0], 1, width)

    def forward(self, features: Tensor, temperature: float = 1.0):
        """Returns (class probabilities, logits)."""
        if features.data.ndim != 4 or features.shape[1:] != self.feature_shape():
            raise ValueError(f"branch expects features (batch, {', '.join(map(str, self.feature_shape()))}), got {features.shape}")
        h = features
        for block in self.blocks:
            h = block(h)
        logits = self.head(h)
        return T.tempered_softmax(logits, temperature), logits


@dataclass
class TeacherOutputs:
    paradigm_probs: Tensor
    mi_probs: Tensor
    si_probs: Tensor
    composite8: Tensor
    feature_tap: Tensor


class TeacherModel(Module):
    kind = 0

    def __init__(self, seed: int = 0, arch: ArchConfig = ArchConfig(), dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.arch = arch
        self.shared = self.add_child("shared", SharedModule(rng, arch, dtype))
        self.mi = self.add_child("mi", BranchModule(rng, arch, arch.n_mi, dtype))
        self.si = self.add_child("si", BranchModule(rng, arch, arch.n_si, dtype))

    def forward(self, x: Tensor, temperature: float = 1.0) -> TeacherOutputs:
        """Shared module, then both branches on the block-1 features; composite gates the branches."""
        paradigm, tap, _ = self.shared.forward(x, temperature)
        mi, _ = self.mi.forward(tap, temperature)
        si, _ = self.si.forward(tap, temperature)
        composite = T.concat([paradigm[:, MI:MI + 1] * mi, paradigm[:, SI:SI + 1] * si], axis=-1)
        return TeacherOutputs(paradigm, mi, si, composite, tap)


@dataclass
class TeacherPrediction:
    paradigm: np.ndarray
    class_index: np.ndarray
    joint: np.ndarray


def teacher_predict(outputs: TeacherOutputs) -> TeacherPrediction:
    """Argmax decisions (ties go to the lowest index, as ``np.argmax`` does).

    The paradigm comes from the shared module, the within-paradigm class from
    the branch the paradigm selects, and the joint label from the composite.
    """
    paradigm = np.argmax(np.atleast_2d(outputs.paradigm_probs.data), axis=-1)
    mi = np.argmax(np.atleast_2d(outputs.mi_probs.data), axis=-1)
    si = np.argmax(np.atleast_2d(outputs.si_probs.data), axis=-1)
    joint = np.argmax(np.atleast_2d(outputs.composite8.data), axis=-1)
    return TeacherPrediction(paradigm, np.where(paradigm == MI, mi, si), joint)


class StudentModel(Module):
    kind = 1

    def __init__(self, seed: int = 0, arch: ArchConfig = ArchConfig(), dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.arch = arch
        w1, w2, w3 = arch.student_widths
        pad = arch.kernel // 2
        self.block1 = self.add_child("block1", ConvBlock(rng, 1, w1, (arch.n_channels, arch.temporal_kernel), (0, 0), arch.pool, dtype))
        self.block2 = self.add_child("block2", ConvBlock(rng, w1, w2, (1, arch.kernel), (0, pad), arch.pool, dtype))
        self.block3 = self.add_child("block3", ConvBlock(rng, w2, w3, (1, arch.kernel), (0, pad), arch.pool, dtype))
        self.head = self.add_child("head", Head(rng, w3, arch.n_mi + arch.n_si, dtype))

    def forward(self, x: Tensor, temperature: float = 1.0):
        """Returns (8-way logits, tempered 8-way probabilities)."""
        _check_input(x, self.arch)
        logits = self.head(self.block3(self.block2(self.block1(x))))
        return logits, T.tempered_softmax(logits, temperature)


# ---------------------------------------------------------------------------
# checkpoint files
#
#   offset 0  b"HKDM"
#          4  u16 format version (1)
#          6  u8  model kind (0 teacher, 1 student)
#          7  repeated until EOF, one record per parameter in model order:
#               u16 name length, name bytes (utf-8),
#               4 x u32 shape (lower-rank shapes padded with trailing 1s),
#               prod(shape) float32 values, little-endian, C order
#
# All integers little-endian.

CHECKPOINT_MAGIC = b"HKDM"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: Module, path) -> None:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<HB", CHECKPOINT_VERSION, model.kind)]
    for name, p in model.named_parameters():
        raw = name.encode("utf-8")
        shape = tuple(p.shape) + (1,) * (4 - p.data.ndim)
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<4I", *shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, arch: ArchConfig = ArchConfig(), dtype=np.float32) -> Module:
    buf = Path(path).read_bytes()
    if len(buf) < 7:
        raise ValueError(f"{path}: truncated header, expected 7 bytes, got {len(buf)}")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic at offset 0: {buf[:4]!r}")
    version, kind = struct.unpack_from("<HB", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version} at offset 4")
    if kind not in (0, 1):
        raise ValueError(f"{path}: unknown model kind {kind} at offset 6")
    model = TeacherModel(arch=arch, dtype=dtype) if kind == 0 else StudentModel(arch=arch, dtype=dtype)
    state = {}
    off = 7
    while off < len(buf):
        if off + 2 > len(buf):
            raise ValueError(f"{path}: truncated record at offset {off}")
        (n,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + n].decode("utf-8")
        off += 2 + n
        if off + 16 > len(buf):
            raise ValueError(f"{path}: truncated shape for {name!r} at offset {off}")
        shape = struct.unpack_from("<4I", buf, off)
        off += 16
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(buf):
            raise ValueError(f"{path}: truncated values for {name!r} at offset {off}: need {nbytes} bytes, have {len(buf) - off}")
        state[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(shape)
        off += nbytes
    model.load_state_dict(state)
    return model
