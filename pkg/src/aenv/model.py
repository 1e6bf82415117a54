"""Encoder CNN, projection head, downstream heads, Adam, checkpoints.

The encoder compresses a standardized 17 x T log-magnitude spectrogram
through six convolutional blocks (conv -> ReLU -> batch norm), dropout,
and a dense layer onto the 64-d unit sphere. The projection head maps
embeddings to 16-d latents for the contrastive objective only; downstream
heads are two 256-unit dense layers plus a task-specific output.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autodiff import Tensor, conv2d, dropout, l2_normalize, logsumexp

DEFAULT_KERNELS = ((1, 4), (1, 4), (1, 4), (1, 4), (2, 4), (2, 4))
DEFAULT_STRIDES = ((1, 2), (1, 2), (1, 2), (1, 2), (1, 2), (2, 2))


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype),
                  requires_grad=True)


class Conv2d:
    """Valid strided convolution, bias-free (every use is followed by a
    batch norm with a learnable shift)."""

    def __init__(self, in_ch, out_ch, kernel, stride, rng, dtype=np.float32):
        kh, kw = kernel
        self.stride = tuple(stride)
        self.weight = _kaiming_uniform(rng, (out_ch, in_ch, kh, kw),
                                       in_ch * kh * kw, dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.stride)

    def named_parameters(self, prefix=""):
        return [(f"{prefix}weight", self.weight)]

    def named_buffers(self, prefix=""):
        return []


class BatchNorm2d:
    """Per-channel batch normalization over (batch, freq, time).

    Train mode normalizes with batch statistics (gradients flow through
    them) and updates running averages; eval mode uses the running
    averages and never mutates state.
    """

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        shape = (1, -1, 1, 1)
        if training:
            mean = x.mean(axis=(0, 2, 3), keepdims=True)
            var = ((x - mean) ** 2.0).mean(axis=(0, 2, 3), keepdims=True)
            m = self.momentum
            self.running_mean = ((1 - m) * self.running_mean
                                 + m * mean.data.reshape(-1))
            self.running_var = ((1 - m) * self.running_var
                                + m * var.data.reshape(-1))
            xhat = (x - mean) / (var + self.eps).sqrt()
        else:
            mean = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
            xhat = (x - mean) / (var + self.eps).sqrt()
        return xhat * self.gamma.reshape(*shape) + self.beta.reshape(*shape)

    def named_parameters(self, prefix=""):
        return [(f"{prefix}gamma", self.gamma), (f"{prefix}beta", self.beta)]

    def named_buffers(self, prefix=""):
        return [(f"{prefix}running_mean", self.running_mean),
                (f"{prefix}running_var", self.running_var)]

    def set_buffer(self, name, value):
        setattr(self, name, value.astype(getattr(self, name).dtype))


class Dense:
    def __init__(self, in_dim, out_dim, rng, dtype=np.float32):
        self.weight = _kaiming_uniform(rng, (in_dim, out_dim), in_dim, dtype)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_parameters(self, prefix=""):
        return [(f"{prefix}weight", self.weight), (f"{prefix}bias", self.bias)]

    def named_buffers(self, prefix=""):
        return []


@dataclass
class EncoderConfig:
    kernels: tuple = DEFAULT_KERNELS
    strides: tuple = DEFAULT_STRIDES
    channels: int = 5
    embedding_dim: int = 64
    dropout_rate: float = 0.5
    in_freq: int = 17
    in_frames: int = 3999

    def conv_output_shape(self) -> tuple[int, int]:
        f, t = self.in_freq, self.in_frames
        for (kf, kt), (sf, st) in zip(self.kernels, self.strides):
            if kf > f or kt > t:
                raise ValueError(f"kernel {(kf, kt)} larger than input {(f, t)}")
            f = (f - kf) // sf + 1
            t = (t - kt) // st + 1
        return f, t


class Encoder:
    def __init__(self, config: EncoderConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        c = config.channels
        self.convs, self.norms = [], []
        in_ch = 1
        for kernel, stride in zip(config.kernels, config.strides):
            self.convs.append(Conv2d(in_ch, c, kernel, stride, rng, dtype))
            self.norms.append(BatchNorm2d(c, dtype=dtype))
            in_ch = c
        f, t = config.conv_output_shape()
        self.flat_dim = c * f * t
        self.dense = Dense(self.flat_dim, config.embedding_dim, rng, dtype)

    def forward(self, x: Tensor, training: bool = False,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
        for conv, norm in zip(self.convs, self.norms):
            x = norm(conv(x).relu(), training)
        x = x.reshape(x.shape[0], self.flat_dim)
        if training and self.config.dropout_rate > 0:
            if dropout_rng is None:
                raise ValueError("dropout requires an rng in train mode")
            x = dropout(x, self.config.dropout_rate, dropout_rng, training=True)
        return l2_normalize(self.dense(x), axis=1)

    def named_parameters(self, prefix="enc."):
        out = []
        for i, (conv, norm) in enumerate(zip(self.convs, self.norms)):
            out += conv.named_parameters(f"{prefix}conv{i}.")
            out += norm.named_parameters(f"{prefix}bn{i}.")
        out += self.dense.named_parameters(f"{prefix}dense.")
        return out

    def named_buffers(self, prefix="enc."):
        out = []
        for i, norm in enumerate(self.norms):
            out += norm.named_buffers(f"{prefix}bn{i}.")
        return out


class ProjectionHead:
    """64 -> 128 -> 16 with ReLU, output on the unit sphere. Used only
    during upstream contrastive training."""

    def __init__(self, rng, embedding_dim=64, hidden=128, latent_dim=16,
                 dtype=np.float32):
        self.fc1 = Dense(embedding_dim, hidden, rng, dtype)
        self.fc2 = Dense(hidden, latent_dim, rng, dtype)

    def forward(self, e: Tensor) -> Tensor:
        return l2_normalize(self.fc2(self.fc1(e).relu()), axis=1)

    def named_parameters(self, prefix="proj."):
        return (self.fc1.named_parameters(f"{prefix}fc1.")
                + self.fc2.named_parameters(f"{prefix}fc2."))

    def named_buffers(self, prefix="proj."):
        return []


TASKS = ("rt60", "c50", "volume")


class DownstreamHead:
    """Two 256-unit dense layers with ReLU, then a task output: scalar with
    a final ReLU for RT60 (non-negative predictions), linear scalar for
    C50, two-class softmax for volume."""

    def __init__(self, task: str, rng, embedding_dim=64, hidden=256,
                 dtype=np.float32):
        if task not in TASKS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        self.task = task
        self.fc1 = Dense(embedding_dim, hidden, rng, dtype)
        self.fc2 = Dense(hidden, hidden, rng, dtype)
        out_dim = 2 if task == "volume" else 1
        self.out = Dense(hidden, out_dim, rng, dtype)

    def _trunk(self, e: Tensor) -> Tensor:
        return self.fc2(self.fc1(e).relu()).relu()

    def forward_logits(self, e: Tensor) -> Tensor:
        """Pre-softmax scores (volume) or raw regression output. Losses are
        computed on this (training the RT60 head through its output ReLU
        kills the gradient permanently once every sample goes negative)."""
        return self.out(self._trunk(e))

    def forward(self, e: Tensor) -> Tensor:
        """Task prediction: probabilities for volume, scalars otherwise;
        the RT60 output passes the final ReLU so predictions are >= 0."""
        h = self.forward_logits(e)
        if self.task == "volume":
            h = (h - logsumexp(h, axis=1, keepdims=True)).exp()
        elif self.task == "rt60":
            h = h.relu()
        return h

    def named_parameters(self, prefix="head."):
        return (self.fc1.named_parameters(f"{prefix}fc1.")
                + self.fc2.named_parameters(f"{prefix}fc2.")
                + self.out.named_parameters(f"{prefix}out."))

    def named_buffers(self, prefix="head."):
        return []


def parameter_count(module) -> int:
    return sum(t.size for _, t in module.named_parameters())


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, named_params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        t = self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"__opt__.step": np.array([self.step_count], dtype=np.float32)}
        for name in self.m:
            out[f"__opt__.m.{name}"] = self.m[name]
            out[f"__opt__.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        self.step_count = int(arrays["__opt__.step"][0])
        for name in self.m:
            self.m[name] = arrays[f"__opt__.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = arrays[f"__opt__.v.{name}"].astype(self.v[name].dtype)


# ---------------------------------------------------------------------------
# checkpoint format: magic AENV, u32 version, count-prefixed named tensors
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"AENV"
_CKPT_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray],
                    sidecar: dict | None = None) -> None:
    """Little-endian binary checkpoint plus a JSON sidecar with config and
    RNG seeds."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype("<f4").tobytes())
    if sidecar is not None:
        with open(str(path) + ".json", "w") as f:
            json.dump(sidecar, f, indent=2, default=str)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict | None]:
    path = Path(path)
    arrays = {}
    with open(path, "rb") as f:
        if f.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", f.read(2))
            name = f.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", f.read(1))
            shape = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(shape)
            arrays[name] = data.copy()
    sidecar = None
    sidecar_path = Path(str(path) + ".json")
    if sidecar_path.exists():
        with open(sidecar_path) as f:
            sidecar = json.load(f)
    return arrays, sidecar


def state_dict(*modules) -> dict[str, np.ndarray]:
    out = {}
    for mod in modules:
        for name, p in mod.named_parameters():
            out[name] = p.data.copy()
        for name, buf in mod.named_buffers():
            out[name] = np.asarray(buf).copy()
    return out


def load_state_dict(arrays: dict[str, np.ndarray], *modules) -> None:
    for mod in modules:
        for name, p in mod.named_parameters():
            p.data = arrays[name].astype(p.data.dtype).reshape(p.data.shape)
        for name, _ in mod.named_buffers():
            _assign_buffer(mod, name, arrays[name])


def _assign_buffer(module, full_name: str, value: np.ndarray) -> None:
    # buffer names look like "enc.bn3.running_mean"
    for i, norm in enumerate(getattr(module, "norms", [])):
        for attr in ("running_mean", "running_var"):
            if full_name.endswith(f"bn{i}.{attr}"):
                norm.set_buffer(attr, value.reshape(getattr(norm, attr).shape))
                return
    raise KeyError(f"unknown buffer {full_name}")


def parameter_hash(module) -> int:
    """Order-stable hash over all parameter bytes; used to verify frozen or
    updated parameter sets."""
    import hashlib
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return int.from_bytes(h.digest()[:8], "big")


@dataclass
class UpstreamModel:
    """Encoder plus projection head with shared bookkeeping."""
    encoder: Encoder
    projection: ProjectionHead

    @classmethod
    def build(cls, config: EncoderConfig, rng: np.random.Generator,
              dtype=np.float32) -> "UpstreamModel":
        return cls(Encoder(config, rng, dtype),
                   ProjectionHead(rng, config.embedding_dim, dtype=dtype))

    def named_parameters(self):
        return self.encoder.named_parameters() + self.projection.named_parameters()

    def named_buffers(self):
        return self.encoder.named_buffers() + self.projection.named_buffers()
