"""Mask generator and U-Net discriminator built on :mod:`sscpgan.numerics`."""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor

SUPPORTED_RESOLUTIONS = (32, 48, 64, 128, 256)
MIN_BOTTLENECK = 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ArchConfig:
    resolution: int
    base_width: int = 32
    depth: int = 3
    max_width: int = 256

    def widths(self) -> list[int]:
        return [min(self.base_width * 2 ** i, self.max_width) for i in range(self.depth + 1)]

    def bottleneck_extent(self) -> int:
        return self.resolution // 2 ** self.depth

    def validate(self) -> "ArchConfig":
        if self.resolution not in SUPPORTED_RESOLUTIONS:
            raise ConfigError(f"unsupported resolution {self.resolution}; "
                              f"expected one of {SUPPORTED_RESOLUTIONS}")
        if self.depth < 1 or self.base_width < 1:
            raise ConfigError("depth and base_width must be positive")
        if self.resolution % 2 ** self.depth or self.bottleneck_extent() < MIN_BOTTLENECK:
            raise ConfigError(
                f"depth {self.depth} at {self.resolution}x{self.resolution} gives a "
                f"{self.resolution / 2 ** self.depth:g}-pixel bottleneck (< {MIN_BOTTLENECK})")
        return self


def max_depth(resolution: int) -> int:
    d = 0
    while resolution % 2 ** (d + 1) == 0 and resolution // 2 ** (d + 1) >= MIN_BOTTLENECK:
        d += 1
    return d


def _conv_init(rng, out_c, in_c, k, gain):
    fan_in = in_c * k * k
    return (rng.standard_normal((out_c, in_c, k, k)) * (gain / np.sqrt(fan_in))).astype(np.float32)


class _Net:
    kind = ""

    def __init__(self, config: ArchConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.config = config
        self.params = params
        self.buffers = buffers

    def _check_input(self, x: Tensor) -> None:
        r = self.config.resolution
        if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (r, r):
            raise ConfigError(f"{self.kind} configured for N x 3 x {r} x {r} input, got {x.shape}")

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray | None]:
        return {k: p.grad for k, p in self.params.items()}

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}/param/{k}": p.data for k, p in self.params.items()}
        out.update({f"{prefix}/buffer/{k}": v for k, v in self.buffers.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str) -> None:
        for k, p in self.params.items():
            p.data = arrays[f"{prefix}/param/{k}"].astype(p.dtype).copy()
        for k in self.buffers:
            self.buffers[k] = arrays[f"{prefix}/buffer/{k}"].astype(np.float32).copy()

    def as_dtype(self, dtype) -> None:
        for p in self.params.values():
            p.data = p.data.astype(dtype)


class Generator(_Net):
    """U-shaped mask network: conv-BN-ReLU levels, nearest upsampling, concat skips, sigmoid head."""

    kind = "generator"

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        self._check_input(x)
        p, d = self.params, self.config.depth
        h = x * 2.0 - 1.0
        skips = []
        for i in range(d + 1):
            if i:
                h = nx.avg_pool2(h)
            h = self._block(h, f"enc{i}", training)
            skips.append(h)
        for i in reversed(range(d)):
            h = nx.concat([nx.upsample2(h), skips[i]], axis=1)
            h = self._block(h, f"dec{i}", training)
        return nx.sigmoid(nx.conv2d(h, p["head.w"], p["head.b"]))

    def _block(self, h, name, training):
        p, b = self.params, self.buffers
        h = nx.conv2d(h, p[f"{name}.w"], pad=1)
        h = nx.batch_norm(h, p[f"{name}.gamma"], p[f"{name}.beta"], b[f"{name}.mean"],
                          b[f"{name}.var"], training)
        return nx.relu(h)

    __call__ = forward


class Discriminator(_Net):
    """U-Net with a global real/fake logit at the bottleneck and a per-pixel decoder head."""

    kind = "discriminator"

    def forward(self, x: Tensor, decode: bool = True, slope: float = 0.2):
        """Return ``(global_logits[N], perpixel_map[N,1,H,W] or None)``."""
        self._check_input(x)
        p, d = self.params, self.config.depth
        h = x * 2.0 - 1.0
        skips = []
        for i in range(d + 1):
            if i:
                h = nx.avg_pool2(h)
            h = nx.leaky_relu(nx.conv2d(h, p[f"enc{i}.w"], p[f"enc{i}.b"], pad=1), slope)
            skips.append(h)
        logit_map = nx.conv2d(h, p["global.w"], p["global.b"])
        logits = nx.reshape(nx.global_avg_pool(logit_map), (x.shape[0],))
        if not decode:
            return logits, None
        for i in reversed(range(d)):
            h = nx.concat([nx.upsample2(h), skips[i]], axis=1)
            h = nx.leaky_relu(nx.conv2d(h, p[f"dec{i}.w"], p[f"dec{i}.b"], pad=1), slope)
        perpixel = nx.sigmoid(nx.conv2d(h, p["pix.w"], p["pix.b"]))
        return logits, perpixel

    __call__ = forward


def init_network(kind: str, config: ArchConfig, seed: int):
    """Build a generator or discriminator with fan-in scaled normal weights.

    Weights feeding ReLU / leaky-ReLU use He scaling; the output heads use a
    small gain so the sigmoid starts near 0.5. Deterministic in ``seed``.
    """
    config.validate()
    widths = config.widths()
    d = config.depth
    rng = nx.rng_stream(seed, "init", 0 if kind == "generator" else 1)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    if kind == "generator":
        gain = np.sqrt(2.0)
        shapes = [(f"enc{i}", widths[i], 3 if i == 0 else widths[i - 1]) for i in range(d + 1)]
        shapes += [(f"dec{i}", widths[i], widths[i + 1] + widths[i]) for i in reversed(range(d))]
        for name, oc, ic in shapes:
            params[f"{name}.w"] = _conv_init(rng, oc, ic, 3, gain)
            params[f"{name}.gamma"] = np.ones(oc, np.float32)
            params[f"{name}.beta"] = np.zeros(oc, np.float32)
            buffers[f"{name}.mean"] = np.zeros(oc, np.float32)
            buffers[f"{name}.var"] = np.ones(oc, np.float32)
        params["head.w"] = _conv_init(rng, 1, widths[0], 1, 0.1)
        params["head.b"] = np.zeros(1, np.float32)
        cls = Generator
    elif kind == "discriminator":
        gain = np.sqrt(2.0 / (1 + 0.2 ** 2))
        for i in range(d + 1):
            ic = 3 if i == 0 else widths[i - 1]
            params[f"enc{i}.w"] = _conv_init(rng, widths[i], ic, 3, gain)
            params[f"enc{i}.b"] = np.zeros(widths[i], np.float32)
        params["global.w"] = _conv_init(rng, 1, widths[d], 1, 1.0)
        params["global.b"] = np.zeros(1, np.float32)
        for i in reversed(range(d)):
            params[f"dec{i}.w"] = _conv_init(rng, widths[i], widths[i + 1] + widths[i], 3, gain)
            params[f"dec{i}.b"] = np.zeros(widths[i], np.float32)
        params["pix.w"] = _conv_init(rng, 1, widths[0], 1, 0.1)
        params["pix.b"] = np.zeros(1, np.float32)
        cls = Discriminator
    else:
        raise ConfigError(f"unknown network kind {kind!r}")
    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    return cls(config, tensors, buffers)


def generator_forward(gen: Generator, images: Tensor, training: bool = False) -> Tensor:
    return gen.forward(images, training)


def discriminator_forward(disc: Discriminator, images: Tensor, decode: bool = True):
    return disc.forward(images, decode)


# --------------------------------------------------------------------------
# named-array archive
#
#   magic   b"SSCPARC\0"
#   u32     format version
#   u32     metadata length, then that many bytes of UTF-8 JSON
#   u32     array count
#   per array: u16 name length, name (UTF-8), u8 ndim, ndim x u32 extents,
#              prod(extents) x little-endian float32
# Arrays are written in sorted name order, so equal contents give equal bytes.

ARCHIVE_MAGIC = b"SSCPARC\0"
ARCHIVE_VERSION = 1


class ArchiveError(ValueError):
    pass


def dumps_archive(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(ARCHIVE_MAGIC)
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<II", ARCHIVE_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        enc = name.encode()
        buf.write(struct.pack("<HB", len(enc), arr.ndim))
        buf.write(enc)
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_archive(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if blob[:8] != ARCHIVE_MAGIC:
        raise ArchiveError("not a parameter archive (bad magic)")
    version, mlen = struct.unpack_from("<II", blob, 8)
    if version != ARCHIVE_VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    pos = 16
    meta = json.loads(blob[pos:pos + mlen].decode())
    pos += mlen
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", blob, pos)
        pos += 3
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
        pos += 4 * size
    return arrays, meta


def save_network(net: _Net, path) -> None:
    meta = {"kind": net.kind, "arch": asdict(net.config)}
    with open(path, "wb") as fh:
        fh.write(dumps_archive(net.state_arrays("net"), meta))


def load_network(path):
    with open(path, "rb") as fh:
        arrays, meta = loads_archive(fh.read())
    net = init_network(meta["kind"], ArchConfig(**meta["arch"]), seed=0)
    net.load_state_arrays(arrays, "net")
    return net
