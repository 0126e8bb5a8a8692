"""CBAM-CNN heartbeat classifier and its checkpoint format.

Each block is conv -> ReLU -> channel attention -> spatial attention ->
max-pool; a global average over width feeds a single logit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, InvalidSpec, ShapeMismatch
from .tensor import Tensor

CAM_VARIANTS = ("paper-eq2", "standard-cbam")
CKPT_MAGIC = b"ECGCBAM1"
CKPT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    width: int = 600
    in_channels: int = 1
    channels: tuple[int, ...] = (16, 32, 64, 128)
    kernel_size: int = 7
    pool_window: int = 2
    pool_stride: int = 2
    reductions: tuple[int, ...] = (4, 8, 8, 8)
    cam_variant: str = "paper-eq2"
    sam_kernel: int = 7

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "reductions", tuple(int(r) for r in self.reductions))
        self.validate()

    def validate(self) -> None:
        if not self.channels:
            raise InvalidSpec("at least one conv block is required")
        if len(self.reductions) != len(self.channels):
            raise InvalidSpec("one reduction ratio per block is required")
        for c, r in zip(self.channels, self.reductions):
            if r < 1 or c % r:
                raise InvalidSpec(f"reduction ratio {r} does not divide {c} channels")
        if self.cam_variant not in CAM_VARIANTS:
            raise InvalidSpec(f"cam_variant must be one of {CAM_VARIANTS}")
        if self.kernel_size % 2 == 0 or self.sam_kernel % 2 == 0:
            raise InvalidSpec("same padding needs odd kernel sizes")
        widths = self.block_widths()
        if widths[-1] < 1:
            raise InvalidSpec(f"width {self.width} collapses to zero after {len(self.channels)} pools")

    def block_widths(self) -> list[int]:
        """Input width, then the width after each block's pool (floor division)."""
        widths = [self.width]
        for _ in self.channels:
            w = widths[-1]
            if w < max(self.pool_window, self.sam_kernel):
                widths.append(0)
                break
            widths.append((w - self.pool_window) // self.pool_stride + 1)
        return widths

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        """Two small blocks on 40-sample inputs; used for gradient checks."""
        base = dict(width=40, channels=(4, 8), reductions=(2, 4))
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["reductions"] = list(self.reductions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class ModelParams:
    """Named learnable tensors plus the config they were built for."""

    config: ModelConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.tensors.items()},
        )

    def equals(self, other: "ModelParams") -> bool:
        if self.config != other.config or self.names() != other.names():
            return False
        return all(np.array_equal(self[k].data, other[k].data) for k in self.names())


def init_params(config: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}

    def add(name, data):
        tensors[name] = Tensor(data, requires_grad=True)

    c_prev = config.in_channels
    k = config.kernel_size
    for i, (c, r) in enumerate(zip(config.channels, config.reductions)):
        hidden = c // r
        add(f"block{i}.conv.weight", _glorot(rng, (c, c_prev, k), c_prev * k, c * k))
        add(f"block{i}.conv.bias", np.zeros(c))
        add(f"block{i}.cam.w1", _glorot(rng, (hidden, c), c, hidden))
        add(f"block{i}.cam.b1", np.zeros(hidden))
        add(f"block{i}.cam.w2", _glorot(rng, (c, hidden), hidden, c))
        add(f"block{i}.cam.b2", np.zeros(c))
        ks = config.sam_kernel
        add(f"block{i}.sam.weight", _glorot(rng, (1, 2, ks), 2 * ks, ks))
        add(f"block{i}.sam.bias", np.zeros(1))
        c_prev = c
    add("head.weight", _glorot(rng, (1, c_prev), c_prev, 1))
    add("head.bias", np.zeros(1))
    return ModelParams(config, tensors)


# ---------------------------------------------------------------- attention


def _cam_mlp(v: Tensor, w1, b1, w2, b2) -> Tensor:
    return T.dense(T.relu(T.dense(v, w1, b1)), w2, b2)


def cam_forward(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor,
                variant: str = "paper-eq2") -> Tensor:
    """Channel attention weights ``[N,C]`` for features ``x[N,C,W]``.

    The same two-layer MLP scores the width-averaged and width-maxed
    descriptors.  ``paper-eq2`` sums two sigmoids (range (0, 2));
    ``standard-cbam`` takes one sigmoid of the summed logits (range (0, 1)).
    """
    T._expect_ndim(x, 3, "cam_forward input")
    if w1.shape[1] != x.shape[1] or w2.shape[0] != x.shape[1]:
        raise ShapeMismatch(f"channel attention weights do not match {x.shape[1]} channels")
    avg = _cam_mlp(T.global_avgpool_w(x), w1, b1, w2, b2)
    mx = _cam_mlp(T.global_maxpool_w(x), w1, b1, w2, b2)
    if variant == "paper-eq2":
        return T.add(T.sigmoid(avg), T.sigmoid(mx))
    if variant == "standard-cbam":
        return T.sigmoid(T.add(avg, mx))
    raise InvalidSpec(f"unknown cam variant {variant!r}")


def sam_forward(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Spatial attention map ``[N,1,W]`` with values in (0, 1)."""
    T._expect_ndim(x, 3, "sam_forward input")
    ks = weight.shape[2]
    if weight.shape[:2] != (1, 2):
        raise ShapeMismatch(f"spatial kernel must be [1,2,K], got {weight.shape}")
    if x.shape[2] < ks:
        raise ShapeMismatch(f"spatial attention needs width >= {ks}, got {x.shape[2]}")
    pooled = T.concat_channels(T.channel_avg(x), T.channel_max(x))
    return T.sigmoid(T.conv1d(pooled, weight, bias, stride=1, padding=ks // 2))


def cbam_forward(x: Tensor, params: ModelParams, block: int) -> Tensor:
    p = params.tensors
    pre = f"block{block}"
    a = cam_forward(x, p[f"{pre}.cam.w1"], p[f"{pre}.cam.b1"], p[f"{pre}.cam.w2"], p[f"{pre}.cam.b2"],
                    params.config.cam_variant)
    x = T.mul_broadcast(x, a)
    m = sam_forward(x, p[f"{pre}.sam.weight"], p[f"{pre}.sam.bias"])
    return T.mul_broadcast(x, m)


def model_logits(batch: Tensor, params: ModelParams) -> Tensor:
    cfg = params.config
    if batch.ndim != 3 or batch.shape[1:] != (cfg.in_channels, cfg.width):
        raise ShapeMismatch(f"model expects [N,{cfg.in_channels},{cfg.width}], got {batch.shape}")
    x = batch
    pad = cfg.kernel_size // 2
    for i in range(len(cfg.channels)):
        x = T.conv1d(x, params[f"block{i}.conv.weight"], params[f"block{i}.conv.bias"], 1, pad)
        x = T.relu(x)
        x = cbam_forward(x, params, i)
        x = T.maxpool1d(x, cfg.pool_window, cfg.pool_stride)
    z = T.dense(T.global_avgpool_w(x), params["head.weight"], params["head.bias"])
    return T.reshape(z, (batch.shape[0],))


def model_forward(batch: Tensor, params: ModelParams) -> Tensor:
    """Hyperglycemia probabilities ``[N]`` for a batch ``[N,1,W]``."""
    return T.sigmoid(model_logits(batch, params))


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Probabilities for ``x[N,W]`` (or ``[N,1,W]``) without touching the tape."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    out = np.empty(len(x))
    with T.no_grad():
        for s in range(0, len(x), batch_size):
            out[s:s + batch_size] = model_forward(Tensor(x[s:s + batch_size]), params).data
    return out


# ---------------------------------------------------------------- checkpoints


def save_params(params: ModelParams, path, metadata: dict | None = None,
                extra: dict[str, np.ndarray] | None = None) -> None:
    """Write ``ECGCBAM1`` + u64 header length + JSON header + float64 payloads.

    ``extra`` holds non-learnable arrays (e.g. standardizer statistics)
    stored in the same tensor directory under their own names.
    """
    arrays = [(name, t.data) for name, t in params.tensors.items()]
    extra_names = []
    for name, arr in (extra or {}).items():
        arrays.append((name, np.asarray(arr, dtype=np.float64)))
        extra_names.append(name)
    directory, offset = [], 0
    for name, arr in arrays:
        nbytes = arr.size * 8
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "version": CKPT_VERSION,
        "config": params.config.to_dict(),
        "tensors": directory,
        "extra": extra_names,
        "metadata": metadata or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for _, arr in arrays:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, dict, dict[str, np.ndarray]]:
    """Return ``(params, metadata, extra_arrays)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except ValueError as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")
    payload = raw[16 + hlen:]
    try:
        config = ModelConfig.from_dict(header["config"])
    except (TypeError, InvalidSpec) as exc:
        raise FormatError(f"{path}: bad model config ({exc})") from None
    extra_names = set(header.get("extra", []))
    tensors, extra = {}, {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise FormatError(f"{path}: truncated payload for {entry['name']}")
        arr = np.frombuffer(payload[entry["offset"]:end], dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        if entry["name"] in extra_names:
            extra[entry["name"]] = arr
        else:
            tensors[entry["name"]] = Tensor(arr, requires_grad=True)
    params = ModelParams(config, tensors)
    expected = init_params(config, 0)
    for name in expected.names():
        if name not in tensors or tensors[name].shape != expected[name].shape:
            raise FormatError(f"{path}: tensor {name} missing or mis-shaped")
    return params, header.get("metadata", {}), extra


def load_params(path) -> ModelParams:
    return load_checkpoint(path)[0]
