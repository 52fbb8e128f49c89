"""Multi-scale fusion network built on the reverse-mode engine.

Layout of one forward pass::

    fused inputs (3*n_inputs ch) -> feature extractor -> bicubic feature pyramid
    scale 1 (coarsest):  v = feat_1
    scale l > 1:         v = concat(feat_l, up2(carry_{l-1}))
    carry_l = group(entry_conv(v))      # every layer of the scale net but the head
    Z_l     = sigmoid(head_conv(carry_l))

A group is ``x + s*conv(DAB_n(...DAB_1(merge(x, up(DAB(down(x)))))))`` and a
dual-attention block is ``x + s*compress(concat(CA(u), SA(u)))`` with
``u = conv(lrelu(conv(x)))``.  The residual scale ``s`` keeps activations
bounded at initialization so the output sigmoid starts unsaturated.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ParamFileError, ShapeError

FORMAT_MAGIC = b"FUSELAB\x00"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    levels: int = 3
    base_channels: int = 16
    msrrg_per_scale: int = 1
    dabs_per_msrrg: int = 2
    kernel: int = 3
    leaky_slope: float = 0.2
    ca_reduction: int = 4
    n_inputs: int = 2
    half_branch: bool = True
    deep_supervision: bool = False
    res_scale: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.res_scale <= 1.0:
            raise ValueError("res_scale must lie in (0, 1]")
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.base_channels < 4:
            raise ValueError("base_channels must be >= 4")
        for name in ("msrrg_per_scale", "dabs_per_msrrg", "ca_reduction", "n_inputs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be a positive odd size")

    @property
    def reduced_channels(self) -> int:
        return max(1, self.base_channels // self.ca_reduction)


# -- parameters ---------------------------------------------------------------

def _dab_shapes(prefix: str, cfg: NetConfig) -> list:
    c, k, r = cfg.base_channels, cfg.kernel, cfg.reduced_channels
    return [
        (f"{prefix}.conv1", (c, c, k, k)),
        (f"{prefix}.conv2", (c, c, k, k)),
        (f"{prefix}.ca_reduce", (r, c, 1, 1)),
        (f"{prefix}.ca_restore", (c, r, 1, 1)),
        (f"{prefix}.sa", (1, 2, k, k)),
        (f"{prefix}.compress", (c, 2 * c, 1, 1)),
    ]


def conv_shapes(cfg: NetConfig) -> list:
    """Every conv layer as ``(name, weight_shape)`` in a fixed order."""
    c, k = cfg.base_channels, cfg.kernel
    shapes = [("fe.conv1", (c, 3 * cfg.n_inputs, k, k)), ("fe.conv2", (c, c, k, k))]
    for lvl in range(1, cfg.levels + 1):
        s = f"s{lvl}"
        shapes.append((f"{s}.entry", (c, c if lvl == 1 else 2 * c, k, k)))
        for g in range(cfg.msrrg_per_scale):
            grp = f"{s}.g{g}"
            if cfg.half_branch:
                shapes += _dab_shapes(f"{grp}.half", cfg)
                shapes.append((f"{grp}.merge", (c, 2 * c, 1, 1)))
            for d in range(cfg.dabs_per_msrrg):
                shapes += _dab_shapes(f"{grp}.dab{d}", cfg)
            shapes.append((f"{grp}.out", (c, c, k, k)))
        shapes.append((f"{s}.head", (3, c, k, k)))
    return shapes


def param_shapes(cfg: NetConfig) -> dict:
    out = {}
    for name, wshape in conv_shapes(cfg):
        out[f"{name}.w"] = wshape
        out[f"{name}.b"] = (wshape[0],)
    return out


class NetParams:
    """Named learnable tensors of one network plus its configuration."""

    def __init__(self, cfg: NetConfig, arrays: dict, seed: int | None = None):
        expected = param_shapes(cfg)
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ShapeError(f"parameter names do not match config (missing {missing[:3]}, extra {extra[:3]})")
        self.cfg = cfg
        self.seed = seed
        self.tensors = {}
        for name, shape in expected.items():
            arr = np.array(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            self.tensors[name] = ad.parameter(arr)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def names(self) -> list:
        return list(self.tensors)

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self) -> "NetParams":
        return NetParams(self.cfg, {k: v.copy() for k, v in self.arrays().items()}, self.seed)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def equal(self, other: "NetParams") -> bool:
        return (self.cfg == other.cfg and self.names() == other.names()
                and all(np.array_equal(self[k].data, other[k].data) for k in self.names()))


def init_params(cfg: NetConfig = NetConfig(), seed: int = 0) -> NetParams:
    """Fan-in scaled uniform weights (variance 2/fan_in) and zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, wshape in conv_shapes(cfg):
        fan_in = wshape[1] * wshape[2] * wshape[3]
        bound = np.sqrt(6.0 / fan_in)
        arrays[f"{name}.w"] = rng.uniform(-bound, bound, size=wshape)
        arrays[f"{name}.b"] = np.zeros(wshape[0])
    return NetParams(cfg, arrays, seed)


def zero_residual_branches(params: NetParams) -> NetParams:
    """Copy of ``params`` with every residual branch's last conv zeroed."""
    out = params.copy()
    for name in out.names():
        layer = name.rsplit(".", 1)[0]
        if layer.endswith(".compress") or (layer.endswith(".out") and ".g" in layer):
            out[name].data[...] = 0.0
    return out


# -- building blocks ----------------------------------------------------------

def conv(x: Tensor, params: NetParams, name: str) -> Tensor:
    return ad.conv2d(x, params[f"{name}.w"], params[f"{name}.b"])


def channel_attention(u: Tensor, params: NetParams, prefix: str, slope: float) -> Tensor:
    z = ad.global_avg_pool(u)
    z = ad.leaky_relu(conv(z, params, f"{prefix}.ca_reduce"), slope)
    gate = ad.sigmoid(conv(z, params, f"{prefix}.ca_restore"))
    return ad.mul(u, gate)


def spatial_attention(u: Tensor, params: NetParams, prefix: str) -> Tensor:
    pooled = ad.concat([ad.channel_avg_pool(u), ad.channel_max_pool(u)], axis=1)
    gate = ad.sigmoid(conv(pooled, params, f"{prefix}.sa"))
    return ad.mul(u, gate)


def dab_forward(x: Tensor, params: NetParams, prefix: str) -> Tensor:
    """Dual-attention block with a residual skip."""
    slope = params.cfg.leaky_slope
    if x.shape[1] != params.cfg.base_channels:
        raise ShapeError(f"DAB expects {params.cfg.base_channels} channels, got {x.shape[1]}")
    u = conv(ad.leaky_relu(conv(x, params, f"{prefix}.conv1"), slope), params, f"{prefix}.conv2")
    both = ad.concat([channel_attention(u, params, prefix, slope), spatial_attention(u, params, prefix)], axis=1)
    return ad.add(x, conv(both, params, f"{prefix}.compress") * params.cfg.res_scale)


def msrrg_forward(x: Tensor, params: NetParams, prefix: str) -> Tensor:
    """Residual group mixing a native-resolution path with a half-resolution DAB."""
    cfg = params.cfg
    h = x
    if cfg.half_branch:
        size = x.shape[2:]
        half = ad.bilinear_resample(x, (-(-size[0] // 2), -(-size[1] // 2)))
        half = ad.bilinear_resample(dab_forward(half, params, f"{prefix}.half"), size)
        h = conv(ad.concat([x, half], axis=1), params, f"{prefix}.merge")
    for d in range(cfg.dabs_per_msrrg):
        h = dab_forward(h, params, f"{prefix}.dab{d}")
    return ad.add(x, conv(h, params, f"{prefix}.out") * cfg.res_scale)


def feature_extract(x: Tensor, params: NetParams) -> Tensor:
    cfg = params.cfg
    if x.ndim != 4 or x.shape[1] != 3 * cfg.n_inputs:
        raise ShapeError(f"expected (N, {3 * cfg.n_inputs}, H, W) input, got {x.shape}")
    h = ad.leaky_relu(conv(x, params, "fe.conv1"), cfg.leaky_slope)
    return conv(h, params, "fe.conv2")


def build_feature_pyramid(features: Tensor, levels: int) -> list:
    """Coarse-to-fine list of bicubic half-steps; the last entry is ``features``."""
    h, w = features.shape[2:]
    if levels < 1 or (levels > 1 and min(h, w) < 2 ** (levels - 1)):
        raise ShapeError(f"{levels} levels infeasible for {h}x{w} features")
    pyr = [features]
    for _ in range(levels - 1):
        pyr.append(ad.bicubic_downsample(pyr[-1], 2))
    return pyr[::-1]


def fuse_scale(feat: Tensor, prev: Tensor | None, params: NetParams, level: int):
    """One scale of the coarse-to-fine fusion; returns ``(image, carry)``."""
    if (prev is None) != (level == 1):
        raise ValueError("previous features must be given exactly when level > 1")
    s = f"s{level}"
    v = feat if prev is None else ad.concat([feat, ad.bilinear_resample(prev, feat.shape[2:])], axis=1)
    h = conv(v, params, f"{s}.entry")
    for g in range(params.cfg.msrrg_per_scale):
        h = msrrg_forward(h, params, f"{s}.g{g}")
    image = ad.sigmoid(conv(h, params, f"{s}.head"))
    return image, h


@dataclass
class NetOutput:
    fused: Tensor
    scales: list

    def image(self) -> np.ndarray:
        return tensor_to_image(self.fused)


def images_to_tensor(images) -> Tensor:
    """Concatenate ``(H, W, 3)`` images along channels into ``(1, 3k, H, W)``."""
    arr = np.concatenate([np.asarray(im, dtype=np.float64).transpose(2, 0, 1) for im in images], axis=0)
    return Tensor(arr[None])


def tensor_to_image(t: Tensor) -> np.ndarray:
    return t.data[0].transpose(1, 2, 0).copy()


def forward(inputs, params: NetParams) -> NetOutput:
    """Fuse a list of images (or a prepared input tensor) coarse to fine."""
    cfg = params.cfg
    x = inputs if isinstance(inputs, Tensor) else images_to_tensor(inputs)
    feats = build_feature_pyramid(feature_extract(x, params), cfg.levels)
    carry, scales = None, []
    for lvl, feat in enumerate(feats, start=1):
        image, carry = fuse_scale(feat, carry, params, lvl)
        scales.append(image)
    return NetOutput(scales[-1], scales)


def fuse(images, params: NetParams) -> np.ndarray:
    return forward(images, params).image()


# -- serialization ------------------------------------------------------------
# layout: magic(8) | version u32 | header_len u32 | JSON header | float64 LE blobs

def save_params(params: NetParams, path) -> None:
    entries, offset = [], 0
    for name, arr in params.arrays().items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps({"config": asdict(params.cfg), "seed": params.seed, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in params.arrays().values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path, cfg: NetConfig | None = None) -> NetParams:
    """Read a parameter file; when ``cfg`` is given it must match the stored one."""
    raw = Path(path).read_bytes()
    if raw[:8] != FORMAT_MAGIC:
        raise ParamFileError(f"{path}: bad magic bytes")
    if len(raw) < 16:
        raise ParamFileError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != FORMAT_VERSION:
        raise ParamFileError(f"{path}: unsupported format version {version}")
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
        stored = NetConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as exc:
        raise ParamFileError(f"{path}: unreadable header ({exc})") from exc
    if cfg is not None and cfg != stored:
        raise ParamFileError(f"{path}: stored config {stored} does not match requested {cfg}")
    body = raw[16 + hlen:]
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape))
        start = entry["offset"]
        if start + 8 * n > len(body):
            raise ParamFileError(f"{path}: tensor {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(body, dtype="<f8", count=n, offset=start).reshape(shape)
    try:
        return NetParams(stored, arrays, header.get("seed"))
    except ShapeError as exc:
        raise ParamFileError(f"{path}: {exc}") from exc
