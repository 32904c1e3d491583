"""Small fully convolutional segmentation network shared by teacher and student.

The backbone is a stack of 3×3 convolutions each followed by a leaky
rectifier; the head is a per-pixel affine map to K logits. Teacher and student
differ only in ``in_channels``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import fileformat
from . import ndcore as nd
from .ndcore import Var

CHECKPOINT_VERSION = 1
KERNEL = 3


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    hidden: int = 8
    classes: int = 3
    conv_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.hidden < 2:
            raise ValueError("hidden must be >= 2")
        if self.classes < 2:
            raise ValueError("classes must be >= 2")
        if self.conv_layers < 1:
            raise ValueError("conv_layers must be >= 1")

    def with_inputs(self, in_channels: int) -> "SegNetConfig":
        return replace(self, in_channels=in_channels)


SegNetParams = dict[str, np.ndarray]


def layer_shapes(config: SegNetConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    channels = config.in_channels
    for i in range(config.conv_layers):
        shapes[f"conv{i}.weight"] = (config.hidden, channels, KERNEL, KERNEL)
        shapes[f"conv{i}.bias"] = (config.hidden,)
        channels = config.hidden
    shapes["head.weight"] = (config.hidden, config.classes)
    shapes["head.bias"] = (config.classes,)
    return shapes


def init_params(config: SegNetConfig) -> SegNetParams:
    """He-normal kernels (variance 2 / fan_in) and zero biases, seeded by ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in layer_shapes(config).items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
    return params


def num_conv_layers(params) -> int:
    return sum(1 for name in params if name.startswith("conv") and name.endswith(".weight"))


def backbone(params, images) -> Var:
    """Pixel features ``(B, H*W, D)`` from images ``(B, C, H, W)``; works on Vars or arrays."""
    x = nd.lift(images)
    if x.ndim != 4:
        raise nd.ShapeError("backbone", f"expected (B, C, H, W) images, got {x.shape}")
    expected = params["conv0.weight"].shape[1]
    if x.shape[1] != expected:
        raise nd.ShapeError("backbone", f"model takes {expected} channels, image has {x.shape[1]}")
    for i in range(num_conv_layers(params)):
        bias = nd.reshape(params[f"conv{i}.bias"], (1, -1, 1, 1))
        x = nd.leaky_relu(nd.conv2d(x, params[f"conv{i}.weight"]) + bias)
    b, d, h, w = x.shape
    return nd.reshape(nd.transpose(x, (0, 2, 3, 1)), (b, h * w, d))


def head(params, features) -> Var:
    """Per-pixel affine map from D features to K logits."""
    features = nd.lift(features)
    weight = params["head.weight"]
    if features.shape[-1] != nd.lift(weight).shape[0]:
        raise nd.ShapeError("head", f"features have {features.shape[-1]} channels, head expects "
                            f"{nd.lift(weight).shape[0]}")
    return nd.matmul(features, weight) + params["head.bias"]


def backbone_forward(params: SegNetParams, image) -> np.ndarray:
    """Features ``(H*W, D)`` of a single ``C×H×W`` image."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise nd.ShapeError("backbone", f"expected C×H×W image, got {image.shape}")
    return backbone(params, image[None]).value[0]


def head_forward(params: SegNetParams, features) -> np.ndarray:
    return head(params, np.asarray(features, dtype=np.float64)).value


def predict(params: SegNetParams, images) -> tuple[np.ndarray, np.ndarray]:
    """Features and logits for a batch of images, as arrays."""
    feats = backbone(params, np.asarray(images, dtype=np.float64))
    return feats.value, head(params, feats).value


def save_checkpoint(path, params: SegNetParams, config: SegNetConfig, extra: dict | None = None) -> None:
    shapes = layer_shapes(config)
    if set(shapes) != set(params):
        raise ValueError("parameters do not match config")
    header = {
        "kind": "checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "seed": config.seed,
        "layers": [[name, list(shape)] for name, shape in shapes.items()],
        "extra": extra or {},
    }
    payload = b"".join(np.asarray(params[n], dtype="<f8").tobytes() for n in shapes)
    fileformat.write_file(path, header, payload)


def load_checkpoint(path) -> tuple[SegNetParams, SegNetConfig, dict]:
    header, payload = fileformat.read_file(path, "checkpoint", CHECKPOINT_VERSION)
    try:
        config = SegNetConfig(**header["config"])
        layers = [(name, tuple(shape)) for name, shape in header["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise fileformat.MalformedHeaderError(f"bad checkpoint header: {exc}") from None
    if dict(layers) != layer_shapes(config):
        raise fileformat.MalformedHeaderError("layer shapes disagree with config")
    need = 8 * sum(int(np.prod(s)) for _, s in layers)
    if len(payload) != need:
        raise fileformat.TruncatedPayloadError(f"checkpoint payload has {len(payload)} bytes, expected {need}")
    params, offset = {}, 0
    for name, shape in layers:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    return params, config, header.get("extra", {})
