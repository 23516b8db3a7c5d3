"""The two CNN encoders and their swappable heads.

EEGNet: temporal conv bank, depthwise spatial filter over electrodes, then
a separable conv block; compact by design. DeepConvNet: four conv blocks
with doubling filter counts and max pooling. Either encoder carries one
head at a time: a projection head for contrastive training or a dropout +
dense + softmax classifier.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .layers import (
    AvgPool,
    BatchNorm,
    Conv2d,
    Dense,
    DepthwiseConv2d,
    Dropout,
    Elu,
    Flatten,
    L2Normalize,
    Layer,
    MaxPool,
    Relu,
    SeparableConv2d,
    Softmax,
    layer_from_config,
)
from .network import run_backward, run_forward

logger = logging.getLogger(__name__)

ARCH_EEGNET = "eegnet"
ARCH_DEEPCONVNET = "deepconvnet"
ARCHITECTURES = (ARCH_EEGNET, ARCH_DEEPCONVNET)

HEAD_NONE = "none"
HEAD_PROJECTION = "projection"
HEAD_CLASSIFIER = "classifier"


@dataclass
class ModelConfig:
    arch: str = ARCH_EEGNET
    input_channels: int = 31
    input_samples: int = 1500
    num_classes: int = 26
    dropout_p: float = 0.5
    eegnet_f1: int = 8
    eegnet_depth_mult: int = 2
    eegnet_f2: int = 16
    proj_dim: int = 128

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"arch must be one of {ARCHITECTURES}, got {self.arch!r}")
        for name in (
            "input_channels",
            "input_samples",
            "num_classes",
            "eegnet_f1",
            "eegnet_depth_mult",
            "eegnet_f2",
            "proj_dim",
        ):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not (0 <= self.dropout_p < 1):
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")


class Network:
    """Encoder layer stack plus one interchangeable head."""

    def __init__(
        self,
        encoder: list[Layer],
        config: ModelConfig,
        rng: np.random.Generator,
        dtype=np.float32,
    ):
        self.encoder = encoder
        self.head: list[Layer] = []
        self.head_kind = HEAD_NONE
        self.config = config
        self.rng = rng
        self.dtype = dtype
        self.freeze_encoder = False
        self.step_count = 0
        self._attach_rngs()

    def _attach_rngs(self):
        for layer in self.encoder + self.head:
            if layer.kind == "dropout":
                layer.rng = self.rng

    @property
    def all_layers(self) -> list[Layer]:
        return self.encoder + self.head

    @property
    def layer_kinds(self) -> list[str]:
        return [layer.kind for layer in self.all_layers]

    def forward_encoder(self, x, train=False, update_stats=True):
        self._check_input(x)
        return run_forward(self.encoder, x, train=train, update_stats=update_stats)

    def forward(self, x, train=False, update_stats=True):
        h = self.forward_encoder(x, train=train, update_stats=update_stats)
        return run_forward(self.head, h, train=train, update_stats=update_stats)

    def forward_head(self, h, train=False, update_stats=True):
        return run_forward(self.head, h, train=train, update_stats=update_stats)

    def backward(self, dy, from_logits=False):
        """Backpropagate; with from_logits=True the trailing softmax is skipped.

        When the encoder is frozen the pass stops at the head boundary and
        encoder gradients are left untouched.
        """
        head = self.head
        if from_logits:
            if not head or head[-1].kind != "softmax":
                raise ValueError("from_logits requires a trailing softmax head layer")
            head = head[:-1]
        dy = run_backward(head, dy)
        if self.freeze_encoder:
            return dy
        return run_backward(self.encoder, dy)

    def _check_input(self, x):
        expected = (self.config.input_channels, self.config.input_samples)
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != expected:
            raise ValueError(
                f"expected input shape (N, 1, {expected[0]}, {expected[1]}), got {x.shape}"
            )

    def trainable_layers(self) -> list[Layer]:
        layers = [] if self.freeze_encoder else list(self.encoder)
        return layers + self.head

    def trainable_params(self) -> tuple[list[np.ndarray], list[tuple[Layer, str]]]:
        params, names = [], []
        for layer in self.trainable_layers():
            for name in layer.params:
                params.append(layer.params[name])
                names.append((layer, name))
        return params, names

    def gradients_for(self, names) -> list[np.ndarray]:
        return [layer.grads[name] for layer, name in names]

    def parameter_count(self, include_head=True) -> int:
        layers = self.all_layers if include_head else self.encoder
        return int(sum(layer.param_count for layer in layers))

    @property
    def encoder_output_dim(self) -> int:
        probe = np.zeros(
            (1, 1, self.config.input_channels, self.config.input_samples),
            dtype=self.dtype,
        )
        return int(self.forward_encoder(probe, train=False).shape[1])

    def state_arrays(self, encoder_only=False) -> list[np.ndarray]:
        layers = self.encoder if encoder_only else self.all_layers
        arrays = []
        for layer in layers:
            for name in sorted(layer.params):
                arrays.append(layer.params[name].copy())
            for name in sorted(layer.buffers):
                arrays.append(layer.buffers[name].copy())
        return arrays

    def load_state_arrays(self, arrays, encoder_only=False) -> None:
        layers = self.encoder if encoder_only else self.all_layers
        it = iter(arrays)
        for layer in layers:
            for name in sorted(layer.params):
                layer.params[name][...] = next(it)
            for name in sorted(layer.buffers):
                layer.buffers[name][...] = next(it)

    def encoder_state_bytes(self) -> bytes:
        return b"".join(
            np.ascontiguousarray(a).tobytes() for a in self.state_arrays(encoder_only=True)
        )


def _init_layers(layers, rng, dtype):
    for layer in layers:
        layer.init_params(rng, dtype)
    return layers


def build_eegnet(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Compact encoder: temporal filters, spatial depthwise, separable block.

    For a 31 x 1500 input the flattened feature dimension is
    f2 * floor(floor(1500 / 4) / 8) = 16 * 46 = 736.
    """
    if cfg.arch != ARCH_EEGNET:
        raise ValueError(f"config arch is {cfg.arch!r}, expected 'eegnet'")
    f1, d, f2 = cfg.eegnet_f1, cfg.eegnet_depth_mult, cfg.eegnet_f2
    rng = np.random.default_rng(seed)
    encoder = _init_layers(
        [
            Conv2d(1, f1, (1, 64), padding="same", bias=False),
            BatchNorm(f1),
            DepthwiseConv2d(f1, d, (cfg.input_channels, 1), padding="valid"),
            BatchNorm(f1 * d),
            Elu(),
            AvgPool((1, 4)),
            Dropout(cfg.dropout_p),
            SeparableConv2d(f1 * d, f2, (1, 16), padding="same"),
            BatchNorm(f2),
            Elu(),
            AvgPool((1, 8)),
            Flatten(),
        ],
        rng,
        dtype,
    )
    return Network(encoder, cfg, rng, dtype)


def build_deepconvnet(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    """Four conv-pool blocks with 25/50/100/200 filters, all valid padding.

    Time axis for a 1500-sample input: 1496, 748, 744, 372, 368, 184, 180,
    90, giving a 200 * 90 = 18000 dimensional flattened output. Only the
    first conv keeps a bias; every conv followed by batch norm drops it.
    """
    if cfg.arch != ARCH_DEEPCONVNET:
        raise ValueError(f"config arch is {cfg.arch!r}, expected 'deepconvnet'")
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [
        Conv2d(1, 25, (1, 5), padding="valid", bias=True),
        Conv2d(25, 25, (cfg.input_channels, 1), padding="valid", bias=False),
        BatchNorm(25),
        Elu(),
        MaxPool((1, 2)),
    ]
    for prev, width in ((25, 50), (50, 100), (100, 200)):
        layers += [
            Conv2d(prev, width, (1, 5), padding="valid", bias=False),
            BatchNorm(width),
            Elu(),
            MaxPool((1, 2)),
        ]
    layers.append(Flatten())
    encoder = _init_layers(layers, rng, dtype)
    return Network(encoder, cfg, rng, dtype)


def build_encoder(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Network:
    if cfg.arch == ARCH_EEGNET:
        return build_eegnet(cfg, seed=seed, dtype=dtype)
    return build_deepconvnet(cfg, seed=seed, dtype=dtype)


def attach_projection_head(net: Network) -> Network:
    """Replace the head with normalize -> dense -> relu -> normalize.

    Output rows are unit vectors regardless of input scale, which makes
    them directly usable as contrastive embeddings.
    """
    if net.head_kind != HEAD_NONE:
        warnings.warn(f"replacing existing {net.head_kind} head", stacklevel=2)
    dim = net.encoder_output_dim
    head = _init_layers(
        [
            L2Normalize(),
            Dense(dim, net.config.proj_dim),
            Relu(),
            L2Normalize(),
        ],
        net.rng,
        net.dtype,
    )
    net.head = head
    net.head_kind = HEAD_PROJECTION
    net._attach_rngs()
    return net


def attach_classifier_head(net: Network, freeze_encoder: bool = False) -> Network:
    """Replace the head with dropout -> dense -> softmax.

    With freeze_encoder=True the encoder receives no gradient updates and
    its batch-norm statistics stay fixed, so its bytes are unchanged by
    subsequent training steps.
    """
    if net.head_kind != HEAD_NONE:
        warnings.warn(f"replacing existing {net.head_kind} head", stacklevel=2)
    dim = net.encoder_output_dim
    head = _init_layers(
        [
            Dropout(net.config.dropout_p),
            Dense(dim, net.config.num_classes),
            Softmax(),
        ],
        net.rng,
        net.dtype,
    )
    net.head = head
    net.head_kind = HEAD_CLASSIFIER
    net.freeze_encoder = freeze_encoder
    net._attach_rngs()
    return net


def discard_head(net: Network) -> Network:
    net.head = []
    net.head_kind = HEAD_NONE
    net.freeze_encoder = False
    return net


def save_checkpoint(net: Network, path: str | Path) -> Path:
    """JSON header plus float32 little-endian parameter/buffer blob.

    The header alone reconstructs the architecture; loading restores
    bit-identical inference outputs for float32 networks.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    blob_parts = []
    for layer in net.all_layers:
        shapes = {}
        for name in sorted(layer.params):
            arr = layer.params[name]
            shapes[name] = list(arr.shape)
            blob_parts.append(np.ascontiguousarray(arr, dtype="<f4"))
        buffer_shapes = {}
        for name in sorted(layer.buffers):
            arr = layer.buffers[name]
            buffer_shapes[name] = list(arr.shape)
            blob_parts.append(np.ascontiguousarray(arr, dtype="<f4"))
        entries.append(
            {
                "kind": layer.kind,
                "config": layer.config(),
                "param_shapes": shapes,
                "buffer_shapes": buffer_shapes,
            }
        )
    header = {
        "model_config": asdict(net.config),
        "encoder_len": len(net.encoder),
        "head_kind": net.head_kind,
        "freeze_encoder": net.freeze_encoder,
        "step_count": net.step_count,
        "layers": entries,
        "rng_state": _encode_rng_state(net.rng),
    }
    path.with_suffix(".json").write_text(
        json.dumps(header, indent=2, sort_keys=True) + "\n"
    )
    blob = b"".join(part.tobytes() for part in blob_parts)
    path.with_suffix(".f32").write_bytes(blob)
    return path


def load_checkpoint(path: str | Path) -> Network:
    path = Path(path)
    header = json.loads(path.with_suffix(".json").read_text())
    blob = np.frombuffer(path.with_suffix(".f32").read_bytes(), dtype="<f4")
    cfg = ModelConfig(**header["model_config"])
    layers = []
    cursor = 0
    for entry in header["layers"]:
        layer = layer_from_config(entry["kind"], entry["config"])
        for name in sorted(entry["param_shapes"]):
            shape = tuple(entry["param_shapes"][name])
            size = int(np.prod(shape)) if shape else 1
            layer.params[name] = blob[cursor : cursor + size].reshape(shape).copy()
            cursor += size
        for name in sorted(entry["buffer_shapes"]):
            shape = tuple(entry["buffer_shapes"][name])
            size = int(np.prod(shape)) if shape else 1
            layer.buffers[name] = blob[cursor : cursor + size].reshape(shape).copy()
            cursor += size
        layers.append(layer)
    if cursor != blob.size:
        raise ValueError(
            f"checkpoint blob holds {blob.size} values, consumed {cursor}"
        )
    encoder_len = int(header["encoder_len"])
    rng = np.random.default_rng()
    rng.bit_generator.state = _decode_rng_state(header["rng_state"])
    net = Network(layers[:encoder_len], cfg, rng, dtype=np.float32)
    net.head = layers[encoder_len:]
    net.head_kind = header["head_kind"]
    net.freeze_encoder = bool(header.get("freeze_encoder", False))
    net.step_count = int(header.get("step_count", 0))
    net._attach_rngs()
    return net


def _encode_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _decode_rng_state(state: dict) -> dict:
    return state
