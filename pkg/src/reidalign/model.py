"""Toy embedding network with a global branch and a stripe-local branch.

A small stack of 3x3 convolutions maps the input image to a CxHxW feature
map.  The global branch mean-pools the whole map into a C-vector; the
local branch mean-pools each row (horizontal pooling), then a 1x1
channel reduction turns every row into a c-vector, giving H stripe
features per image.  An optional linear head produces identity logits
for the classification loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class ModelConfig:
    """Geometry of the embedding network.

    The default is the desk-scale setup (56px input, 32x7x7 feature map,
    8-channel stripe features).  The full-scale geometry (224px input,
    2048x7x7, c=128) stays representable; see ``full_scale``.
    """

    input_size: int = 56
    channel_plan: tuple = (16, 32, 32, 32)
    feature_height: int = 7
    feature_width: int = 7
    local_channels: int = 8
    num_identities: int = 16

    def __post_init__(self):
        if self.feature_height < 1 or self.feature_height != self.feature_width:
            raise ValueError("ModelConfig: feature map must be square with H >= 1")
        if not (self.feature_channels >= self.local_channels >= 1):
            raise ValueError(
                f"ModelConfig: need C >= c >= 1, got C={self.feature_channels} "
                f"c={self.local_channels}"
            )
        if self.num_identities < 2:
            raise ValueError("ModelConfig: need at least 2 identities")
        reduction = self.input_size / self.feature_height
        halvings = math.log2(reduction)
        if reduction < 1 or halvings != int(halvings):
            raise ValueError(
                f"ModelConfig: input {self.input_size} cannot reach a "
                f"{self.feature_height}-row map by halving"
            )
        if int(halvings) > len(self.channel_plan):
            raise ValueError(
                f"ModelConfig: {int(halvings)} halvings need at least that many "
                f"stages, plan has {len(self.channel_plan)}"
            )

    @property
    def feature_channels(self) -> int:
        return self.channel_plan[-1]

    @property
    def stage_strides(self) -> tuple:
        halvings = int(math.log2(self.input_size / self.feature_height))
        return (2,) * halvings + (1,) * (len(self.channel_plan) - halvings)

    @classmethod
    def full_scale(cls, num_identities: int = 751) -> "ModelConfig":
        return cls(
            input_size=224,
            channel_plan=(64, 128, 256, 512, 2048),
            local_channels=128,
            num_identities=num_identities,
        )


def config_to_text(config: ModelConfig) -> str:
    """Flat key=value serialization of a ModelConfig."""
    return "\n".join(
        [
            f"input_size={config.input_size}",
            "channel_plan=" + ",".join(str(c) for c in config.channel_plan),
            f"feature_height={config.feature_height}",
            f"feature_width={config.feature_width}",
            f"local_channels={config.local_channels}",
            f"num_identities={config.num_identities}",
        ]
    )


def config_from_text(text: str) -> ModelConfig:
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"model config line {lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    try:
        return ModelConfig(
            input_size=int(values["input_size"]),
            channel_plan=tuple(int(c) for c in values["channel_plan"].split(",")),
            feature_height=int(values["feature_height"]),
            feature_width=int(values["feature_width"]),
            local_channels=int(values["local_channels"]),
            num_identities=int(values["num_identities"]),
        )
    except KeyError as exc:
        raise ValueError(f"model config: missing key {exc}") from None


def init_params(config: ModelConfig, seed: int) -> dict:
    """He-style random init of the weights.

    Conv biases start slightly positive: with inputs in [0, 1] and this
    small a network, zero biases leave a large fraction of rectifiers
    dark at the start, and aggressive first optimizer steps can push the
    whole stack into the all-dead basin it never escapes.
    """
    rng = np.random.default_rng(seed)
    params = {}
    cin = 3
    for k, cout in enumerate(config.channel_plan):
        std = math.sqrt(2.0 / (cin * 9))
        params[f"conv{k}.weight"] = rng.normal(0.0, std, size=(cout, cin, 3, 3))
        params[f"conv{k}.bias"] = np.full(cout, 0.1)
        cin = cout
    c_full = config.feature_channels
    params["local.weight"] = rng.normal(
        0.0, 1.0 / math.sqrt(c_full), size=(config.local_channels, c_full)
    )
    params["local.bias"] = np.zeros(config.local_channels)
    params["cls.weight"] = rng.normal(
        0.0, 1.0 / math.sqrt(c_full), size=(config.num_identities, c_full)
    )
    params["cls.bias"] = np.zeros(config.num_identities)
    return params


def backbone_forward(tape: ad.Tape, param_nodes: dict, images, config: ModelConfig) -> ad.Node:
    """Feature maps (N, C, H, W) for a batch of (N, 3, S, S) images."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    n, c, h, w = images.shape
    if (c, h, w) != (3, config.input_size, config.input_size):
        raise ValueError(
            f"backbone_forward: expected (3, {config.input_size}, "
            f"{config.input_size}) images, got {(c, h, w)}"
        )
    x = tape.leaf(images, name="images", requires_grad=False)
    for k, stride in enumerate(config.stage_strides):
        cout = config.channel_plan[k]
        x = ad.conv2d(x, param_nodes[f"conv{k}.weight"], stride=stride, pad=1)
        x = ad.add(x, ad.reshape(param_nodes[f"conv{k}.bias"], (1, cout, 1, 1)))
        x = ad.relu(x)
    return x


def global_branch(fmap: ad.Node) -> ad.Node:
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    return ad.mean(fmap, axes=(2, 3))


def local_branch(fmap: ad.Node, param_nodes: dict) -> ad.Node:
    """Horizontal pooling plus 1x1 reduction: (N, C, H, W) -> (N, H, c)."""
    rows = ad.transpose(ad.mean(fmap, axes=(3,)), (0, 2, 1))  # (N, H, C)
    reduced = ad.matmul(rows, ad.transpose(param_nodes["local.weight"], (1, 0)))
    return ad.add(reduced, param_nodes["local.bias"])


def classifier_head(gfeat: ad.Node, param_nodes: dict) -> ad.Node:
    """Identity logits: (N, C) -> (N, num_identities)."""
    logits = ad.matmul(gfeat, ad.transpose(param_nodes["cls.weight"], (1, 0)))
    return ad.add(logits, param_nodes["cls.bias"])


@dataclass
class ForwardOutputs:
    fmap: ad.Node
    global_features: ad.Node  # (N, C)
    local_features: ad.Node  # (N, H, c)
    logits: ad.Node | None
    param_nodes: dict = field(repr=False, default_factory=dict)


class Model:
    """Parameter container plus forward graph builders."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def from_seed(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_params(config, seed))

    def param_nodes(self, tape: ad.Tape) -> dict:
        return {name: tape.leaf(value, name=name) for name, value in self.params.items()}

    def forward(self, tape: ad.Tape, images, with_logits: bool = True) -> ForwardOutputs:
        nodes = self.param_nodes(tape)
        fmap = backbone_forward(tape, nodes, images, self.config)
        gfeat = global_branch(fmap)
        lfeat = local_branch(fmap, nodes)
        logits = classifier_head(gfeat, nodes) if with_logits else None
        return ForwardOutputs(fmap, gfeat, lfeat, logits, nodes)

    def embed(self, images) -> tuple[np.ndarray, np.ndarray]:
        """Inference helper: (global (N, C), local (N, H, c)) arrays."""
        out = self.forward(ad.Tape(), images, with_logits=False)
        return out.global_features.value.copy(), out.local_features.value.copy()

    def feature_map(self, image) -> np.ndarray:
        """Single-image (C, H, W) feature map."""
        out = self.forward(ad.Tape(), np.asarray(image)[None], with_logits=False)
        return out.fmap.value[0].copy()
