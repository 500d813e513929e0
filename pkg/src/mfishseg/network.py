"""Segmentation network: two VGG-style downsampling stages, a pyramid of
dilated-convolution branches, and a bilinear upsample back to input size.

The network is a plain parameter dictionary plus a forward function built
from the kernels in :mod:`mfishseg.ops`; checkpoints are flat npz
containers with an embedded format version.
"""

import json
import math
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from . import ops
from .data import LabelCoding, MfishSample
from .ops import AdamState, BatchNormState, ConvParams

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class BlockSpec:
    kind: str  # conv | maxpool | aspp_branch | global_pool | conv1x1 | dropout | upsample
    kernel: int = 3
    dilation: int = 1
    filters: int = 0
    repeat: int = 1
    stride: int = 1


@dataclass
class NetworkConfig:
    front_stages: List[BlockSpec] = field(default_factory=lambda: [
        BlockSpec("conv", kernel=3, filters=64, repeat=2),
        BlockSpec("maxpool", kernel=2, stride=2),
        BlockSpec("conv", kernel=3, filters=128, repeat=2),
        BlockSpec("maxpool", kernel=2, stride=2),
    ])
    aspp_branches: List[BlockSpec] = field(default_factory=lambda: [
        BlockSpec("conv1x1", kernel=1, filters=256),
        BlockSpec("aspp_branch", kernel=3, dilation=6, filters=256),
        BlockSpec("aspp_branch", kernel=3, dilation=12, filters=256),
        BlockSpec("aspp_branch", kernel=3, dilation=18, filters=256),
        BlockSpec("global_pool", kernel=1, filters=256),
    ])
    fuse_filters: int = 256
    dropout_rate: float = 0.5
    num_classes: int = 24
    output_stride: int = 4
    in_channels: int = 6
    bn_momentum: float = 0.9
    bn_epsilon: float = 1e-5

    def validate(self) -> None:
        pools = [b for b in self.front_stages if b.kind == "maxpool"]
        if len(pools) != 2:
            raise ValueError(f"exactly two pooling stages must precede the "
                             f"pyramid module, got {len(pools)}")
        stride = 1
        for b in pools:
            stride *= b.stride
        if stride != self.output_stride:
            raise ValueError(f"pool strides give output stride {stride}, "
                             f"config declares {self.output_stride}")
        if not self.aspp_branches:
            raise ValueError("at least one pyramid branch is required")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        doc = json.loads(text)
        doc["front_stages"] = [BlockSpec(**b) for b in doc["front_stages"]]
        doc["aspp_branches"] = [BlockSpec(**b) for b in doc["aspp_branches"]]
        return cls(**doc)


@dataclass
class Network:
    config: NetworkConfig
    params: Dict[str, torch.Tensor]
    bn: Dict[str, BatchNormState]
    mode: str = "train"
    rng: Optional[torch.Generator] = None

    def named_parameters(self) -> Dict[str, torch.Tensor]:
        out = dict(self.params)
        for name, state in self.bn.items():
            out[f"{name}.gamma"] = state.gamma
            out[f"{name}.beta"] = state.beta
        return out

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.named_parameters().values())

    def train(self) -> "Network":
        self.mode = "train"
        return self

    def infer(self) -> "Network":
        self.mode = "infer"
        return self


def _he_init(shape: Tuple[int, ...], rng: torch.Generator,
             dtype: torch.dtype = torch.float32) -> torch.Tensor:
    fan_in = int(np.prod(shape[1:]))
    w = torch.randn(shape, generator=rng, dtype=dtype) * math.sqrt(2.0 / fan_in)
    return w.requires_grad_(True)


def build_network(config: NetworkConfig, seed: int = 0,
                  dtype: torch.dtype = torch.float32) -> Network:
    """Instantiate parameters for the configured architecture; bit-identical
    given the same seed."""
    config.validate()
    rng = torch.Generator().manual_seed(seed)
    params: Dict[str, torch.Tensor] = {}
    bn: Dict[str, BatchNormState] = {}

    def add_conv(name: str, c_in: int, c_out: int, k: int, with_bn: bool = True) -> int:
        params[f"{name}.weight"] = _he_init((c_out, c_in, k, k), rng, dtype)
        params[f"{name}.bias"] = torch.zeros(c_out, dtype=dtype, requires_grad=True)
        if with_bn:
            bn[f"{name}.bn"] = ops.make_batch_norm_state(
                c_out, config.bn_momentum, config.bn_epsilon, dtype)
        return c_out

    c = config.in_channels
    stage = 0
    for block in config.front_stages:
        if block.kind == "conv":
            for r in range(block.repeat):
                c = add_conv(f"front{stage}.conv{r}", c, block.filters, block.kernel)
            stage += 1
        elif block.kind == "maxpool":
            continue
        else:
            raise ValueError(f"unsupported front block kind {block.kind!r}")
    for i, branch in enumerate(config.aspp_branches):
        # the pooled-context branch skips batch norm: its spatial extent is
        # 1x1, so batch statistics would degenerate on small batches
        with_bn = branch.kind != "global_pool"
        add_conv(f"aspp{i}", c, branch.filters, branch.kernel, with_bn=with_bn)
    concat_c = sum(b.filters for b in config.aspp_branches)
    add_conv("fuse", concat_c, config.fuse_filters, 1)
    add_conv("head", config.fuse_filters, config.num_classes, 1, with_bn=False)
    return Network(config=config, params=params, bn=bn, mode="train",
                   rng=torch.Generator().manual_seed(seed + 1))


def _conv_block(net: Network, name: str, x: torch.Tensor, dilation: int = 1,
                with_bn: bool = True) -> torch.Tensor:
    p = ConvParams(weights=net.params[f"{name}.weight"],
                   bias=net.params[f"{name}.bias"], dilation=dilation)
    x = ops.relu(ops.conv2d(x, p))
    if with_bn:
        x = ops.batch_norm(x, net.bn[f"{name}.bn"], net.mode)
    return x


def forward(net: Network, x: torch.Tensor) -> torch.Tensor:
    """Run the network on an (N, 6, H, W) batch, returning (N, 24, H, W)
    logits at the input resolution."""
    cfg = net.config
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"expected {cfg.in_channels} input channels, "
                         f"got {x.shape[1]}")
    h, w = x.shape[-2:]
    s = cfg.output_stride
    pad_h = (s - h % s) % s
    pad_w = (s - w % s) % s
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))

    stage = 0
    for block in cfg.front_stages:
        if block.kind == "conv":
            for r in range(block.repeat):
                x = _conv_block(net, f"front{stage}.conv{r}", x)
            stage += 1
        else:
            x = ops.max_pool(x, block.kernel, block.stride)

    feats = []
    fh, fw = x.shape[-2:]
    for i, branch in enumerate(cfg.aspp_branches):
        if branch.kind == "global_pool":
            pooled = x.mean(dim=(2, 3), keepdim=True)
            b = _conv_block(net, f"aspp{i}", pooled, with_bn=False)
            feats.append(b.expand(-1, -1, fh, fw))
        else:
            feats.append(_conv_block(net, f"aspp{i}", x, dilation=branch.dilation))
    x = torch.cat(feats, dim=1)
    x = ops.dropout(x, cfg.dropout_rate, net.mode, net.rng)
    x = _conv_block(net, "fuse", x)
    # final block: raw logits, softmax lives in the loss / predict path
    head = ConvParams(weights=net.params["head.weight"],
                      bias=net.params["head.bias"])
    x = ops.conv2d(x, head)
    x = ops.bilinear_upsample(x, h + pad_h, w + pad_w)
    return x[:, :, :h, :w]


def predict_labels(net: Network, sample: MfishSample,
                   coding: Optional[LabelCoding] = None) -> np.ndarray:
    """Argmax class map over the softmax channels, expressed in chromosome
    codes; ties break toward the lowest class index."""
    coding = coding or LabelCoding()
    mode = net.mode
    net.infer()
    try:
        with torch.no_grad():
            x = torch.from_numpy(sample.channels[None]).to(
                next(iter(net.params.values())).dtype)
            probs = ops.softmax_channels(forward(net, x))
            # torch.max returns the first maximal index: ties resolve low
            idx = probs.max(dim=1).indices[0].numpy()
    finally:
        net.mode = mode
    codes = np.asarray(coding.chromosome_codes)
    return codes[idx]


def save_checkpoint(path, net: Network, adam: Optional[AdamState] = None) -> None:
    """Single-file npz container: config JSON, named parameter arrays,
    batch-norm statistics and optional optimizer state."""
    arrays: Dict[str, np.ndarray] = {}
    for name, p in net.params.items():
        arrays[f"param/{name}"] = p.detach().numpy()
    for name, state in net.bn.items():
        arrays[f"param/{name}.gamma"] = state.gamma.detach().numpy()
        arrays[f"param/{name}.beta"] = state.beta.detach().numpy()
        arrays[f"stat/{name}.running_mean"] = state.running_mean.numpy()
        arrays[f"stat/{name}.running_var"] = state.running_var.numpy()
    meta = {"format_version": CHECKPOINT_FORMAT_VERSION,
            "config": json.loads(net.config.to_json())}
    if adam is not None:
        meta["adam"] = {"lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2,
                        "epsilon": adam.epsilon, "t": adam.t}
        for name, m in adam.m.items():
            arrays[f"adam_m/{name}"] = m.numpy()
        for name, v in adam.v.items():
            arrays[f"adam_v/{name}"] = v.numpy()
    arrays["meta_json"] = np.frombuffer(
        json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_checkpoint(path) -> Tuple[Network, Optional[AdamState]]:
    with np.load(path) as npz:
        meta = json.loads(bytes(npz["meta_json"]).decode())
        if meta["format_version"] != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format "
                             f"{meta['format_version']}")
        config = NetworkConfig.from_json(json.dumps(meta["config"]))
        net = build_network(config, seed=0)
        for name in net.params:
            net.params[name] = torch.from_numpy(
                npz[f"param/{name}"].copy()).requires_grad_(True)
        for name, state in net.bn.items():
            state.gamma = torch.from_numpy(
                npz[f"param/{name}.gamma"].copy()).requires_grad_(True)
            state.beta = torch.from_numpy(
                npz[f"param/{name}.beta"].copy()).requires_grad_(True)
            state.running_mean = torch.from_numpy(
                npz[f"stat/{name}.running_mean"].copy())
            state.running_var = torch.from_numpy(
                npz[f"stat/{name}.running_var"].copy())
        adam = None
        if "adam" in meta:
            a = meta["adam"]
            adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"],
                             epsilon=a["epsilon"], t=a["t"])
            for key in npz.files:
                if key.startswith("adam_m/"):
                    adam.m[key[len("adam_m/"):]] = torch.from_numpy(npz[key].copy())
                elif key.startswith("adam_v/"):
                    adam.v[key[len("adam_v/"):]] = torch.from_numpy(npz[key].copy())
    return net, adam
