"""Three-block convolutional classifier with an exposed concept layer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .serialization import read_container, write_container


@dataclass
class ConvNet:
    n_classes: int
    widths: tuple[int, ...] = (16, 32, 64)
    in_channels: int = 3
    concept_layer: int = 2
    params: dict[str, ad.Tensor] = field(default_factory=dict)

    @property
    def n_blocks(self) -> int:
        return len(self.widths)

    def feature_dim(self, layer: int | None = None) -> int:
        return self.widths[self._check_layer(self.concept_layer if layer is None else layer) - 1]

    def parameters(self) -> list[ad.Tensor]:
        return list(self.params.values())

    def descriptor(self) -> dict:
        return {
            "arch": "convnet",
            "n_classes": self.n_classes,
            "widths": list(self.widths),
            "in_channels": self.in_channels,
            "concept_layer": self.concept_layer,
        }

    def _check_layer(self, layer: int) -> int:
        if not 1 <= int(layer) <= self.n_blocks:
            raise ValueError(f"layer {layer} out of range 1..{self.n_blocks}")
        return int(layer)

    def copy(self) -> "ConvNet":
        return ConvNet(
            self.n_classes,
            self.widths,
            self.in_channels,
            self.concept_layer,
            {k: ad.Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()},
        )


def init_convnet(
    n_classes: int,
    seed: int,
    widths=(16, 32, 64),
    in_channels: int = 3,
    concept_layer: int = 2,
    kernel: int = 3,
) -> ConvNet:
    """Uniform init: conv kernels use the ReLU gain, s = sqrt(6 / fan_in); biases and the
    head use s = 1 / sqrt(fan_in)."""
    rng = np.random.default_rng([int(seed), 0xC0DE])
    params: dict[str, ad.Tensor] = {}
    c_in = in_channels
    for i, c_out in enumerate(widths, start=1):
        fan_in = c_in * kernel * kernel
        s = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-s, s, (c_out, c_in, kernel, kernel))
        s = 1.0 / np.sqrt(fan_in)
        params[f"conv{i}.bias"] = rng.uniform(-s, s, c_out)
        c_in = c_out
    s = 1.0 / np.sqrt(c_in)
    params["head.weight"] = rng.uniform(-s, s, (c_in, n_classes))
    params["head.bias"] = rng.uniform(-s, s, n_classes)
    net = ConvNet(n_classes, tuple(widths), in_channels, concept_layer)
    net.params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    net._check_layer(concept_layer)
    return net


INPUT_SHIFT = 0.5  # images live in [0, 1]; the first block sees them centered


def _block(net: ConvNet, x: ad.Tensor, i: int) -> ad.Tensor:
    w, b = net.params[f"conv{i}.weight"], net.params[f"conv{i}.bias"]
    h = ad.conv2d(x, w)
    h = ad.add(h, ad.expand(b, h.shape, (0, 2, 3)))
    return ad.avg_pool2(ad.relu(h))


def _check_input(net: ConvNet, batch: ad.Tensor) -> None:
    if batch.ndim != 4 or batch.shape[1] != net.in_channels:
        raise ad.ShapeError(f"forward: expected B x {net.in_channels} x H x W, got {batch.shape}")
    h, w = batch.shape[2:]
    div = 2**net.n_blocks
    if h % div or w % div:
        raise ad.ShapeError(f"forward: H, W must be multiples of {div}, got {batch.shape}")


def features_at(net: ConvNet, batch, layer: int) -> ad.Tensor:
    """Post-activation (after pooling) output of block ``layer``, still on the graph."""
    layer = net._check_layer(layer)
    batch = ad._as_tensor(batch)
    _check_input(net, batch)
    h = ad.Tensor(batch.data - INPUT_SHIFT) if not batch.requires_grad else ad.sub(batch, INPUT_SHIFT)
    for i in range(1, layer + 1):
        h = _block(net, h, i)
    return h


def forward_from(net: ConvNet, feats: ad.Tensor, layer: int) -> ad.Tensor:
    """Run the remaining blocks and the head on the output of block ``layer``."""
    h = feats
    for i in range(net._check_layer(layer) + 1, net.n_blocks + 1):
        h = _block(net, h, i)
    pooled = ad.mean(h, (2, 3))
    logits = ad.matmul(pooled, net.params["head.weight"])
    return ad.add(logits, ad.expand(net.params["head.bias"], logits.shape, 0))


def forward(net: ConvNet, batch) -> ad.Tensor:
    batch = ad._as_tensor(batch)
    _check_input(net, batch)
    return forward_from(net, features_at(net, batch, 1), 1)


def concept_features(net: ConvNet, batch, layer: int | None = None) -> ad.Tensor:
    """Spatially summed block output, B x d."""
    return ad.spatial_sum(features_at(net, batch, net.concept_layer if layer is None else layer))


def class_logit_feature_gradients(net: ConvNet, batch, class_index: int, layer: int) -> np.ndarray:
    """Per-sample gradient of logit ``class_index`` wrt the layer features, summed spatially (B x d)."""
    if not 0 <= int(class_index) < net.n_classes:
        raise ValueError(f"class_index {class_index} out of range 0..{net.n_classes - 1}")
    with ad.no_grad():
        feats = features_at(net, batch, layer).data
    leaf = ad.Tensor(feats, requires_grad=True)
    logits = forward_from(net, leaf, layer)
    # samples are independent, so the batch sum yields per-sample gradients
    target = ad.sum(ad.take(logits, (slice(None), int(class_index))))
    (g,) = ad.grad(target, [leaf])
    return g.data.sum(axis=(2, 3))


def class_logit_feature_gradient(net: ConvNet, x, class_index: int, layer: int) -> np.ndarray:
    x = np.asarray(x.data if isinstance(x, ad.Tensor) else x)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError(f"expected a single sample, got batch of {x.shape[0]}")
    return class_logit_feature_gradients(net, x, class_index, layer)[0]


def predict(net: ConvNet, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Logits for a stack of images, no graph."""
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(forward(net, images[i : i + batch_size]).data)
    return np.concatenate(out) if out else np.zeros((0, net.n_classes))


def concept_feature_array(net: ConvNet, images: np.ndarray, layer: int | None = None, batch_size: int = 256):
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            out.append(concept_features(net, images[i : i + batch_size], layer).data)
    return np.concatenate(out) if out else np.zeros((0, net.feature_dim(layer)))


def save_checkpoint(net: ConvNet, path) -> None:
    write_container(path, net.descriptor(), [(k, v.data) for k, v in net.params.items()])


def load_checkpoint(path) -> ConvNet:
    desc, entries = read_container(path)
    if desc.get("arch") != "convnet":
        raise ValueError(f"{path}: not a convnet checkpoint")
    net = ConvNet(desc["n_classes"], tuple(desc["widths"]), desc["in_channels"], desc["concept_layer"])
    net.params = {k: ad.Tensor(v, requires_grad=True, name=k) for k, v in entries}
    return net


def parameter_hash(net: ConvNet) -> str:
    import hashlib

    h = hashlib.sha256()
    for k, v in net.params.items():
        h.update(k.encode())
        h.update(np.ascontiguousarray(v.data, dtype="<f8").tobytes())
    return h.hexdigest()
