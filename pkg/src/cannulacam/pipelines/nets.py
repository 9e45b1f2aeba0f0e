"""Desk-scale network architectures."""

from __future__ import annotations

from ..nn.network import LayerSpec, NetworkSpec, bn, conv, dense, op


def _check_dims(h: int, w: int) -> None:
    if h % 4 or w % 4 or h <= 0 or w <= 0:
        raise ValueError(f"spatial dims {h}x{w} must be positive multiples of 4")


def _block(prefix: str, cin: int, cout: int) -> list[LayerSpec]:
    # conv3x3 -> ReLU -> conv3x3 -> ReLU -> batchnorm
    return [
        conv(f"{prefix}.conv1", cin, cout),
        op("RELU", f"{prefix}.relu1"),
        conv(f"{prefix}.conv2", cout, cout),
        op("RELU", f"{prefix}.relu2"),
        bn(f"{prefix}.bn", cout),
    ]


def build_recon_net(channels: int, h: int, w: int) -> NetworkSpec:
    """Two-level U-net mapping a sensor image to a scene estimate."""
    _check_dims(h, w)
    layers: list[LayerSpec] = []
    layers += _block("enc1", channels, 16)
    enc1 = len(layers) - 1
    layers.append(op("MAXPOOL2", "pool1"))
    layers += _block("enc2", 16, 32)
    enc2 = len(layers) - 1
    layers.append(op("MAXPOOL2", "pool2"))
    layers += _block("bottleneck", 32, 64)
    layers.append(op("UPSAMPLE2", "up2"))
    layers.append(op("CONCAT", "cat2"))
    cat2 = len(layers) - 1
    layers += _block("dec2", 96, 32)
    layers.append(op("UPSAMPLE2", "up1"))
    layers.append(op("CONCAT", "cat1"))
    cat1 = len(layers) - 1
    layers += _block("dec1", 48, 16)
    layers.append(conv("head", 16, channels, 1))
    layers.append(op("SIGMOID", "sigmoid"))
    return NetworkSpec((channels, h, w), layers, {enc1: cat1, enc2: cat2}, "BCE_PIXELWISE")


def _cbr(prefix: str, cin: int, cout: int) -> list[LayerSpec]:
    return [conv(f"{prefix}.conv", cin, cout), op("RELU", f"{prefix}.relu"), bn(f"{prefix}.bn", cout)]


def build_depth_net(h: int, w: int, n_depths: int, channels: int = 1) -> NetworkSpec:
    """Conv+ReLU+BN blocks with a max-pool after every two blocks, then a linear head."""
    _check_dims(h, w)
    layers = (
        _cbr("b1", channels, 16) + _cbr("b2", 16, 16) + [op("MAXPOOL2", "pool1")]
        + _cbr("b3", 16, 32) + _cbr("b4", 32, 32) + [op("MAXPOOL2", "pool2")]
        + _cbr("b5", 32, 64)
        + [op("GAVGPOOL", "gap"), dense("fc", 64, n_depths)]
    )
    return NetworkSpec((channels, h, w), layers, {}, "SOFTMAX_CE")


def build_classifier_net(h: int, w: int, n_classes: int, channels: int = 1) -> NetworkSpec:
    """Compact six-block all-convolutional classifier in the SimpNet spirit."""
    _check_dims(h, w)
    widths = (16, 16, 32, 32, 64, 64)
    layers: list[LayerSpec] = []
    cin = channels
    for i, cout in enumerate(widths, start=1):
        layers += _cbr(f"b{i}", cin, cout)
        cin = cout
        if i in (2, 4):
            layers.append(op("MAXPOOL2", f"pool{i // 2}"))
    layers += [op("GAVGPOOL", "gap"), dense("fc", 64, n_classes)]
    return NetworkSpec((channels, h, w), layers, {}, "SOFTMAX_CE")
