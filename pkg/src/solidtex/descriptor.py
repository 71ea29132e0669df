"""Truncated VGG-19 descriptor, Gram statistics and the perceptual losses.

The descriptor is the fixed, pretrained network used to characterize 2D
slices: 13 padded 3x3 convolutions (through conv5_1) with ReLU activations
and 2x2 average pooling between blocks. Loss taps are taken after the first
activation of each block (relu1_1 ... relu5_1). Weights are never updated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import container, ops
from .autodiff import Var

# (block, convs in block, output channels); truncated after conv5_1
_VGG_BLOCKS = [(1, 2, 64), (2, 2, 128), (3, 4, 256), (4, 4, 512), (5, 1, 512)]

TAP_LAYERS = ("relu1_1", "relu2_1", "relu3_1", "relu4_1", "relu5_1")

# Per-channel RGB means of the classical VGG preprocessing (applied to
# 255-scaled inputs).
RGB_MEANS = (123.68, 116.779, 103.939)

MIN_INPUT_SIZE = 32  # four poolings must leave relu5_1 nonempty


def weight_manifest():
    """(name, shape) list of the descriptor weight file."""
    entries = []
    cin = 3
    for block, convs, cout in _VGG_BLOCKS:
        for i in range(1, convs + 1):
            entries.append((f"conv{block}_{i}.weight", (cout, cin, 3, 3)))
            entries.append((f"conv{block}_{i}.bias", (cout,)))
            cin = cout
    return entries


def tap_channels():
    """Channel count M^l at each tap layer."""
    return {f"relu{b}_1": c for b, _, c in _VGG_BLOCKS}


@dataclass
class DescriptorNet:
    """Loaded descriptor weights plus the ingestion conventions."""

    weights: dict  # name -> Var, fixed
    channel_order: str  # "RGB" or "BGR": channel order the kernels expect
    checksum: str  # sha256 of the weight payload, for provenance

    def preprocess(self, image, tape=None):
        """Map a 3xHxWx1 image in [0, 1] to the descriptor input: scale by
        255, subtract per-channel means, reorder channels if needed."""
        if image.data.shape[0] != 3:
            raise ops.ShapeError(
                f"preprocess: expected 3 channels, got {image.data.shape[0]}")
        x = image
        means = RGB_MEANS
        if self.channel_order == "BGR":
            x = ops.flip_channels(x, tape=tape)
            means = RGB_MEANS[::-1]
        return ops.affine_channels(x, (255.0, 255.0, 255.0),
                                   tuple(-m for m in means), tape=tape)

    def features(self, image, tape=None):
        """Feature maps {F^l} at the tap layers for an image in [0, 1]."""
        h, w = image.data.shape[1], image.data.shape[2]
        if h < MIN_INPUT_SIZE or w < MIN_INPUT_SIZE:
            raise ops.ShapeError(
                f"features: input {h}x{w} below minimum "
                f"{MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}")
        x = self.preprocess(image, tape=tape)
        taps = {}
        last_block = _VGG_BLOCKS[-1][0]
        for block, convs, _ in _VGG_BLOCKS:
            for i in range(1, convs + 1):
                x = ops.conv2d_same(x, self.weights[f"conv{block}_{i}.weight"],
                                    self.weights[f"conv{block}_{i}.bias"],
                                    tape=tape)
                x = ops.relu(x, tape=tape)
                if i == 1:
                    taps[f"relu{block}_1"] = x
            if block != last_block:
                x = ops.avgpool2(x, tape=tape)
        return taps

    def grams(self, image, tape=None):
        """Gram matrices {G^l} for an image in [0, 1]."""
        return {layer: ops.gram(f, tape=tape)
                for layer, f in self.features(image, tape=tape).items()}

    def target_grams(self, image):
        """Precompute exemplar Gram matrices as plain float64 arrays."""
        return {layer: g.data for layer, g in self.grams(Var(image)).items()}

    def loss2d(self, image, targets, tape=None):
        """Perceptual loss: sum over taps of (1/M^2) ||G - G_target||_F^2."""
        channels = tap_channels()
        terms = [ops.gram_frobenius_term(g, targets[layer], channels[layer],
                                         tape=tape)
                 for layer, g in self.grams(image, tape=tape).items()]
        return ops.add_scalars(terms, tape=tape)

    def loss2d_report(self, image, targets):
        """Per-layer loss terms (no gradients), for diagnostics."""
        channels = tap_channels()
        return {layer: float(ops.gram_frobenius_term(
                    g, targets[layer], channels[layer]).data)
                for layer, g in self.grams(image).items()}


def ingest_vgg_weights(path):
    """Load a descriptor weight container (magic STXW), validating the full
    name/shape manifest."""
    meta, tensors, digest = container.load_tensors(
        path, container.MAGIC_DESCRIPTOR)
    manifest = weight_manifest()
    expected = {name for name, _ in manifest}
    for name, shape in manifest:
        if name not in tensors:
            raise container.ContainerError(f"missing tensor {name!r}")
        if tuple(tensors[name].shape) != shape:
            raise container.ContainerError(
                f"tensor {name!r}: shape {tensors[name].shape}, expected "
                f"{shape}")
    extra = sorted(set(tensors) - expected)
    if extra:
        raise container.ContainerError(f"unexpected tensors {extra}")
    order = meta.get("channel_order", "RGB")
    if order not in ("RGB", "BGR"):
        raise container.ContainerError(f"unknown channel_order {order!r}")
    weights = {n: Var(t, name=n) for n, t in tensors.items()}
    return DescriptorNet(weights=weights, channel_order=order, checksum=digest)


def write_random_descriptor_weights(path, seed=0):
    """Write a descriptor weight file with deterministic He-scaled random
    kernels and zero biases.

    Random-feature Gram statistics are a serviceable texture descriptor, so
    this is usable for tests and offline experiments; for best quality,
    convert the published VGG-19 weights (see docs/descriptor-weights.md).
    """
    rng = np.random.default_rng(seed)
    tensors = []
    for name, shape in weight_manifest():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                              size=shape).astype(np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        tensors.append((name, data))
    meta = {"channel_order": "RGB", "source": f"random-init(seed={seed})"}
    container.save_tensors(path, container.MAGIC_DESCRIPTOR, meta, tensors)


# ---------------------------------------------------------------------------
# exemplars


@dataclass
class Exemplar:
    """One training direction: the (transformed) example image and its
    precomputed target Gram matrices."""

    direction: int  # slicing axis in {0, 1, 2}
    image: np.ndarray  # (3, H, W, 1) float32 in [0, 1]
    targets: dict  # layer -> float64 Gram matrix


@dataclass
class ExemplarSet:
    """The D <= 3 constrained directions with their exemplars."""

    exemplars: list

    def __post_init__(self):
        dirs = [e.direction for e in self.exemplars]
        if not 1 <= len(dirs) <= 3:
            raise ValueError(f"need 1..3 directions, got {len(dirs)}")
        if len(set(dirs)) != len(dirs):
            raise ValueError(f"duplicate directions {dirs}")
        if any(d not in (0, 1, 2) for d in dirs):
            raise ValueError(f"directions must be in 0..2, got {dirs}")

    @classmethod
    def from_images(cls, net, directed_images):
        """Build from [(direction, image array)] pairs, precomputing Grams."""
        return cls([Exemplar(direction=d, image=img,
                             targets=net.target_grams(img))
                    for d, img in directed_images])

    def by_direction(self, d):
        for e in self.exemplars:
            if e.direction == d:
                return e
        raise KeyError(f"direction {d} unconstrained")


def loss3d(net, volume, exemplar_set):
    """Slice-based 3D loss: sum over constrained directions of the mean
    loss2d over all slices orthogonal to the direction."""
    return sum(loss3d_direction(net, volume, e)
               for e in exemplar_set.exemplars)


def loss3d_direction(net, volume, exemplar):
    """One direction's term of the slice-based loss."""
    d = exemplar.direction
    n_d = volume.shape[1 + d]
    total = 0.0
    for i in range(n_d):
        img = _slice_image(volume, d, i)
        total += float(net.loss2d(Var(img), exemplar.targets).data)
    return total / n_d


def loss3d_report(net, volume, exemplar_set):
    """Per-direction and per-layer decomposition of loss3d."""
    report = {}
    for e in exemplar_set.exemplars:
        n_d = volume.shape[1 + e.direction]
        per_layer = {layer: 0.0 for layer in TAP_LAYERS}
        for i in range(n_d):
            img = _slice_image(volume, e.direction, i)
            for layer, v in net.loss2d_report(Var(img), e.targets).items():
                per_layer[layer] += v / n_d
        report[e.direction] = per_layer
    return report


def _slice_image(volume, axis, index):
    sl = [slice(None)] * 4
    sl[1 + axis] = slice(index, index + 1)
    c = volume.shape[0]
    rest = [volume.shape[1 + i] for i in range(3) if i != axis]
    return np.ascontiguousarray(
        volume[tuple(sl)].reshape(c, rest[0], rest[1], 1))


# ---------------------------------------------------------------------------
# preprocessing of exemplar pairs


def histogram_match(source, reference):
    """Monotone per-channel remap of ``source`` so its empirical CDF matches
    ``reference``'s (quantile mapping; ties broken by stable pixel order)."""
    if source.shape[0] != 3 or reference.shape[0] != 3:
        raise ops.ShapeError("histogram_match: both images must be 3-channel")
    out = np.empty_like(source)
    for c in range(3):
        src = source[c].ravel()
        ref = np.sort(reference[c].ravel())
        ranks = np.argsort(np.argsort(src, kind="stable"), kind="stable")
        if src.size == ref.size:
            matched = ref[ranks]
        else:
            q = (ranks + 0.5) / src.size
            matched = np.interp(q, (np.arange(ref.size) + 0.5) / ref.size, ref)
        out[c] = matched.reshape(source[c].shape).astype(source.dtype)
    return out
