#!/usr/bin/env python3
"""Convert published VGG-19 weights into the descriptor container format.

Supported inputs:
- a torchvision state dict (.pth / .pt), keys ``features.{idx}.weight``;
- an .npz archive with arrays ``conv1_1_W`` / ``conv1_1_b`` (and so on).

Only the 13 convolutions up to conv5_1 are extracted. See
docs/descriptor-weights.md for the channel-order convention.
"""

import argparse
import sys

import numpy as np

from solidtex import container
from solidtex.descriptor import weight_manifest

# torchvision's features-module indices of the conv layers, in order
_TORCHVISION_INDICES = [0, 2, 5, 7, 10, 12, 14, 16, 19, 21, 23, 25, 28]


def _load_state_dict(path):
    try:
        import torch
    except ImportError:
        sys.exit("reading .pth files requires torch; alternatively convert "
                 "your weights to .npz (see docs/descriptor-weights.md)")
    state = torch.load(path, map_location="cpu", weights_only=True)
    out = {}
    conv_names = [n[:-len(".weight")] for n, _ in weight_manifest()
                  if n.endswith(".weight")]
    for name, idx in zip(conv_names, _TORCHVISION_INDICES):
        out[f"{name}.weight"] = state[f"features.{idx}.weight"].numpy()
        out[f"{name}.bias"] = state[f"features.{idx}.bias"].numpy()
    return out


def _load_npz(path):
    archive = np.load(path)
    out = {}
    for name, _ in weight_manifest():
        base, kind = name.split(".")
        key = f"{base}_W" if kind == "weight" else f"{base}_b"
        if key not in archive:
            sys.exit(f"{path}: missing array {key!r}")
        out[name] = archive[key]
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("source", help=".pth state dict or .npz archive")
    ap.add_argument("dest", help="output .stxw path")
    ap.add_argument("--channel-order", choices=("RGB", "BGR"), default="RGB",
                    help="input channel order the kernels expect")
    args = ap.parse_args()

    if args.source.endswith(".npz"):
        raw = _load_npz(args.source)
    else:
        raw = _load_state_dict(args.source)

    tensors = []
    for name, shape in weight_manifest():
        arr = np.asarray(raw[name], dtype=np.float32)
        if arr.ndim == 4 and tuple(arr.shape) != shape and \
                tuple(arr.transpose(3, 2, 0, 1).shape) == shape:
            arr = np.ascontiguousarray(arr.transpose(3, 2, 0, 1))  # HWIO->OIHW
        if tuple(arr.shape) != shape:
            sys.exit(f"{name}: shape {arr.shape}, expected {shape}")
        tensors.append((name, arr))

    meta = {"channel_order": args.channel_order, "source": args.source}
    container.save_tensors(args.dest, container.MAGIC_DESCRIPTOR, meta,
                           tensors)
    print(f"wrote {args.dest} ({len(tensors)} tensors, "
          f"channel order {args.channel_order})")


if __name__ == "__main__":
    main()
