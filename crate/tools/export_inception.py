"""Export the Inception-v3 stem to the SGTN tensor format read by `sigan evaluate --inception`.

Batch norm is folded into each conv so the Rust side only needs conv + bias + ReLU.

    python tools/export_inception.py inception_stem.bin
    python tools/export_inception.py --random stem.bin   # untrained, for format checks
"""

import argparse
import struct

import torch
import torchvision

LAYERS = [
    ("conv1a", "Conv2d_1a_3x3"),
    ("conv2a", "Conv2d_2a_3x3"),
    ("conv2b", "Conv2d_2b_3x3"),
    ("conv3b", "Conv2d_3b_1x1"),
    ("conv4a", "Conv2d_4a_3x3"),
]


def fold(block):
    w = block.conv.weight.detach().double()
    bn = block.bn
    scale = bn.weight.detach().double() / torch.sqrt(bn.running_var.double() + bn.eps)
    bias = bn.bias.detach().double() - bn.running_mean.double() * scale
    return (w * scale[:, None, None, None]).float(), bias.float()


def write(path, tensors):
    with open(path, "wb") as f:
        f.write(b"SGTN")
        f.write(struct.pack("<II", 1, len(tensors)))
        for name, t in tensors:
            t = t.contiguous()
            encoded = name.encode()
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", t.dim()))
            f.write(struct.pack(f"<{t.dim()}Q", *t.shape))
            f.write(t.numpy().astype("<f4").tobytes())


def main():
    p = argparse.ArgumentParser()
    p.add_argument("out")
    p.add_argument("--random", action="store_true", help="skip the pretrained download")
    args = p.parse_args()

    if args.random:
        torch.manual_seed(0)
        model = torchvision.models.inception_v3(weights=None, aux_logits=False, init_weights=True)
    else:
        model = torchvision.models.inception_v3(weights=torchvision.models.Inception_V3_Weights.DEFAULT)
    model.eval()

    tensors = []
    for name, attr in LAYERS:
        w, b = fold(getattr(model, attr))
        tensors += [(f"{name}.weight", w), (f"{name}.bias", b)]
    write(args.out, tensors)
    print(f"wrote {len(tensors)} tensors to {args.out}")


if __name__ == "__main__":
    main()
