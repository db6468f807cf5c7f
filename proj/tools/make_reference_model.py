#!/usr/bin/env python3
"""Build the VGG16 feature-extractor ONNX file and golden tap outputs for the test suite.

Weights come from a torchvision checkpoint when VGG16_WEIGHTS (or --weights) names one,
otherwise from a fixed seed. Golden maps are computed with PyTorch, independently of the
C++ runtime, on three crops of scikit-image's bundled photographs.
"""

import argparse
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch
import torchvision
from PIL import Image
from skimage import data as skdata

MEANS = np.array([0.485, 0.456, 0.406], dtype=np.float32)
STDS = np.array([0.229, 0.224, 0.225], dtype=np.float32)
PAD_MULTIPLE = 16
TAPS = [(4, 128), (7, 256), (9, 512)]

# Crops are taken without resampling so both runtimes see identical pixels. The cat crop is
# not a multiple of 16 on either side and exercises padding.
IMAGES = [
    ("astronaut", lambda: skdata.astronaut()[0:224, 100:324]),
    ("coffee", lambda: skdata.coffee()[40:200, 120:360]),
    ("chelsea", lambda: skdata.chelsea()[30:230, 60:282]),
]

PUBLISHED_PREFIX = "397923af"  # torchvision names checkpoints by the leading sha256 digits


# -- minimal protobuf wire encoder for the ONNX messages we emit -------------------------


def varint(n):
    out = bytearray()
    while True:
        b = n & 0x7F
        n >>= 7
        if n:
            out.append(b | 0x80)
        else:
            out.append(b)
            return bytes(out)


def key(field, wire):
    return varint((field << 3) | wire)


def f_varint(field, n):
    return key(field, 0) + varint(n & 0xFFFFFFFFFFFFFFFF)


def f_bytes(field, payload):
    if isinstance(payload, str):
        payload = payload.encode()
    return key(field, 2) + varint(len(payload)) + payload


def attr_int(name, v):
    return f_bytes(1, name) + f_varint(3, v) + f_varint(20, 2)


def attr_ints(name, vs):
    body = f_bytes(1, name)
    for v in vs:
        body += f_varint(8, v)
    return body + f_varint(20, 7)


def attr_str(name, s):
    return f_bytes(1, name) + f_bytes(4, s) + f_varint(20, 3)


def node(op, inputs, outputs, name, attrs=()):
    body = b"".join(f_bytes(1, i) for i in inputs)
    body += b"".join(f_bytes(2, o) for o in outputs)
    body += f_bytes(3, name) + f_bytes(4, op)
    body += b"".join(f_bytes(5, a) for a in attrs)
    return body


def tensor(name, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    body = b"".join(f_varint(1, d) for d in array.shape)
    body += f_varint(2, 1)  # FLOAT
    body += f_bytes(8, name)
    body += f_bytes(9, array.tobytes())
    return body


def encode_model(features):
    nodes, inits = [], []
    x = "input"
    conv = relu = pool = 0
    for layer in features:
        if isinstance(layer, torch.nn.Conv2d):
            conv += 1
            w, b = f"conv{conv}.weight", f"conv{conv}.bias"
            inits.append(tensor(w, layer.weight.detach().numpy()))
            inits.append(tensor(b, layer.bias.detach().numpy()))
            kh, kw = layer.kernel_size
            ph, pw = layer.padding
            y = f"conv{conv}"
            nodes.append(node("Conv", [x, w, b], [y], y, [
                attr_ints("dilations", list(layer.dilation)),
                attr_int("group", 1),
                attr_ints("kernel_shape", [kh, kw]),
                attr_ints("pads", [ph, pw, ph, pw]),
                attr_ints("strides", list(layer.stride)),
            ]))
        elif isinstance(layer, torch.nn.ReLU):
            relu += 1
            y = f"relu{relu}"
            nodes.append(node("Relu", [x], [y], y))
        elif isinstance(layer, torch.nn.MaxPool2d):
            pool += 1
            y = f"pool{pool}"
            k, s = layer.kernel_size, layer.stride
            nodes.append(node("MaxPool", [x], [y], y, [
                attr_int("ceil_mode", 0),
                attr_ints("kernel_shape", [k, k]),
                attr_ints("pads", [0, 0, 0, 0]),
                attr_ints("strides", [s, s]),
            ]))
        else:
            raise SystemExit(f"unexpected layer {layer}")
        x = y
    graph = b"".join(f_bytes(1, n) for n in nodes)
    graph += f_bytes(2, "vgg16_features")
    graph += b"".join(f_bytes(5, t) for t in inits)
    graph += f_bytes(11, f_bytes(1, "input"))
    graph += f_bytes(12, f_bytes(1, x))
    opset = f_bytes(1, "") + f_varint(2, 13)
    return f_varint(1, 7) + f_bytes(2, "make_reference_model") + f_bytes(7, graph) + f_bytes(8, opset)


# -- golden outputs ---------------------------------------------------------------------


def write_phn(path, matrix):
    matrix = np.ascontiguousarray(matrix, dtype="<f4")
    rows, dim = matrix.shape
    with open(path, "wb") as fh:
        fh.write(b"PHEN" + bytes([1]) + struct.pack("<II", rows, dim) + matrix.tobytes())


def preprocess(rgb8):
    x = rgb8.astype(np.float32) / np.float32(255.0)
    x = (x - MEANS) / STDS
    h, w = x.shape[:2]
    ph = -(-h // PAD_MULTIPLE) * PAD_MULTIPLE
    pw = -(-w // PAD_MULTIPLE) * PAD_MULTIPLE
    out = np.empty((ph, pw, 3), dtype=np.float32)
    out[:] = (np.float32(0.0) - MEANS) / STDS
    out[:h, :w] = x
    return torch.from_numpy(out.transpose(2, 0, 1).copy()).unsqueeze(0)


def tapped(features, x):
    wanted = {c for c, _ in TAPS}
    out = {}
    conv = 0
    with torch.no_grad():
        for layer in features:
            x = layer(x)
            if isinstance(layer, torch.nn.Conv2d):
                conv += 1
                if conv in wanted:
                    out[conv] = x[0].clone()
                    if conv == max(wanted):
                        return out
    return out


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True, type=Path)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--weights", default=os.environ.get("VGG16_WEIGHTS"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)

    model = torchvision.models.vgg16(weights=None)
    provenance = {"kind": "seeded", "seed": args.seed}
    if args.weights:
        digest = sha256(args.weights)
        model.load_state_dict(torch.load(args.weights, map_location="cpu"))
        provenance = {"kind": "published" if digest.startswith(PUBLISHED_PREFIX) else "checkpoint",
                      "file": str(Path(args.weights).resolve()), "sha256": digest}
    else:
        torch.manual_seed(args.seed)
        for m in model.features:
            if isinstance(m, torch.nn.Conv2d):
                torch.nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                torch.nn.init.uniform_(m.bias, -0.1, 0.1)
    features = model.features.eval()

    model_path = args.out / "vgg16_features.onnx"
    model_path.write_bytes(encode_model(features))
    try:
        import onnx

        onnx.checker.check_model(onnx.load(str(model_path)))
    except ImportError:
        pass

    index = {"model": model_path.name, "model_sha256": sha256(model_path), "weights": provenance,
             "taps": [list(t) for t in TAPS], "pad_multiple": PAD_MULTIPLE,
             "means": MEANS.tolist(), "stds": STDS.tolist(), "images": []}
    for name, crop in IMAGES:
        rgb = np.ascontiguousarray(crop())
        png = args.out / f"{name}.png"
        Image.fromarray(rgb).save(png)
        x = preprocess(rgb)
        maps = tapped(features, x)
        entry = {"name": name, "png": png.name, "height": rgb.shape[0], "width": rgb.shape[1],
                 "padded_height": x.shape[2], "padded_width": x.shape[3], "maps": []}
        for conv, channels in TAPS:
            m = maps[conv].numpy()
            assert m.shape[0] == channels
            f = args.out / f"{name}_conv{conv}.phn"
            write_phn(f, m.reshape(m.shape[0], -1))
            entry["maps"].append({"conv": conv, "file": f.name, "channels": int(m.shape[0]),
                                  "height": int(m.shape[1]), "width": int(m.shape[2]),
                                  "min": float(m.min())})
        index["images"].append(entry)
    (args.out / "golden.json").write_text(json.dumps(index, indent=1) + "\n")
    print(f"wrote {model_path} and golden maps for {len(IMAGES)} images ({provenance['kind']} weights)")


if __name__ == "__main__":
    main()
