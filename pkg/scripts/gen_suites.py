"""Regenerate src/speedsim/suites/*.json from the public layer definitions below.

Only conv / linear layers become entries.  Pooling, activations, norms,
softmax and residual adds are counted in ``skipped``.  Attention matmuls are
listed once per head with ``repeat`` carrying the multiplicity.
"""

import json
import math
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "speedsim" / "suites"


def conv(name, cin, cout, h, k, s=1, p=None, w=None):
    p = k // 2 if p is None else p
    kind = "PWCV" if k == 1 else "CONV"
    return {"name": name, "kind": kind, "cin": cin, "cout": cout, "h": h, "w": w or h, "k": k, "s": s, "p": p}


def dw(name, c, h, k=3, s=1, p=1):
    return {"name": name, "kind": "DWCV", "cin": c, "cout": c, "h": h, "w": h, "k": k, "s": s, "p": p}


def mm(name, m, k, n, repeat=1):
    d = {"name": name, "kind": "MM", "M": m, "K": k, "N": n}
    if repeat != 1:
        d["repeat"] = repeat
    return d


def out_size(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def vgg16():
    cfg = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M"]
    layers, cin, h, skipped, i = [], 3, 224, 0, 0
    for c in cfg:
        if c == "M":
            h //= 2
            skipped += 1
            continue
        i += 1
        layers.append(conv(f"conv{i}", cin, c, h, 3))
        cin = c
        skipped += 1  # relu
    layers += [mm("fc6", 1, 512 * 7 * 7, 4096), mm("fc7", 1, 4096, 4096), mm("fc8", 1, 4096, 1000)]
    return layers, skipped + 2


def resnet18():
    layers = [conv("conv1", 3, 64, 224, 7, 2, 3)]
    skipped = 3  # bn, relu, maxpool
    h, cin = 56, 64
    for stage, cout in enumerate((64, 128, 256, 512), start=1):
        for blk in range(2):
            s = 2 if stage > 1 and blk == 0 else 1
            layers.append(conv(f"layer{stage}.{blk}.conv1", cin, cout, h, 3, s, 1))
            ho = out_size(h, 3, s, 1)
            layers.append(conv(f"layer{stage}.{blk}.conv2", cout, cout, ho, 3, 1, 1))
            if s != 1 or cin != cout:
                layers.append(conv(f"layer{stage}.{blk}.downsample", cin, cout, h, 1, s, 0))
            skipped += 5  # 2 bn, 2 relu, add
            h, cin = ho, cout
    layers.append(mm("fc", 1, 512, 1000))
    return layers, skipped + 1


def googlenet():
    layers = [conv("conv1", 3, 64, 224, 7, 2, 3), conv("conv2", 64, 64, 56, 1), conv("conv3", 64, 192, 56, 3)]
    skipped = 4
    blocks = [("3a", 192, 64, 96, 128, 16, 32, 32, 28), ("3b", 256, 128, 128, 192, 32, 96, 64, 28),
              ("4a", 480, 192, 96, 208, 16, 48, 64, 14), ("4b", 512, 160, 112, 224, 24, 64, 64, 14),
              ("4c", 512, 128, 128, 256, 24, 64, 64, 14), ("4d", 512, 112, 144, 288, 32, 64, 64, 14),
              ("4e", 528, 256, 160, 320, 32, 128, 128, 14), ("5a", 832, 256, 160, 320, 32, 128, 128, 7),
              ("5b", 832, 384, 192, 384, 48, 128, 128, 7)]
    for name, cin, c1, r3, c3, r5, c5, pp, h in blocks:
        layers += [conv(f"inception{name}.1x1", cin, c1, h, 1), conv(f"inception{name}.3x3red", cin, r3, h, 1),
                   conv(f"inception{name}.3x3", r3, c3, h, 3), conv(f"inception{name}.5x5red", cin, r5, h, 1),
                   conv(f"inception{name}.5x5", r5, c5, h, 5), conv(f"inception{name}.poolproj", cin, pp, h, 1)]
        skipped += 2  # branch pool, concat
    layers.append(mm("fc", 1, 1024, 1000))
    return layers, skipped + 4


def mobilenetv2():
    layers = [conv("conv0", 3, 32, 224, 3, 2, 1)]
    skipped = 1
    h, cin = 112, 32
    table = [(1, 16, 1, 1), (6, 24, 2, 2), (6, 32, 3, 2), (6, 64, 4, 2), (6, 96, 3, 1), (6, 160, 3, 2), (6, 320, 1, 1)]
    b = 0
    for t, c, n, s in table:
        for i in range(n):
            stride = s if i == 0 else 1
            hid = cin * t
            if t != 1:
                layers.append(conv(f"block{b}.expand", cin, hid, h, 1))
            layers.append(dw(f"block{b}.dw", hid, h, 3, stride, 1))
            ho = out_size(h, 3, stride, 1)
            layers.append(conv(f"block{b}.project", hid, c, ho, 1))
            skipped += 2 + (stride == 1 and cin == c)
            h, cin, b = ho, c, b + 1
    layers.append(conv("conv_last", 320, 1280, h, 1))
    layers.append(mm("classifier", 1, 1280, 1000))
    return layers, skipped + 2


def vit(dim, depth, heads, mlp, img=224, patch=16, classes=1000):
    tokens = (img // patch) ** 2 + 1
    hd = dim // heads
    layers = [conv("patch_embed", 3, dim, img, patch, patch, 0)]
    skipped = 1
    for i in range(depth):
        layers += [mm(f"block{i}.qkv", tokens, dim, 3 * dim), mm(f"block{i}.attn_qk", tokens, hd, tokens, heads),
                   mm(f"block{i}.attn_v", tokens, tokens, hd, heads), mm(f"block{i}.proj", tokens, dim, dim),
                   mm(f"block{i}.fc1", tokens, dim, mlp), mm(f"block{i}.fc2", tokens, mlp, dim)]
        skipped += 6  # 2 layernorm, softmax, gelu, 2 residual adds
    layers.append(mm("head", 1, dim, classes))
    return layers, skipped + 1


def _ch(c, chan):
    return c if c <= 16 else max(16, c // chan)


def shrink(layers, spatial=16, chan=8):
    """Scaled-down copy for CI: spatial dims / ``spatial`` and channels / ``chan``."""
    out = []
    for d in layers:
        d = dict(d)
        if d["kind"] == "MM":
            d["M"] = max(1, math.ceil(d["M"] / chan))
            d["K"] = max(1, math.ceil(d["K"] / chan))
            d["N"] = max(1, math.ceil(d["N"] / chan))
        else:
            h = max(d["k"], math.ceil(d["h"] / spatial))
            d["h"] = d["w"] = h
            # keep at least 16 channels so every lane still has a channel group
            d["cin"] = _ch(d["cin"], chan)
            d["cout"] = d["cin"] if d["kind"] == "DWCV" else _ch(d["cout"], chan)
        out.append(d)
    return out


def operators():
    return [conv("PWCV", 32, 32, 16, 1), conv("CONV3x3", 16, 16, 16, 3), dw("DWCV3x3_s2", 32, 32, 3, 2, 1),
            conv("CONV5x5", 16, 16, 16, 5), mm("MM64", 64, 64, 64)]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    models = {"vgg16": vgg16(), "resnet18": resnet18(), "googlenet": googlenet(), "mobilenetv2": mobilenetv2(),
              "vit_tiny": vit(192, 12, 3, 768), "vit_b16": vit(768, 12, 12, 3072)}
    suites = {}
    for name, (layers, skipped) in models.items():
        suites[name] = {"name": name, "source": "standard public architecture definition, 224x224 input, batch 1",
                        "skipped": skipped, "layers": layers}
        suites[f"{name}_mini"] = {"name": f"{name}_mini", "source": f"{name} scaled down for CI",
                                  "skipped": skipped, "layers": shrink(layers)}
    suites["operators"] = {"name": "operators", "source": "the four benchmark operator classes plus a 64^3 MM",
                           "precisions": [16, 8, 4], "skipped": 0, "layers": operators()}
    suites["empty"] = {"name": "empty", "source": "no layers", "skipped": 0, "layers": []}
    for name, data in suites.items():
        (OUT / f"{name}.json").write_text(json.dumps(data, indent=1) + "\n")


if __name__ == "__main__":
    main()
