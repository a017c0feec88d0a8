"""Regenerate the ResNet bottleneck fixtures shipped with the package.

Run from the repo root:  python scripts/make_fixtures.py
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from lrd.models import dump_model_file, validate_chain
from lrd.planner import LayerSpec

# (name, blocks per stage)
CONFIGS = {
    "resnet50": (3, 4, 6, 3),
    "resnet101": (3, 4, 23, 3),
    "resnet152": (3, 8, 36, 3),
}

# layer1.0.conv1 stays original in the deeper nets' reference runs; the
# exclusion flag reproduces the published decomposed-layer counts.
EXCLUDED = {
    "resnet101": {"layer1.0.conv1"},
    "resnet152": {"layer1.0.conv1"},
}


def bottleneck(name, c_in, width, stride, hw, excluded):
    """One bottleneck: 1x1 reduce, 3x3, 1x1 expand (+ optional downsample).

    Intra-block ReLUs are not flagged between conv1/conv2 and conv2/conv3 so
    that factor-merging can absorb the Tucker 1x1 factors into the
    neighbouring 1x1 convs; the block-output ReLU sits after conv3.
    """
    out = 4 * width
    hw_out = hw // stride if stride > 1 else hw
    layers = [
        LayerSpec(name=f"{name}.conv1", kind="conv", c_in=c_in, c_out=width,
                  k=1, stride=1, input_hw=hw,
                  decompose=f"{name}.conv1" not in excluded),
        LayerSpec(name=f"{name}.conv2", kind="conv", c_in=width, c_out=width,
                  k=3, stride=stride, padding=1, input_hw=hw),
        LayerSpec(name=f"{name}.conv3", kind="conv", c_in=width, c_out=out,
                  k=1, stride=1, input_hw=hw_out, relu_after=True),
    ]
    if c_in != out or stride > 1:
        layers.append(
            LayerSpec(name=f"{name}.downsample", kind="conv", c_in=c_in,
                      c_out=out, k=1, stride=stride, input_hw=hw,
                      counted=False, skip_branch=True)
        )
    return layers, out, hw_out


def build(name, blocks):
    layers = [
        LayerSpec(name="conv1", kind="conv", c_in=3, c_out=64, k=7, stride=2,
                  padding=3, input_hw=224, decompose=False, relu_after=True,
                  pool_after=True)
    ]
    excluded = EXCLUDED.get(name, set())
    c_in, hw = 64, 56
    for stage, (width, count) in enumerate(zip((64, 128, 256, 512), blocks), start=1):
        for b in range(count):
            stride = 2 if stage > 1 and b == 0 else 1
            blk, c_in, hw = bottleneck(
                f"layer{stage}.{b}", c_in, width, stride, hw, excluded
            )
            layers.extend(blk)
    layers.append(
        LayerSpec(name="fc", kind="linear", c_in=2048, c_out=1001, bias=True,
                  input_hw=1)
    )
    validate_chain(layers, name)
    return layers


def main():
    outdir = Path(__file__).resolve().parents[1] / "src" / "lrd" / "fixtures"
    outdir.mkdir(parents=True, exist_ok=True)
    for name, blocks in CONFIGS.items():
        layers = build(name, blocks)
        (outdir / f"{name}.json").write_text(dump_model_file(name, layers) + "\n")
        counted = sum(1 for s in layers if s.counted)
        print(f"{name}: {len(layers)} entries, {counted} counted layers")


if __name__ == "__main__":
    main()
