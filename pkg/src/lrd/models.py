"""Model files: ordered layer lists with structural flags, plus deterministic
weight seeding for models shipped without checkpoints.

A model file is JSON:

    {"name": ..., "input_resolution": 224, "layers": [ {LayerSpec fields}, ... ]}

Shape chains are validated on load: along the main chain (``skip_branch``
entries hang off it), each layer's input channels must equal the previous
layer's output channels, and spatial sizes must follow the stride/padding
arithmetic (``pool_after`` inserts a stride-2 3x3 max pool, as after the
ResNet stem).  Linear layers follow a global average pool and reset the
spatial chain.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .planner import LayerSpec

FIXTURE_NAMES = ("resnet50", "resnet101", "resnet152")


class ModelFileError(ValueError):
    """Schema or shape-chain violation in a model file."""


def load_model_file(path) -> tuple[str, list[LayerSpec]]:
    text = Path(path).read_text()
    return parse_model_file(text, source=str(path))


def fixture_path(name: str) -> Path:
    if name not in FIXTURE_NAMES:
        raise ModelFileError(f"unknown fixture {name!r}, have {FIXTURE_NAMES}")
    return Path(resources.files("lrd") / "fixtures" / f"{name}.json")


def load_fixture(name: str) -> tuple[str, list[LayerSpec]]:
    return load_model_file(fixture_path(name))


def parse_model_file(text: str, source: str = "<model>") -> tuple[str, list[LayerSpec]]:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFileError(f"{source}: not valid JSON ({exc})") from exc
    for key in ("name", "layers"):
        if key not in obj:
            raise ModelFileError(f"{source}: missing top-level field {key!r}")
    layers = []
    for i, entry in enumerate(obj["layers"]):
        try:
            layers.append(LayerSpec(**entry))
        except (TypeError, ValueError) as exc:
            where = entry.get("name", f"layers[{i}]") if isinstance(entry, dict) else f"layers[{i}]"
            raise ModelFileError(f"{source}: layer {where}: {exc}") from exc
    validate_chain(layers, source)
    return obj["name"], layers


def validate_chain(layers: list[LayerSpec], source: str = "<model>") -> None:
    prev_out = None
    hw = None
    for spec in layers:
        if spec.skip_branch:
            continue
        if spec.kind == "linear":
            prev_out = spec.c_out
            hw = 1
            continue
        if prev_out is not None and spec.c_in != prev_out:
            raise ModelFileError(
                f"{source}: layer {spec.name}: input channels {spec.c_in} "
                f"!= previous output channels {prev_out}"
            )
        if hw is not None and spec.input_hw != hw:
            raise ModelFileError(
                f"{source}: layer {spec.name}: input size {spec.input_hw} "
                f"!= chained size {hw}"
            )
        prev_out = spec.c_out
        hw = spec.out_hw
        if spec.pool_after:
            hw = (hw + 2 - 3) // 2 + 1
        if hw < 1:
            raise ModelFileError(f"{source}: layer {spec.name}: spatial size collapses")


def dump_model_file(name: str, layers: list[LayerSpec]) -> str:
    return json.dumps(
        {"name": name, "input_resolution": layers[0].input_hw if layers else 0,
         "layers": [asdict(s) for s in layers]},
        indent=2,
    )


def seed_weights(spec: LayerSpec, seed: int) -> np.ndarray:
    """Deterministic Kaiming-style (fan-in scaled) weights for a layer.

    The per-layer stream is derived from the seed and a CRC of the layer
    name, so weights are independent of layer ordering.
    """
    rng = np.random.default_rng([seed, zlib.crc32(spec.name.encode())])
    fan_in = spec.c_in * spec.k * spec.k // spec.groups
    std = np.sqrt(2.0 / fan_in)
    shape = (spec.c_in // spec.groups, spec.c_out, spec.k, spec.k)
    return rng.normal(0.0, std, size=shape)


def seed_bias(spec: LayerSpec, seed: int) -> np.ndarray | None:
    if not spec.bias:
        return None
    rng = np.random.default_rng([seed, zlib.crc32((spec.name + "/bias").encode())])
    fan_in = spec.c_in * spec.k * spec.k // spec.groups
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=spec.c_out)
