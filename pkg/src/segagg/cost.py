"""Analytic MAC and parameter accounting for staged 3D ResNets.

Conventions, stated once and carried in every report:

* one multiply-add counts as one FLOP;
* batch norm, ReLU and pooling cost nothing at run time;
* convs are bias-free and followed by BN (2 * Cout parameters); the classifier
  has a bias;
* padding is centered (``k // 2``), so a stride-1 conv keeps its extent;
* a clip of ``U`` snippets costs ``U`` times one snippet; weights are shared.

Spatial stride of a residual stage is carried by its first block, on the
first layer with a spatial kernel larger than one (the 3x3 conv), and by a
1x1^2 projection shortcut whenever channels or stride change.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .dsa import DsaConfig, dsa_cost_items, dsa_param_count

CONVENTION = "1 MAC = 1 FLOP; BN/ReLU/pool free; per-crop, U snippets summed"

_SHAPE3 = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 3, "maxItems": 3}
_STRIDE = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 2, "maxItems": 2}

ARCH_SCHEMA = {
    "type": "object",
    "required": ["name", "input", "stem", "stages", "head"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "data_layer": {
            "type": "object",
            "properties": {
                "temporal_stride": {"type": "integer", "minimum": 1},
                "spatial_stride": {"type": "integer", "minimum": 1},
            },
        },
        "input": {
            "type": "object",
            "required": ["frames", "resolution", "channels"],
            "properties": {
                "frames": {"type": "integer", "minimum": 1},
                "resolution": {"type": "integer", "minimum": 1},
                "channels": {"type": "integer", "minimum": 1},
            },
        },
        "stem": {
            "type": "object",
            "required": ["kernel", "channels", "stride"],
            "properties": {
                "kernel": _SHAPE3,
                "channels": {"type": "integer", "minimum": 1},
                "stride": _STRIDE,
                "pool": {
                    "type": "object",
                    "required": ["kernel", "stride"],
                    "properties": {"kernel": _SHAPE3, "stride": _STRIDE},
                },
            },
        },
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "block", "repeat", "stride", "layers"],
                "properties": {
                    "name": {"type": "string"},
                    "block": {"enum": ["basic", "bottleneck"]},
                    "repeat": {"type": "integer", "minimum": 1},
                    "stride": _STRIDE,
                    "layers": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["kernel", "channels"],
                            "properties": {
                                "kernel": _SHAPE3,
                                "channels": {"type": "integer", "minimum": 1},
                            },
                        },
                    },
                },
            },
        },
        "head": {
            "type": "object",
            "required": ["num_classes"],
            "properties": {"num_classes": {"type": "integer", "minimum": 1}},
        },
        "output_sizes": {"type": "object", "additionalProperties": _SHAPE3},
    },
}


class ArchSpecError(ValueError):
    pass


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str  # "conv" or "fc"
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int] = (1, 1, 1)
    stride: tuple[int, int] = (1, 1)  # (temporal, spatial)
    bn: bool = True
    bias: bool = False


@dataclass(frozen=True)
class ArchSpec:
    name: str
    raw: dict

    @property
    def stages(self) -> list[dict]:
        return self.raw["stages"]

    @property
    def num_classes(self) -> int:
        return self.raw["head"]["num_classes"]

    def stage(self, name: str) -> dict:
        for s in self.stages:
            if s["name"] == name:
                return s
        raise KeyError(f"{self.name} has no stage {name!r}")


def parse_arch(text: str, source: str = "<string>") -> ArchSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArchSpecError(f"{source}:{e.lineno}:{e.colno}: {e.msg}") from None
    try:
        jsonschema.validate(raw, ARCH_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ArchSpecError(f"{source}: at {where}: {e.message}") from None
    return ArchSpec(raw["name"], raw)


def builtin_archs() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("segagg.archs").iterdir() if p.name.endswith(".json"))


def load_arch(name_or_path: str | Path) -> ArchSpec:
    """Load a built-in arch by name (``i3d_r18``, ``i3d_r50``) or a JSON file by path."""
    name = str(name_or_path)
    if name in builtin_archs():
        text = resources.files("segagg.archs").joinpath(f"{name}.json").read_text()
        return parse_arch(text, f"{name}.json")
    path = Path(name_or_path)
    if not path.exists():
        raise ArchSpecError(f"{name}: no such built-in arch or file (built-ins: {', '.join(builtin_archs())})")
    return parse_arch(path.read_text(), str(path))


def _out_extent(n: int, k: int, s: int) -> int:
    return (n + 2 * (k // 2) - k) // s + 1


def output_shape(layer: Layer, input_shape) -> tuple[int, int, int]:
    t, h, w = input_shape
    kt, kh, kw = layer.kernel
    st, ss = layer.stride
    out = (_out_extent(t, kt, st), _out_extent(h, kh, ss), _out_extent(w, kw, ss))
    if min(out) < 1:
        raise ArchSpecError(f"{layer.name}: input {tuple(input_shape)} too small for kernel {layer.kernel}")
    return out


def layer_cost(layer: Layer, input_shape) -> tuple[int, int]:
    """(MACs, params) of one layer for one snippet of shape (T, H, W)."""
    if layer.kind == "fc":
        macs = layer.in_channels * layer.out_channels
        return macs, macs + (layer.out_channels if layer.bias else 0)
    if layer.kind != "conv":
        raise ArchSpecError(f"{layer.name}: unknown layer kind {layer.kind!r}")
    if min(layer.stride) < 1:
        raise ArchSpecError(f"{layer.name}: stride must be >= 1, got {layer.stride}")
    ot, oh, ow = output_shape(layer, input_shape)
    weights = layer.out_channels * layer.in_channels * layer.kernel[0] * layer.kernel[1] * layer.kernel[2]
    params = weights + (layer.out_channels if layer.bias else 0) + (2 * layer.out_channels if layer.bn else 0)
    return weights * ot * oh * ow, params


@dataclass
class CostLine:
    name: str
    macs: int
    params: int
    output: tuple[int, ...] = ()


@dataclass
class CostReport:
    """Line items with clip-level MACs (U snippets summed) and shared parameters."""

    arch: str = ""
    frames: int = 0
    resolution: int = 0
    snippets: int = 1
    convention: str = CONVENTION
    lines: list[CostLine] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(line.macs for line in self.lines)

    @property
    def total_params(self) -> int:
        return sum(line.params for line in self.lines)

    @property
    def conv_macs(self) -> int:
        return sum(line.macs for line in self.lines if not line.name.startswith("fc"))

    @property
    def gflops(self) -> float:
        return self.total_macs / 1e9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lines"] = [dict(asdict(line), output=list(line.output)) for line in self.lines]
        d["total_macs"] = self.total_macs
        d["total_params"] = self.total_params
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CostReport":
        lines = [CostLine(x["name"], x["macs"], x["params"], tuple(x["output"])) for x in d["lines"]]
        return cls(d["arch"], d["frames"], d["resolution"], d["snippets"], d["convention"], lines)


def _stage_layers(stage: dict, block_index: int, in_channels: int, prefix: str):
    """Layers of one residual block, plus the projection shortcut if any."""
    st, ss = stage["stride"] if block_index == 0 else (1, 1)
    layers = []
    c = in_channels
    stride_at = next((i for i, l in enumerate(stage["layers"]) if l["kernel"][1] > 1), 0)
    for i, spec in enumerate(stage["layers"]):
        stride = (st, ss) if i == stride_at else (1, 1)
        layers.append(Layer(f"{prefix}.conv{i + 1}", "conv", c, spec["channels"], tuple(spec["kernel"]), stride))
        c = spec["channels"]
    shortcut = None
    if in_channels != c or (st, ss) != (1, 1):
        shortcut = Layer(f"{prefix}.shortcut", "conv", in_channels, c, (1, 1, 1), (st, ss))
    return layers, shortcut


def walk(arch: ArchSpec, frames: int, resolution: int, num_classes: int | None = None):
    """Yield (layer, input_shape, output_shape) for one snippet, in execution order."""
    raw = arch.raw
    shape = (frames, resolution, resolution)
    stem = raw["stem"]
    conv1 = Layer("conv1", "conv", raw["input"]["channels"], stem["channels"], tuple(stem["kernel"]), tuple(stem["stride"]))
    out = output_shape(conv1, shape)
    yield conv1, shape, out
    shape = out
    if "pool" in stem:
        pool = Layer("pool1", "pool", stem["channels"], stem["channels"], tuple(stem["pool"]["kernel"]), tuple(stem["pool"]["stride"]))
        out = output_shape(pool, shape)
        yield pool, shape, out
        shape = out
    c = stem["channels"]
    for stage in arch.stages:
        for b in range(stage["repeat"]):
            layers, shortcut = _stage_layers(stage, b, c, f"{stage['name']}.block{b}")
            block_in = shape
            for layer in layers:
                out = output_shape(layer, shape)
                yield layer, shape, out
                shape = out
            if shortcut is not None:
                sc_out = output_shape(shortcut, block_in)
                if sc_out != shape:
                    raise ArchSpecError(f"{shortcut.name}: shortcut shape {sc_out} != branch shape {shape}")
                yield shortcut, block_in, sc_out
            c = layers[-1].out_channels
    classes = arch.num_classes if num_classes is None else num_classes
    yield Layer("fc", "fc", c, classes, bn=False, bias=True), shape, (classes,)


def stage_output_sizes(arch: ArchSpec, frames: int, resolution: int) -> dict[str, tuple[int, int, int]]:
    sizes = {}
    for layer, _, out in walk(arch, frames, resolution):
        if layer.kind == "fc":
            continue
        key = layer.name.split(".")[0]
        if not layer.name.endswith("shortcut"):
            sizes[key] = out
    return sizes


def check_output_sizes(arch: ArchSpec) -> None:
    """Compare stage outputs at the declared input against ``output_sizes``."""
    declared = arch.raw.get("output_sizes", {})
    got = stage_output_sizes(arch, arch.raw["input"]["frames"], arch.raw["input"]["resolution"])
    for stage, want in declared.items():
        if stage not in got:
            raise ArchSpecError(f"{arch.name}: output_sizes names unknown stage {stage!r}")
        if tuple(want) != got[stage]:
            raise ArchSpecError(f"{arch.name}: {stage} outputs {got[stage]}, declared {tuple(want)}")


def arch_cost(
    arch: ArchSpec,
    frames: int,
    resolution: int,
    snippets: int = 1,
    num_classes: int | None = None,
) -> CostReport:
    """Clip-level cost of ``snippets`` snippets of ``frames`` x ``resolution``^2 each."""
    report = CostReport(arch.name, frames, resolution, snippets)
    for layer, shape, out in walk(arch, frames, resolution, num_classes):
        if layer.kind == "pool":
            continue
        macs, params = layer_cost(layer, shape)
        report.lines.append(CostLine(layer.name, snippets * macs, params, tuple(out)))
    return report


def every_other_block(arch: ArchSpec, stages) -> dict[str, list[int]]:
    """One DSA block per two residual blocks (odd indices) in each named stage."""
    return {s: list(range(1, arch.stage(s)["repeat"], 2)) for s in stages}


def host_shapes(arch: ArchSpec, frames: int, resolution: int, position: str = "II"):
    """Map (stage, block) -> (channels, (T, H, W)) of the tensor a DSA module sees."""
    raw = arch.raw
    shape = (frames, resolution, resolution)
    for layer, _, out in walk(arch, frames, resolution):
        if layer.name == "pool1" or (layer.name == "conv1" and "pool" not in raw["stem"]):
            shape = out
    hosts = {}
    c = raw["stem"]["channels"]
    for stage in arch.stages:
        for b in range(stage["repeat"]):
            layers, _ = _stage_layers(stage, b, c, "")
            seen = [(c, shape)]
            for layer in layers:
                shape = output_shape(layer, shape)
                seen.append((layer.out_channels, shape))
            index = {"I": 0, "II": 1, "III": 2, "IV": len(layers)}[position]
            if index > len(layers) or (position == "III" and len(layers) < 3):
                raise ArchSpecError(f"position {position} does not exist in a {stage['block']} block")
            hosts[(stage["name"], b)] = seen[index]
            c = layers[-1].out_channels
    return hosts


def dsa_overhead(
    arch: ArchSpec,
    placement: dict[str, list[int]],
    cfg: DsaConfig,
    frames: int,
    resolution: int,
    position: str = "II",
) -> CostReport:
    """Extra MACs and parameters of DSA modules inserted at ``placement``.

    ``cfg.channels`` is ignored; each module takes the host width. DSA spans
    the snippet axis, so its MACs are counted once per clip of ``cfg.snippets``.
    """
    hosts = host_shapes(arch, frames, resolution, position)
    report = CostReport(f"{arch.name}+dsa", frames, resolution, cfg.snippets)
    for stage, blocks in placement.items():
        arch.stage(stage)
        for b in blocks:
            if (stage, b) not in hosts:
                raise ArchSpecError(f"{stage} has no block {b}")
            c, (t, h, w) = hosts[(stage, b)]
            local = DsaConfig(c, cfg.snippets, cfg.kernel_size, cfg.alpha, cfg.beta, cfg.context)
            macs = dsa_cost_items(local, (1, c, cfg.snippets, t, h, w))["total"]
            params = dsa_param_count(local) if local.split > 0 else 0
            report.lines.append(CostLine(f"{stage}.block{b}.dsa", macs, params, (c, cfg.snippets, t, h, w)))
    return report


def report_render(report: CostReport, fmt: str = "table") -> str:
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt != "table":
        raise ValueError(f"unknown format {fmt!r}")
    head = (
        f"# {report.arch} frames={report.frames} res={report.resolution} snippets={report.snippets}\n"
        f"# {report.convention}\n"
        f"{'layer':<28} {'output':<18} {'MACs':>16} {'params':>12}\n"
    )
    if not report.lines:
        return head
    rows = []
    for line in report.lines:
        shape = "x".join(str(e) for e in line.output)
        rows.append(f"{line.name:<28} {shape:<18} {line.macs:>16} {line.params:>12}\n")
    total = f"{'total':<28} {'':<18} {report.total_macs:>16} {report.total_params:>12}\n"
    summary = f"# {report.total_macs / 1e9:.3f} GFLOPs, {report.total_params / 1e6:.3f} M params\n"
    return head + "".join(rows) + total + summary
