"""Three-level top-down fusion neck.

Each backbone level (c3, c4, c5) is projected to the shared pyramid width,
passed through a bank of parallel dilated 3x3 convolutions whose concatenated
output is fused by a 1x1 projection and recalibrated by concurrent
spatial/channel gates.  The top-down pathway upsamples each coarser output
with a learned 2x stride-2 transposed convolution and multiplies it by a
global gate pooled from a register-biased self-attention pass over the
pre-upsample map, then adds the lateral branch:

    p5 = block(project(c5))
    p4 = block(project(c4)) + gate(p5) ⊙ upsample(p5)
    p3 = block(project(c3)) + gate(p4) ⊙ upsample(p4)

Ablation switches select plain (single dilation-1) convolution, skip the
gate recalibration, drop the attention gate, or zero out the registers.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass

import numpy as np

from .attention import (
    MhsaParams,
    RegisterTokens,
    ScseParams,
    mhsa_forward,
    scse_recalibrate,
)
from .convkit import ConvKernel, DeconvKernel, conv2d, deconv2x, pointwise_conv
from .errors import ConfigError, ParamsIOError, ShapeError
from .tensor import (
    Matrix,
    Rng,
    Tape,
    Tensor4,
    Value,
    add,
    concat_channels,
    global_avg_pool,
    logistic,
    mul,
)

PARAMS_MAGIC = "fusionneck-params"
PARAMS_FORMAT_VERSION = 1

GATING_MODES = ("raw", "logistic")
ATROUS_MODES = ("standard", "atrous", "attention_atrous")

LEVELS = (3, 4, 5)
STEPS = ("to4", "to3")


@dataclass(frozen=True)
class NeckConfig:
    """Structural hyperparameters; every parameter shape derives from these."""

    pyramid_width: int = 64
    head_count: int = 4
    register_count: int | None = None  # defaults to head_count
    dilations: tuple[int, ...] = (1, 2, 3)
    gating_mode: str = "logistic"
    use_mhsa: bool = True
    use_registers: bool = True
    atrous_mode: str = "attention_atrous"
    init_sigma: float = 0.01
    scse_reduction: int = 4
    in_channels: tuple[int, int, int] = (16, 32, 64)
    base_height: int = 32
    base_width: int = 32

    def __post_init__(self) -> None:
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        object.__setattr__(self, "in_channels", tuple(int(c) for c in self.in_channels))
        self.validate()

    def validate(self) -> None:
        c = self.pyramid_width
        if c < 1:
            raise ConfigError(f"pyramid_width must be >= 1, got {c}")
        if self.head_count < 1:
            raise ConfigError(f"head_count must be >= 1, got {self.head_count}")
        if c % self.head_count != 0:
            raise ConfigError(f"pyramid_width {c} not divisible by head_count {self.head_count}")
        if self.register_count is not None and self.register_count != self.head_count:
            raise ConfigError(
                f"register_count {self.register_count} must equal head_count {self.head_count}"
            )
        if not self.dilations or any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be a non-empty set of ints >= 1, got {self.dilations}")
        if len(set(self.dilations)) != len(self.dilations):
            raise ConfigError(f"dilations must be distinct, got {self.dilations}")
        if self.gating_mode not in GATING_MODES:
            raise ConfigError(f"gating_mode must be one of {GATING_MODES}, got {self.gating_mode!r}")
        if self.atrous_mode not in ATROUS_MODES:
            raise ConfigError(f"atrous_mode must be one of {ATROUS_MODES}, got {self.atrous_mode!r}")
        if self.init_sigma < 0:
            raise ConfigError(f"init_sigma must be >= 0, got {self.init_sigma}")
        if self.scse_reduction < 1 or c % self.scse_reduction != 0:
            raise ConfigError(
                f"scse_reduction {self.scse_reduction} must divide pyramid_width {c}"
            )
        if len(self.in_channels) != 3 or any(ci < 1 for ci in self.in_channels):
            raise ConfigError(f"in_channels must be three positive ints, got {self.in_channels}")
        if self.base_height % 4 or self.base_width % 4 or self.base_height < 4 or self.base_width < 4:
            raise ConfigError(
                f"base size {self.base_height}x{self.base_width} must be divisible by 4"
            )

    @property
    def effective_register_count(self) -> int:
        return self.head_count if self.register_count is None else self.register_count

    def step_hw(self, step: str) -> tuple[int, int]:
        """Spatial size of the map entering the given top-down step."""
        if step == "to4":
            return self.base_height // 4, self.base_width // 4
        if step == "to3":
            return self.base_height // 2, self.base_width // 2
        raise ConfigError(f"unknown top-down step {step!r}")

    def to_dict(self) -> dict:
        return {
            "pyramid_width": self.pyramid_width,
            "head_count": self.head_count,
            "register_count": self.effective_register_count,
            "dilations": list(self.dilations),
            "gating_mode": self.gating_mode,
            "use_mhsa": self.use_mhsa,
            "use_registers": self.use_registers,
            "atrous_mode": self.atrous_mode,
            "init_sigma": self.init_sigma,
            "scse_reduction": self.scse_reduction,
            "in_channels": list(self.in_channels),
            "base_height": self.base_height,
            "base_width": self.base_width,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NeckConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "dilations" in kwargs:
            kwargs["dilations"] = tuple(kwargs["dilations"])
        if "in_channels" in kwargs:
            kwargs["in_channels"] = tuple(kwargs["in_channels"])
        return cls(**kwargs)


@dataclass
class PyramidIn:
    """Backbone feature maps at base, half, and quarter resolution."""

    c3: Tensor4
    c4: Tensor4
    c5: Tensor4

    def validate(self) -> None:
        b3, _, h, w = self.c3.dims
        if h % 4 or w % 4:
            raise ShapeError(f"c3: spatial dims ({h}, {w}) must be divisible by 4")
        for name, t, div in (("c4", self.c4, 2), ("c5", self.c5, 4)):
            tb, _, th, tw = t.dims
            if tb != b3:
                raise ShapeError(f"{name}: batch {tb} differs from c3 batch {b3}")
            if (th, tw) != (h // div, w // div):
                raise ShapeError(
                    f"{name}: expected spatial ({h // div}, {w // div}), got ({th}, {tw})"
                )

    def level(self, n: int) -> Tensor4:
        return {3: self.c3, 4: self.c4, 5: self.c5}[n]


@dataclass
class PyramidOut:
    """Fused maps at the three lateral resolutions, all pyramid_width wide."""

    p3: Tensor4
    p4: Tensor4
    p5: Tensor4

    def level(self, n: int) -> Tensor4:
        return {3: self.p3, 4: self.p4, 5: self.p5}[n]


@dataclass
class LevelParams:
    """Lateral projection, dilated branch bank, fusion, and gates for one level."""

    lateral: ConvKernel
    branches: list[ConvKernel]
    post: ConvKernel
    scse: ScseParams


@dataclass
class StepParams:
    """Attention gate and learned upsampler for one top-down step."""

    mhsa: MhsaParams
    registers: RegisterTokens
    deconv: DeconvKernel


class NeckParams:
    """All learnable tensors of the neck, addressable by canonical name."""

    def __init__(self, levels: dict[int, LevelParams], steps: dict[str, StepParams], config: NeckConfig):
        self.levels = levels
        self.steps = steps
        self.config = config

    def named_values(self) -> list[tuple[str, Value]]:
        """(name, value) pairs in the canonical serialization order."""
        out: list[tuple[str, Value]] = []
        for n in LEVELS:
            lp = self.levels[n]
            out.append((f"level{n}.lateral.weight", lp.lateral.weight))
            out.append((f"level{n}.lateral.bias", lp.lateral.bias))
            for k in lp.branches:
                out.append((f"level{n}.branch_d{k.dilation}.weight", k.weight))
                out.append((f"level{n}.branch_d{k.dilation}.bias", k.bias))
            out.append((f"level{n}.post.weight", lp.post.weight))
            out.append((f"level{n}.post.bias", lp.post.bias))
            for part, kern in (("reduce", lp.scse.reduce), ("expand", lp.scse.expand), ("spatial", lp.scse.spatial)):
                out.append((f"level{n}.scse.{part}.weight", kern.weight))
                out.append((f"level{n}.scse.{part}.bias", kern.bias))
        for s in STEPS:
            sp = self.steps[s]
            out.append((f"step_{s}.mhsa.w_q", sp.mhsa.w_q))
            out.append((f"step_{s}.mhsa.w_k", sp.mhsa.w_k))
            out.append((f"step_{s}.mhsa.w_v", sp.mhsa.w_v))
            for i, m in enumerate(sp.registers.r_qk):
                out.append((f"step_{s}.registers.r_qk{i}", m))
            for i, m in enumerate(sp.registers.r_v):
                out.append((f"step_{s}.registers.r_v{i}", m))
            out.append((f"step_{s}.deconv.weight", sp.deconv.weight))
            out.append((f"step_{s}.deconv.bias", sp.deconv.bias))
        return out

    def values(self) -> list[Value]:
        return [v for _, v in self.named_values()]

    def zero_grad(self) -> None:
        for v in self.values():
            v.zero_grad()


def parameter_spec(cfg: NeckConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; the single source of truth for layout."""
    c = cfg.pyramid_width
    spec: list[tuple[str, tuple[int, ...]]] = []
    for n, ci in zip(LEVELS, cfg.in_channels):
        spec.append((f"level{n}.lateral.weight", (c, ci, 1, 1)))
        spec.append((f"level{n}.lateral.bias", (c,)))
        for d in cfg.dilations:
            spec.append((f"level{n}.branch_d{d}.weight", (c, c, 3, 3)))
            spec.append((f"level{n}.branch_d{d}.bias", (c,)))
        spec.append((f"level{n}.post.weight", (c, len(cfg.dilations) * c, 1, 1)))
        spec.append((f"level{n}.post.bias", (c,)))
        hidden = c // cfg.scse_reduction
        spec.append((f"level{n}.scse.reduce.weight", (hidden, c, 1, 1)))
        spec.append((f"level{n}.scse.reduce.bias", (hidden,)))
        spec.append((f"level{n}.scse.expand.weight", (c, hidden, 1, 1)))
        spec.append((f"level{n}.scse.expand.bias", (c,)))
        spec.append((f"level{n}.scse.spatial.weight", (1, c, 1, 1)))
        spec.append((f"level{n}.scse.spatial.bias", (1,)))
    d_head = c // cfg.head_count
    for s in STEPS:
        h, w = cfg.step_hw(s)
        hw = h * w
        for name in ("w_q", "w_k", "w_v"):
            spec.append((f"step_{s}.mhsa.{name}", (c, c)))
        for i in range(cfg.effective_register_count):
            spec.append((f"step_{s}.registers.r_qk{i}", (hw, hw)))
        for i in range(cfg.effective_register_count):
            spec.append((f"step_{s}.registers.r_v{i}", (d_head, hw)))
        spec.append((f"step_{s}.deconv.weight", (c, c, 2, 2)))
        spec.append((f"step_{s}.deconv.bias", (c,)))
    return spec


def _params_from_arrays(cfg: NeckConfig, arrays: dict[str, np.ndarray]) -> NeckParams:
    """Assemble structured params from a name->array mapping (canonical names)."""
    c = cfg.pyramid_width
    levels: dict[int, LevelParams] = {}
    for n in LEVELS:
        lateral = ConvKernel(arrays[f"level{n}.lateral.weight"], arrays[f"level{n}.lateral.bias"])
        branches = [
            ConvKernel(
                arrays[f"level{n}.branch_d{d}.weight"],
                arrays[f"level{n}.branch_d{d}.bias"],
                dilation=d,
                padding=d,
            )
            for d in cfg.dilations
        ]
        post = ConvKernel(arrays[f"level{n}.post.weight"], arrays[f"level{n}.post.bias"])
        scse = ScseParams(
            ConvKernel(arrays[f"level{n}.scse.reduce.weight"], arrays[f"level{n}.scse.reduce.bias"]),
            ConvKernel(arrays[f"level{n}.scse.expand.weight"], arrays[f"level{n}.scse.expand.bias"]),
            ConvKernel(arrays[f"level{n}.scse.spatial.weight"], arrays[f"level{n}.scse.spatial.bias"]),
        )
        levels[n] = LevelParams(lateral, branches, post, scse)
    steps: dict[str, StepParams] = {}
    for s in STEPS:
        mhsa = MhsaParams(
            Matrix(arrays[f"step_{s}.mhsa.w_q"]),
            Matrix(arrays[f"step_{s}.mhsa.w_k"]),
            Matrix(arrays[f"step_{s}.mhsa.w_v"]),
            head_count=cfg.head_count,
        )
        n_reg = cfg.effective_register_count
        registers = RegisterTokens(
            [Matrix(arrays[f"step_{s}.registers.r_qk{i}"]) for i in range(n_reg)],
            [Matrix(arrays[f"step_{s}.registers.r_v{i}"]) for i in range(n_reg)],
        )
        deconv = DeconvKernel(arrays[f"step_{s}.deconv.weight"], arrays[f"step_{s}.deconv.bias"])
        steps[s] = StepParams(mhsa, registers, deconv)
    return NeckParams(levels, steps, cfg)


def init_params(cfg: NeckConfig, rng: Rng) -> NeckParams:
    """Gaussian(0, init_sigma²) weights, zero biases, drawn in canonical order."""
    arrays: dict[str, np.ndarray] = {}
    for name, shape in parameter_spec(cfg):
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        else:
            arrays[name] = rng.normal(shape, cfg.init_sigma)
    return _params_from_arrays(cfg, arrays)


def parallel_atrous_block(x: Tensor4, level: LevelParams, cfg: NeckConfig, tape: Tape | None = None) -> Tensor4:
    """Multi-dilation branch bank with fusion and gate recalibration.

    atrous_mode selects the path: "standard" runs the first branch kernel as
    a plain dilation-1 conv (no concat, no gates); "atrous" keeps the branch
    bank and fusion but skips the gates; "attention_atrous" is the full path.
    """
    if cfg.atrous_mode == "standard":
        return conv2d(x, level.branches[0].with_geometry(dilation=1, padding=1), tape)
    branches = [conv2d(x, k, tape) for k in level.branches]
    fused = pointwise_conv(concat_channels(branches, tape), level.post, tape)
    if cfg.atrous_mode == "atrous":
        return fused
    return scse_recalibrate(fused, level.scse, tape)


def attention_upsample(
    top: Tensor4,
    step: StepParams,
    cfg: NeckConfig,
    tape: Tape | None = None,
    trace: dict | None = None,
    trace_key: str = "",
) -> Tensor4:
    """Dual-path 2x upsampling: learned deconvolution gated by pooled attention.

    Path A runs self-attention (with registers unless ablated) on the input
    and pools it to a per-channel gate, optionally squashed by the logistic;
    path B applies the stride-2 transposed convolution.  The output is the
    gated product, or the raw deconvolution when the attention path is off.
    """
    up = deconv2x(top, step.deconv, tape)
    if not cfg.use_mhsa:
        return up
    reg = step.registers if cfg.use_registers else None
    if trace is not None:
        y, attn = mhsa_forward(top, step.mhsa, reg, tape, return_attention=True)
        trace[trace_key] = {"attention": attn, "mhsa_output": y}
    else:
        y = mhsa_forward(top, step.mhsa, reg, tape)
    gate = global_avg_pool(y, tape)
    if cfg.gating_mode == "logistic":
        gate = logistic(gate, tape)
    return mul(up, gate, tape)


def _validate_input(pin: PyramidIn, cfg: NeckConfig) -> None:
    pin.validate()
    _, _, h, w = pin.c3.dims
    if (h, w) != (cfg.base_height, cfg.base_width):
        raise ShapeError(
            f"c3: spatial ({h}, {w}) does not match configured base "
            f"({cfg.base_height}, {cfg.base_width})"
        )
    for n, expected in zip(LEVELS, cfg.in_channels):
        _, c, _, _ = pin.level(n).dims
        if c != expected:
            raise ShapeError(f"c{n}: expected {expected} channels, got {c}")


def neck_forward(
    pin: PyramidIn,
    params: NeckParams,
    cfg: NeckConfig,
    tape: Tape | None = None,
    trace: dict | None = None,
) -> PyramidOut:
    """Full top-down pass producing p3/p4/p5 at the lateral resolutions."""
    _validate_input(pin, cfg)
    p5 = parallel_atrous_block(
        pointwise_conv(pin.c5, params.levels[5].lateral, tape), params.levels[5], cfg, tape
    )
    t4 = attention_upsample(p5, params.steps["to4"], cfg, tape, trace, "to4")
    l4 = parallel_atrous_block(
        pointwise_conv(pin.c4, params.levels[4].lateral, tape), params.levels[4], cfg, tape
    )
    p4 = add(l4, t4, tape)
    t3 = attention_upsample(p4, params.steps["to3"], cfg, tape, trace, "to3")
    l3 = parallel_atrous_block(
        pointwise_conv(pin.c3, params.levels[3].lateral, tape), params.levels[3], cfg, tape
    )
    p3 = add(l3, t3, tape)
    return PyramidOut(p3, p4, p5)


def synthetic_pyramid(cfg: NeckConfig, batch: int, rng: Rng) -> PyramidIn:
    """Standard-normal backbone stand-in at the configured shapes."""
    h, w = cfg.base_height, cfg.base_width
    c3, c4, c5 = cfg.in_channels
    return PyramidIn(
        c3=Tensor4(rng.normal((batch, c3, h, w))),
        c4=Tensor4(rng.normal((batch, c4, h // 2, w // 2))),
        c5=Tensor4(rng.normal((batch, c5, h // 4, w // 4))),
    )


def save_params(params: NeckParams) -> bytes:
    """Serialize to a manifest header plus raw little-endian float64 payload.

    Layout: one ASCII header line ``fusionneck-params <version> <manifest_len>``,
    a JSON manifest (format version, config echo, named tensor index with
    shapes and payload byte offsets), then the concatenated tensor data.
    The round trip is bit-exact.
    """
    named = params.named_values()
    tensors = []
    offset = 0
    chunks = []
    for name, value in named:
        data = np.ascontiguousarray(value.data, dtype="<f8")
        tensors.append({"name": name, "shape": list(value.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = {
        "format_version": PARAMS_FORMAT_VERSION,
        "config": params.config.to_dict(),
        "tensors": tensors,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("ascii")
    header = f"{PARAMS_MAGIC} {PARAMS_FORMAT_VERSION} {len(manifest_bytes)}\n".encode("ascii")
    return header + manifest_bytes + b"".join(chunks)


def load_params(stream: bytes, cfg: NeckConfig) -> NeckParams:
    """Parse a parameter stream, checking every tensor against ``cfg``.

    Errors name the offending tensor: unknown/missing names, shape mismatches
    against the config-derived layout, and truncated payload ranges are all
    rejected.  A config echo that disagrees with ``cfg`` is refused up front.
    """
    buf = io.BytesIO(stream)
    header = buf.readline().decode("ascii", errors="replace").strip()
    parts = header.split()
    if len(parts) != 3 or parts[0] != PARAMS_MAGIC:
        raise ParamsIOError("not a parameter stream (bad magic header)")
    try:
        version = int(parts[1])
        manifest_len = int(parts[2])
    except ValueError:
        raise ParamsIOError("malformed parameter header") from None
    if version != PARAMS_FORMAT_VERSION:
        raise ParamsIOError(
            f"unsupported format version {version} (expected {PARAMS_FORMAT_VERSION})"
        )
    manifest_bytes = buf.read(manifest_len)
    if len(manifest_bytes) != manifest_len:
        raise ParamsIOError("truncated manifest")
    try:
        manifest = json.loads(manifest_bytes)
    except json.JSONDecodeError as exc:
        raise ParamsIOError(f"manifest is not valid JSON: {exc}") from None
    echo = manifest.get("config", {})
    expected_cfg = cfg.to_dict()
    if echo != expected_cfg:
        diffs = [k for k in expected_cfg if echo.get(k) != expected_cfg[k]]
        diffs += [k for k in echo if k not in expected_cfg]
        raise ParamsIOError(f"config mismatch on keys: {sorted(set(diffs))}")
    payload = buf.read()
    entries = {t["name"]: t for t in manifest.get("tensors", [])}
    spec = parameter_spec(cfg)
    expected_names = [name for name, _ in spec]
    extra = set(entries) - set(expected_names)
    if extra:
        raise ParamsIOError(f"unexpected tensor in manifest: {sorted(extra)[0]}")
    arrays: dict[str, np.ndarray] = {}
    for name, shape in spec:
        entry = entries.get(name)
        if entry is None:
            raise ParamsIOError(f"missing tensor {name}")
        if tuple(entry["shape"]) != shape:
            raise ParamsIOError(
                f"shape mismatch for tensor {name}: manifest {tuple(entry['shape'])}, expected {shape}"
            )
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if start < 0 or end > len(payload):
            raise ParamsIOError(f"truncated payload for tensor {name}")
        arrays[name] = np.frombuffer(payload[start:end], dtype="<f8").reshape(shape).copy()
    return _params_from_arrays(cfg, arrays)
