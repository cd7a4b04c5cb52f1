"""Model, hardware, workload and scenario descriptions.

Everything the planner and the simulator consume is derived here: weight
bytes, FFN bytes per layer, KV bytes per token.  Scenario documents are YAML
with the sections ``model``, ``hardware``, ``layout``, ``workload``,
``policy`` and ``ablation``.
"""
from __future__ import annotations

import enum
import random
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import yaml

FORMAT_VERSION = 1
DEFAULT_MEM_UTILIZATION = 0.9
DEFAULT_ACTIVATION_RESERVE = 10e9
ABLATION_FLAGS = frozenset({"async_p2p", "gemm_fusion", "dummy_skip"})


class ScenarioError(ValueError):
    """Raised for malformed, unresolvable or invalid scenario documents."""


class WeightMode(str, enum.Enum):
    REPLICATED = "replicated"
    TP_SHARD = "tpshard"
    FSDP = "fsdp"
    SIDP = "sidp"


@dataclass(frozen=True)
class ModelSpec:
    name: str
    num_layers: int
    hidden_size: int
    ffn_intermediate_size: int
    num_heads: int
    num_kv_heads: int
    head_dim: int
    vocab_size: int
    tied_embeddings: bool = False
    dtype_bytes: int = 2
    # Qwen3 uses num_heads * head_dim != hidden_size; must be declared.
    head_dim_override: bool = False
    advertised_params: float | None = None

    def __post_init__(self):
        for name in ("num_layers", "hidden_size", "ffn_intermediate_size", "num_heads",
                     "num_kv_heads", "head_dim", "vocab_size", "dtype_bytes"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ValueError(f"{self.name}: {name} must be a positive integer, got {value!r}")
        if self.num_heads % self.num_kv_heads:
            raise ValueError(f"{self.name}: num_kv_heads must divide num_heads")
        if not self.head_dim_override and self.head_dim * self.num_heads != self.hidden_size:
            raise ValueError(
                f"{self.name}: head_dim * num_heads != hidden_size (set head_dim_override)")


@dataclass(frozen=True)
class ModelStats:
    total_params: int
    ffn_params: int
    attn_params: int
    embedding_params: int
    ffn_fraction: float
    ffn_params_per_layer: int
    attn_params_per_layer: int
    ffn_bytes_per_layer: int
    ffn_bytes_total: int
    non_ffn_weight_bytes: int
    weight_bytes_total: int
    kv_bytes_per_token: int
    kv_bytes_per_token_per_layer: int
    num_layers: int
    hidden_size: int
    num_kv_heads: int
    head_dim: int
    dtype_bytes: int


def derive_model_stats(spec: ModelSpec) -> ModelStats:
    """Parameter and byte accounting for a dense gated-MLP decoder.

    Attention counts Q and O as ``hidden x (num_heads * head_dim)`` which
    reduces to ``2 * hidden**2`` whenever the heads tile the hidden size.
    Norm and bias parameters are ignored.
    """
    h, L, dt = spec.hidden_size, spec.num_layers, spec.dtype_bytes
    q_width = spec.num_heads * spec.head_dim
    kv_width = spec.num_kv_heads * spec.head_dim
    ffn_layer = 3 * h * spec.ffn_intermediate_size
    attn_layer = 2 * h * q_width + 2 * h * kv_width
    embed = spec.vocab_size * h * (1 if spec.tied_embeddings else 2)
    ffn = L * ffn_layer
    attn = L * attn_layer
    total = ffn + attn + embed
    kv_layer = 2 * kv_width * dt
    return ModelStats(
        total_params=total,
        ffn_params=ffn,
        attn_params=attn,
        embedding_params=embed,
        ffn_fraction=ffn / total,
        ffn_params_per_layer=ffn_layer,
        attn_params_per_layer=attn_layer,
        ffn_bytes_per_layer=ffn_layer * dt,
        ffn_bytes_total=ffn * dt,
        non_ffn_weight_bytes=(attn + embed) * dt,
        weight_bytes_total=total * dt,
        kv_bytes_per_token=kv_layer * L,
        kv_bytes_per_token_per_layer=kv_layer,
        num_layers=L,
        hidden_size=h,
        num_kv_heads=spec.num_kv_heads,
        head_dim=spec.head_dim,
        dtype_bytes=dt,
    )


@dataclass(frozen=True)
class HardwareSpec:
    """Per-GPU node description.

    Only ``hbm_bytes``, ``gpus_per_node`` and the interconnect generation come
    from published testbed data; rates and overheads are calibration inputs.
    """

    name: str
    gpus_per_node: int
    hbm_bytes: float
    compute_rate: float
    hbm_bandwidth: float
    link_bandwidth: float
    kernel_launch_overhead: float
    framework_overhead: float
    ffn_launch_fraction: float = 0.5
    tp_sync_overhead: float = 10e-6
    p2p_latency: float = 10e-6

    def __post_init__(self):
        for name in ("gpus_per_node", "hbm_bytes", "compute_rate", "hbm_bandwidth",
                     "link_bandwidth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{self.name}: {name} must be positive")
        for name in ("kernel_launch_overhead", "framework_overhead", "tp_sync_overhead",
                     "p2p_latency"):
            if getattr(self, name) < 0:
                raise ValueError(f"{self.name}: {name} must be non-negative")
        if self.link_bandwidth > self.hbm_bandwidth:
            raise ValueError(f"{self.name}: link_bandwidth exceeds hbm_bandwidth")
        if not 0.0 <= self.ffn_launch_fraction <= 1.0:
            raise ValueError(f"{self.name}: ffn_launch_fraction must be in [0, 1]")


@dataclass(frozen=True)
class LengthDist:
    """Token-length distribution.

    kind is ``constant`` (value), ``list`` (values, cycled by request index),
    ``uniform`` (low..high inclusive) or ``long_tail`` (base, with a
    ``tail_fraction`` of requests stretched by ``tail_multiplier``).
    """

    kind: str
    value: int = 0
    values: tuple[int, ...] = ()
    low: int = 0
    high: int = 0
    tail_fraction: float = 0.0
    tail_multiplier: int = 1

    def sample(self, n: int, rng: random.Random) -> list[int]:
        if self.kind == "constant":
            return [self.value] * n
        if self.kind == "list":
            return [self.values[i % len(self.values)] for i in range(n)]
        if self.kind == "uniform":
            return [rng.randint(self.low, self.high) for _ in range(n)]
        if self.kind == "long_tail":
            n_tail = round(n * self.tail_fraction)
            tail = set(rng.sample(range(n), n_tail))
            return [self.value * self.tail_multiplier if i in tail else self.value
                    for i in range(n)]
        raise ValueError(f"unknown length distribution {self.kind!r}")

    @property
    def mean(self) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "list":
            return sum(self.values) / len(self.values)
        if self.kind == "uniform":
            return (self.low + self.high) / 2
        return self.value * (1 + self.tail_fraction * (self.tail_multiplier - 1))

    def minimum(self) -> int:
        if self.kind == "list":
            return min(self.values)
        if self.kind == "uniform":
            return self.low
        return self.value


@dataclass(frozen=True)
class WorkloadSpec:
    num_requests: int
    prompt_len: LengthDist
    output_len: LengthDist
    seed: int = 0

    def __post_init__(self):
        if self.num_requests < 1:
            raise ValueError("num_requests must be >= 1")
        if self.prompt_len.minimum() < 1 or self.output_len.minimum() < 1:
            raise ValueError("all token lengths must be >= 1")

    def materialize(self) -> list[tuple[int, int]]:
        """(prompt_len, output_len) per request, fully determined by the seed."""
        rng = random.Random(self.seed)
        prompts = self.prompt_len.sample(self.num_requests, rng)
        outputs = self.output_len.sample(self.num_requests, rng)
        return list(zip(prompts, outputs))


@dataclass(frozen=True)
class LayoutStrategy:
    dp: int = 1
    tp: int = 1
    pp: int = 1
    weight_mode: WeightMode = WeightMode.REPLICATED
    mem_utilization: float = DEFAULT_MEM_UTILIZATION
    activation_reserve_bytes: float = DEFAULT_ACTIVATION_RESERVE
    was_slot_count: int | None = None
    cas_slot_count: int = 2
    slot_granularity: float = 1.0
    peak_shifting: bool = True
    micro_batches: int | None = None
    max_concurrent: int | None = None

    def __post_init__(self):
        if min(self.dp, self.tp, self.pp) < 1:
            raise ValueError("dp, tp and pp must be >= 1")
        if not 0.0 < self.mem_utilization <= 1.0:
            raise ValueError("mem_utilization must be in (0, 1]")
        if self.activation_reserve_bytes < 0:
            raise ValueError("activation_reserve_bytes must be >= 0")
        if self.weight_mode is WeightMode.SIDP and self.dp < 2:
            raise ValueError("weight_mode=sidp requires dp >= 2")
        if self.weight_mode in (WeightMode.SIDP, WeightMode.FSDP) and self.pp != 1:
            raise ValueError("pipeline parallelism is only modeled for replicated layouts")
        if self.was_slot_count is None:
            object.__setattr__(self, "was_slot_count", max(self.dp - 1, 1))
        if self.was_slot_count < 1 or self.cas_slot_count < 1:
            raise ValueError("slot counts must be >= 1")
        if not 0.0 < self.slot_granularity <= 1.0:
            raise ValueError("slot_granularity must be in (0, 1]")
        if self.micro_batches is None:
            object.__setattr__(self, "micro_batches", self.pp)
        if self.max_concurrent is not None and self.max_concurrent < 1:
            raise ValueError("max_concurrent must be >= 1")

    @property
    def gpus(self) -> int:
        return self.dp * self.tp * self.pp

    @property
    def shards_ffn(self) -> bool:
        return self.weight_mode in (WeightMode.SIDP, WeightMode.FSDP)


@dataclass(frozen=True)
class ModePolicy:
    """Orchestrator switching policy between weight streaming and compute shipping.

    ``mode`` pins the group to ``was`` or ``cas``; ``auto`` switches on the
    windowed live-batch statistic against ``b_threshold`` with hysteresis.
    """

    mode: str = "auto"
    b_threshold: int | None = None
    window_iters: int = 50
    hysteresis_ratio: float = 1.5
    min_dwell_iters: int = 100
    cas_routing_overhead: float = 3e-6

    def __post_init__(self):
        if self.mode not in ("auto", "was", "cas"):
            raise ValueError("policy.mode must be auto, was or cas")
        if self.hysteresis_ratio <= 1:
            raise ValueError("hysteresis_ratio must be > 1")
        if self.window_iters < 1 or self.min_dwell_iters < 0:
            raise ValueError("window_iters must be >= 1 and min_dwell_iters >= 0")
        if self.b_threshold is not None and self.b_threshold < 1:
            raise ValueError("b_threshold must be >= 1")


@dataclass(frozen=True)
class Scenario:
    name: str
    model: ModelSpec
    hardware: HardwareSpec
    layout: LayoutStrategy
    workload: WorkloadSpec
    ablation_flags: frozenset[str] = ABLATION_FLAGS
    mode_policy: ModePolicy = field(default_factory=ModePolicy)

    def __post_init__(self):
        if self.layout.gpus > self.hardware.gpus_per_node:
            raise ValueError(
                f"dp*tp*pp = {self.layout.gpus} exceeds gpus_per_node = "
                f"{self.hardware.gpus_per_node}")
        unknown = set(self.ablation_flags) - ABLATION_FLAGS
        if unknown:
            raise ValueError(f"unknown ablation flags {sorted(unknown)}")

    @property
    def stats(self) -> ModelStats:
        return derive_model_stats(self.model)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, workload=replace(self.workload, seed=seed))


# --------------------------------------------------------------------------
# Document parsing

_SIZE_RE = re.compile(r"^\s*([0-9.eE+-]+)\s*([kKMGT]?B)?(/s)?\s*$")
_SIZE_UNITS = {None: 1.0, "B": 1.0, "kB": 1e3, "KB": 1e3, "MB": 1e6, "GB": 1e9, "TB": 1e12}


def parse_size(value: Any, where: str = "value") -> float:
    """Parse ``144GB``, ``400 GB/s``, ``1.5e9`` or a bare number (powers of 10)."""
    if isinstance(value, bool):
        raise ScenarioError(f"{where}: expected a number, got {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        m = _SIZE_RE.match(value)
        if m:
            try:
                return float(m.group(1)) * _SIZE_UNITS[m.group(2)]
            except ValueError:
                pass
    raise ScenarioError(f"{where}: cannot parse size {value!r}")


def _check_keys(section: Mapping, allowed: set[str], where: str) -> None:
    if not isinstance(section, Mapping):
        raise ScenarioError(f"{where}: expected a mapping, got {type(section).__name__}")
    extra = set(section) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown key(s) {sorted(extra)}")


def _int(section: Mapping, key: str, where: str, default=None):
    if key not in section:
        if default is ...:
            raise ScenarioError(f"{where}.{key}: missing required key")
        return default
    value = section[key]
    if isinstance(value, bool) or not isinstance(value, int):
        raise ScenarioError(f"{where}.{key}: expected an integer, got {value!r}")
    return value


_MODEL_KEYS = {"name", "num_layers", "hidden_size", "ffn_intermediate_size", "num_heads",
               "num_kv_heads", "head_dim", "vocab_size", "tied_embeddings", "dtype_bytes",
               "head_dim_override", "advertised_params", "base"}
_HW_KEYS = {"name", "gpus_per_node", "hbm_bytes", "compute_rate", "hbm_bandwidth",
            "link_bandwidth", "kernel_launch_overhead", "framework_overhead",
            "ffn_launch_fraction", "tp_sync_overhead", "p2p_latency", "base", "notes"}
_LAYOUT_KEYS = {"dp", "tp", "pp", "weight_mode", "mem_utilization", "activation_reserve",
                "was_slot_count", "cas_slot_count", "slot_granularity", "peak_shifting",
                "micro_batches", "max_concurrent"}
_WORKLOAD_KEYS = {"num_requests", "prompt_len", "output_len", "seed"}
_POLICY_KEYS = {"mode", "b_threshold", "window_iters", "hysteresis_ratio", "min_dwell_iters",
                "cas_routing_overhead"}
_TOP_KEYS = {"name", "model", "hardware", "layout", "workload", "policy", "ablation",
             "format_version", "description"}


def _parse_model(doc: Any, where: str = "model") -> ModelSpec:
    if isinstance(doc, str):
        return get_model(doc)
    _check_keys(doc, _MODEL_KEYS, where)
    fields: dict[str, Any] = {}
    if "base" in doc:
        fields.update(get_model(doc["base"]).__dict__)
    for key, value in doc.items():
        if key == "base":
            continue
        if key == "advertised_params":
            fields[key] = float(value)
        elif key in ("tied_embeddings", "head_dim_override"):
            if not isinstance(value, bool):
                raise ScenarioError(f"{where}.{key}: expected true/false")
            fields[key] = value
        elif key == "name":
            fields[key] = str(value)
        else:
            fields[key] = _int(doc, key, where)
    try:
        return ModelSpec(**fields)
    except TypeError as exc:
        raise ScenarioError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _parse_hardware(doc: Any, where: str = "hardware") -> HardwareSpec:
    if isinstance(doc, str):
        return get_hardware(doc)
    _check_keys(doc, _HW_KEYS, where)
    fields: dict[str, Any] = {}
    if "base" in doc:
        fields.update(get_hardware(doc["base"]).__dict__)
    for key, value in doc.items():
        if key in ("base", "notes"):
            continue
        if key == "name":
            fields[key] = str(value)
        elif key == "gpus_per_node":
            fields[key] = _int(doc, key, where)
        else:
            fields[key] = parse_size(value, f"{where}.{key}")
    try:
        return HardwareSpec(**fields)
    except TypeError as exc:
        raise ScenarioError(f"{where}: {exc}") from None
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _parse_layout(doc: Mapping, where: str = "layout") -> LayoutStrategy:
    _check_keys(doc, _LAYOUT_KEYS, where)
    kwargs: dict[str, Any] = {}
    for key in ("dp", "tp", "pp", "was_slot_count", "cas_slot_count", "micro_batches",
                "max_concurrent"):
        if key in doc:
            kwargs[key] = _int(doc, key, where)
    if "weight_mode" in doc:
        try:
            kwargs["weight_mode"] = WeightMode(str(doc["weight_mode"]).lower())
        except ValueError:
            raise ScenarioError(
                f"{where}.weight_mode: expected one of "
                f"{[m.value for m in WeightMode]}, got {doc['weight_mode']!r}") from None
    for key in ("mem_utilization", "slot_granularity"):
        if key in doc:
            kwargs[key] = parse_size(doc[key], f"{where}.{key}")
    if "activation_reserve" in doc:
        kwargs["activation_reserve_bytes"] = parse_size(doc["activation_reserve"],
                                                        f"{where}.activation_reserve")
    if "peak_shifting" in doc:
        if not isinstance(doc["peak_shifting"], bool):
            raise ScenarioError(f"{where}.peak_shifting: expected true/false")
        kwargs["peak_shifting"] = doc["peak_shifting"]
    try:
        return LayoutStrategy(**kwargs)
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _parse_length(doc: Any, where: str) -> LengthDist:
    if isinstance(doc, int) and not isinstance(doc, bool):
        return LengthDist("constant", value=doc)
    if isinstance(doc, list):
        if not doc or not all(isinstance(v, int) for v in doc):
            raise ScenarioError(f"{where}: expected a non-empty list of integers")
        return LengthDist("list", values=tuple(doc))
    if isinstance(doc, Mapping) and len(doc) == 1:
        (kind, body), = doc.items()
        if kind == "uniform":
            if not (isinstance(body, list) and len(body) == 2):
                raise ScenarioError(f"{where}.uniform: expected [low, high]")
            low, high = body
            if low > high:
                raise ScenarioError(f"{where}.uniform: low > high")
            return LengthDist("uniform", low=int(low), high=int(high))
        if kind == "long_tail":
            _check_keys(body, {"base", "tail_fraction", "tail_multiplier"}, f"{where}.long_tail")
            try:
                return LengthDist("long_tail", value=int(body["base"]),
                                  tail_fraction=float(body["tail_fraction"]),
                                  tail_multiplier=int(body["tail_multiplier"]))
            except KeyError as exc:
                raise ScenarioError(f"{where}.long_tail: missing {exc}") from None
    raise ScenarioError(f"{where}: unsupported length distribution {doc!r}")


def _parse_workload(doc: Mapping, where: str = "workload") -> WorkloadSpec:
    _check_keys(doc, _WORKLOAD_KEYS, where)
    try:
        return WorkloadSpec(
            num_requests=_int(doc, "num_requests", where, ...),
            prompt_len=_parse_length(doc.get("prompt_len", 1024), f"{where}.prompt_len"),
            output_len=_parse_length(doc.get("output_len", 256), f"{where}.output_len"),
            seed=_int(doc, "seed", where, 0),
        )
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(f"{where}: {exc}") from None


def _parse_policy(doc: Mapping, where: str = "policy") -> ModePolicy:
    _check_keys(doc, _POLICY_KEYS, where)
    kwargs: dict[str, Any] = {}
    if "mode" in doc:
        kwargs["mode"] = str(doc["mode"]).lower()
    for key in ("b_threshold", "window_iters", "min_dwell_iters"):
        if key in doc:
            kwargs[key] = _int(doc, key, where)
    for key in ("hysteresis_ratio", "cas_routing_overhead"):
        if key in doc:
            kwargs[key] = parse_size(doc[key], f"{where}.{key}")
    try:
        return ModePolicy(**kwargs)
    except ValueError as exc:
        raise ScenarioError(f"{where}: {exc}") from None


def _parse_ablation(doc: Any) -> frozenset[str]:
    if doc is None:
        return ABLATION_FLAGS
    if isinstance(doc, Mapping):
        _check_keys(doc, set(ABLATION_FLAGS), "ablation")
        flags = set(ABLATION_FLAGS)
        for key, on in doc.items():
            if not isinstance(on, bool):
                raise ScenarioError(f"ablation.{key}: expected true/false")
            if not on:
                flags.discard(key)
        return frozenset(flags)
    if isinstance(doc, list):
        unknown = set(doc) - ABLATION_FLAGS
        if unknown:
            raise ScenarioError(f"ablation: unknown flag(s) {sorted(unknown)}")
        return frozenset(doc)
    raise ScenarioError("ablation: expected a list of flags or a mapping of flag: bool")


def scenario_from_dict(doc: Mapping, default_name: str = "scenario") -> Scenario:
    _check_keys(doc, _TOP_KEYS, "scenario")
    for required in ("model", "hardware", "workload"):
        if required not in doc:
            raise ScenarioError(f"scenario: missing required section {required!r}")
    version = doc.get("format_version", FORMAT_VERSION)
    if version != FORMAT_VERSION:
        raise ScenarioError(f"format_version: unsupported version {version!r}")
    try:
        return Scenario(
            name=str(doc.get("name", default_name)),
            model=_parse_model(doc["model"]),
            hardware=_parse_hardware(doc["hardware"]),
            layout=_parse_layout(doc.get("layout") or {}),
            workload=_parse_workload(doc["workload"]),
            ablation_flags=_parse_ablation(doc.get("ablation")),
            mode_policy=_parse_policy(doc.get("policy") or {}),
        )
    except ScenarioError:
        raise
    except ValueError as exc:
        raise ScenarioError(f"scenario: {exc}") from None


def load_scenario(source: str | Path) -> Scenario:
    """Parse a scenario from a path or from YAML text."""
    default_name = "scenario"
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source
                                    and source.endswith((".yaml", ".yml"))):
        path = Path(source)
        if not path.exists():
            bundled = _data_dir() / "scenarios" / path.name
            if bundled.exists():
                path = bundled
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError(f"{source}: {exc.strerror}") from None
        default_name = path.stem
    else:
        text = source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ScenarioError(f"parse error at {where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario: document must be a mapping")
    return scenario_from_dict(doc, default_name)


# --------------------------------------------------------------------------
# Bundled catalog

def _data_dir() -> Path:
    return Path(str(resources.files("poolsim") / "data"))


def list_models() -> list[str]:
    return sorted(p.stem for p in (_data_dir() / "models").glob("*.yaml"))


def list_hardware() -> list[str]:
    return sorted(p.stem for p in (_data_dir() / "hardware").glob("*.yaml"))


def get_model(name: str) -> ModelSpec:
    path = _data_dir() / "models" / f"{str(name).lower()}.yaml"
    if not path.exists():
        raise ScenarioError(f"model: unknown model {name!r} (known: {list_models()})")
    doc = yaml.safe_load(path.read_text())
    if "base" in doc:
        raise ScenarioError(f"model {name}: catalog entries cannot use 'base'")
    return _parse_model(doc, f"model[{name}]")


def get_hardware(name: str) -> HardwareSpec:
    path = _data_dir() / "hardware" / f"{str(name).lower()}.yaml"
    if not path.exists():
        raise ScenarioError(f"hardware: unknown hardware {name!r} (known: {list_hardware()})")
    doc = yaml.safe_load(path.read_text())
    if "base" in doc:
        raise ScenarioError(f"hardware {name}: catalog entries cannot use 'base'")
    return _parse_hardware(doc, f"hardware[{name}]")


def bundled_scenarios() -> list[Path]:
    return sorted((_data_dir() / "scenarios").glob("*.yaml"))
