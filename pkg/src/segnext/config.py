"""Line-oriented run configuration: `[section]` headers and `key = value`
pairs, strictly validated with line numbers in every error."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

from .encoder import ConfigError, ModelConfig, PRESETS, preset


@dataclass(frozen=True)
class TrainParams:
    iters: int = 2000
    batch: int = 8
    crop: int = 128
    lr: float = 6e-5
    power: float = 1.0
    warmup_iters: int = 0
    warmup_ratio: float = 0.1
    weight_decay: float = 0.01
    eval_interval: int = 250
    checkpoint_interval: int = 500


@dataclass(frozen=True)
class DataParams:
    size: int = 128
    num_train: int = 64
    num_val: int = 8


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainParams = TrainParams()
    data: DataParams = DataParams()
    seed: int = 0
    out_dir: str = "runs/default"


def _parse_bool(s: str) -> bool:
    if s == "true":
        return True
    if s == "false":
        return False
    raise ValueError(f"expected true or false, got {s!r}")


def _parse_int_list(s: str) -> tuple[int, ...]:
    return tuple(int(p.strip()) for p in s.split(","))


def _parse_preset(s: str) -> str:
    if s not in PRESETS:
        known = ", ".join(sorted(PRESETS))
        raise ValueError(f"unknown preset {s!r}; known presets: {known}")
    return s


# (section, key) -> value parser. Anything else is rejected.
_SCHEMA = {
    ("model", "model"): _parse_preset,
    ("model", "channels"): _parse_int_list,
    ("model", "depths"): _parse_int_list,
    ("model", "expansions"): _parse_int_list,
    ("model", "num_classes"): int,
    ("model", "decoder_dim"): int,
    ("model", "decoder_variant"): str,
    ("model", "include_stage1"): _parse_bool,
    ("model", "ham_rank"): int,
    ("model", "ham_iters"): int,
    ("model", "use_msca"): _parse_bool,
    ("model", "drop_path"): float,
    ("train", "iters"): int,
    ("train", "batch"): int,
    ("train", "crop"): int,
    ("train", "lr"): float,
    ("train", "power"): float,
    ("train", "warmup_iters"): int,
    ("train", "warmup_ratio"): float,
    ("train", "weight_decay"): float,
    ("train", "eval_interval"): int,
    ("train", "checkpoint_interval"): int,
    ("data", "size"): int,
    ("data", "num_train"): int,
    ("data", "num_val"): int,
    ("run", "seed"): int,
    ("run", "out_dir"): str,
}

_SECTIONS = ("model", "train", "data", "run")


def parse_config(text: str) -> RunConfig:
    """Parse and validate; raises ConfigError with a line number on any
    malformed line, unknown key or section, duplicate, or bad value."""
    values: dict[tuple[str, str], object] = {}
    lines_of: dict[tuple[str, str], int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"line {lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        if section is None:
            raise ConfigError(f"line {lineno}: entry before any [section] header")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        spot = (section, key)
        if spot not in _SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r} in [{section}]")
        if spot in values:
            raise ConfigError(
                f"line {lineno}: duplicate key {key!r} (first set on line {lines_of[spot]})"
            )
        try:
            values[spot] = _SCHEMA[spot](value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
        lines_of[spot] = lineno
    return _assemble(values)


def _section_kwargs(values: dict, section: str, cls) -> dict:
    out = {}
    for (sec, key), val in values.items():
        if sec == section and key in cls.__dataclass_fields__:
            out[key] = val
    return out


def _assemble(values: dict[tuple[str, str], object]) -> RunConfig:
    model_keys = {k: v for (s, k), v in values.items() if s == "model"}
    preset_name = model_keys.pop("model", None)
    explicit = {"channels", "depths", "expansions"} & model_keys.keys()
    try:
        if preset_name is not None:
            if explicit:
                raise ConfigError(
                    "channels/depths/expansions cannot be combined with a model preset"
                )
            base = preset(str(preset_name))
        elif explicit:
            if explicit != {"channels", "depths", "expansions"}:
                raise ConfigError(
                    "custom models need all of channels, depths, and expansions"
                )
            from .encoder import _cfg  # noqa: PLC0415  (single construction helper)

            base = _cfg(
                model_keys.pop("channels"),
                model_keys.pop("depths"),
                model_keys.pop("expansions"),
                decoder_dim=model_keys.pop("decoder_dim", 256),
                num_classes=model_keys.pop("num_classes", 150),
                ham_rank=model_keys.pop("ham_rank", 64),
            )
        else:
            base = preset("mscan-t")
        renames = {"include_stage1": "include_stage1_in_decoder"}
        overrides = {renames.get(k, k): v for k, v in model_keys.items()}
        model_cfg = replace(base, **overrides) if overrides else base
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"in [model]: {exc}") from None

    try:
        train = TrainParams(**_section_kwargs(values, "train", TrainParams))
        data = DataParams(**_section_kwargs(values, "data", DataParams))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seed = int(values.get(("run", "seed"), 0))
    out_dir = str(values.get(("run", "out_dir"), "runs/default"))
    return RunConfig(model_cfg, train, data, seed, out_dir)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(rc: RunConfig) -> str:
    """Canonical text form; parse(serialize(rc)) == rc, with the model
    written out field by field rather than as a preset name."""
    m = rc.model
    lines = [
        "[model]",
        f"channels = {_fmt(m.channels)}",
        f"depths = {_fmt(m.depths)}",
        f"expansions = {_fmt(m.expansions)}",
        f"num_classes = {m.num_classes}",
        f"decoder_dim = {m.decoder_dim}",
        f"decoder_variant = {m.decoder_variant}",
        f"include_stage1 = {_fmt(m.include_stage1_in_decoder)}",
        f"ham_rank = {m.ham_rank}",
        f"ham_iters = {m.ham_iters}",
        f"use_msca = {_fmt(m.use_msca)}",
        f"drop_path = {_fmt(m.drop_path)}",
        "",
        "[train]",
    ]
    for name in TrainParams.__dataclass_fields__:
        lines.append(f"{name} = {_fmt(getattr(rc.train, name))}")
    lines.append("")
    lines.append("[data]")
    for name in DataParams.__dataclass_fields__:
        lines.append(f"{name} = {_fmt(getattr(rc.data, name))}")
    lines += ["", "[run]", f"seed = {rc.seed}", f"out_dir = {rc.out_dir}", ""]
    return "\n".join(lines)
