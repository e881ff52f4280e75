"""YAML experiment configs: schema, defaults, overrides and validation.

Every error message carries the line of the offending key when the value came
from the file, or the override text when it came from ``--set``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import yaml

from fedgg.federation import DatasetSource, ExperimentConfig
from fedgg.strategies import VARIANTS, WEIGHT_MODES, TrainerConfig


class ConfigError(ValueError):
    pass


def _opt(kind):
    return ("optional", kind)


# section -> key -> type. Top-level scalars live under "".
SCHEMA = {
    "": {"seed": int, "rounds": int, "num_clients": int, "participation": float,
         "record_timing": bool},
    "dataset": {"kind": str, "num_classes": int, "per_class": int, "dim": int,
                "separation": float, "path": _opt(str), "eval_path": _opt(str),
                "test_fraction": float, "seed": _opt(int)},
    "partition": {"beta": float, "seed": _opt(int)},
    "model": {"hidden": list},
    "trainer": {"variant": str, "lr": float, "momentum": float, "batch_size": int,
                "local_epochs": int, "prox_mu": float, "weight_mode": str, "mu": float, "lam": float},
    "compare": {"baseline": str, "seeds": list, "variants": list},
}

CONSTRAINTS = {
    "rounds": (lambda v: v >= 1, "must be >= 1"),
    "num_clients": (lambda v: v >= 1, "must be >= 1"),
    "participation": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "dataset.kind": (lambda v: v in ("blobs", "csv"), "must be 'blobs' or 'csv'"),
    "dataset.num_classes": (lambda v: v >= 2, "must be >= 2"),
    "dataset.per_class": (lambda v: v >= 1, "must be >= 1"),
    "dataset.dim": (lambda v: v >= 2, "must be >= 2"),
    "dataset.separation": (lambda v: v > 0, "must be > 0"),
    "dataset.test_fraction": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "partition.beta": (lambda v: v > 0, "must be > 0"),
    "model.hidden": (lambda v: all(isinstance(h, int) and h >= 1 for h in v),
                     "must be a list of positive integers"),
    "trainer.variant": (lambda v: v in VARIANTS, f"must be one of {', '.join(VARIANTS)}"),
    "trainer.lr": (lambda v: v >= 0, "must be >= 0"),
    "trainer.momentum": (lambda v: 0 <= v < 1, "must lie in [0, 1)"),
    "trainer.batch_size": (lambda v: v >= 1, "must be >= 1"),
    "trainer.local_epochs": (lambda v: v >= 1, "must be >= 1"),
    "trainer.prox_mu": (lambda v: v >= 0, "must be >= 0"),
    "trainer.weight_mode": (lambda v: v in WEIGHT_MODES, f"must be one of {', '.join(WEIGHT_MODES)}"),
    "trainer.mu": (lambda v: v >= 0, "must be >= 0"),
    "trainer.lam": (lambda v: v >= 0, "must be >= 0"),
}


@dataclass(frozen=True)
class CompareSpec:
    baseline: str
    seeds: tuple[int, ...]
    variants: tuple[tuple[str, ExperimentConfig], ...]


@dataclass
class _Source:
    path: str
    lines: dict[str, int] = field(default_factory=dict)
    overrides: dict[str, str] = field(default_factory=dict)

    def where(self, key: str) -> str:
        if key in self.overrides:
            return f"override '{self.overrides[key]}'"
        line = self.lines.get(key)
        if line is None:
            return self.path
        return f"{self.path}:{line}"


def _key_lines(node, prefix="", out=None) -> dict[str, int]:
    """Map dotted key paths to 1-based line numbers."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            key = f"{prefix}{key_node.value}"
            out[key] = key_node.start_mark.line + 1
            _key_lines(value_node, key + ".", out)
    elif isinstance(node, yaml.SequenceNode):
        for i, item in enumerate(node.value):
            out.setdefault(f"{prefix}{i}", item.start_mark.line + 1)
            _key_lines(item, f"{prefix}{i}.", out)
    return out


def _coerce(value, kind, key: str, src: _Source):
    if isinstance(kind, tuple):
        if value is None:
            return None
        kind = kind[1]
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        # PyYAML reads exponent floats without a dot ("5e-8") as strings.
        if isinstance(value, (int, float, str)) and not isinstance(value, bool):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is list:
        if isinstance(value, list):
            return value
    raise ConfigError(f"{src.where(key)}: '{key}' expects {kind.__name__}, got {value!r}")


def _flatten(doc: dict, src: _Source, prefix: str = "") -> dict[str, object]:
    """Validate section/key names and return ``{dotted_key: value}``."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{src.path}: config must be a mapping at the top level")
    flat = {}
    for key, value in doc.items():
        if key in SCHEMA and key != "":
            if not isinstance(value, dict):
                raise ConfigError(f"{src.where(key)}: section '{key}' must be a mapping")
            for sub, sub_value in value.items():
                dotted = f"{key}.{sub}"
                if sub not in SCHEMA[key]:
                    raise ConfigError(f"{src.where(dotted)}: unknown key '{dotted}'")
                flat[dotted] = _coerce(sub_value, SCHEMA[key][sub], dotted, src)
        elif key in SCHEMA[""]:
            flat[key] = _coerce(value, SCHEMA[""][key], key, src)
        else:
            raise ConfigError(f"{src.where(key)}: unknown key '{key}'")
    return flat


def _parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override '{text}': expected key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError:
        value = raw
    return key, value


def _schema_kind(key: str):
    section, _, name = key.rpartition(".")
    table = SCHEMA.get(section)
    if table is None or name not in table:
        return None
    return table[name]


def _build(flat: dict, src: _Source) -> ExperimentConfig:
    for key, (check, message) in CONSTRAINTS.items():
        if key in flat and flat[key] is not None and not check(flat[key]):
            raise ConfigError(f"{src.where(key)}: '{key}' {message} (got {flat[key]!r})")

    def pick(prefix, names):
        return {n: flat[f"{prefix}{n}"] for n in names if f"{prefix}{n}" in flat}

    ds_fields = [f.name for f in dataclasses.fields(DatasetSource)]
    tr_fields = [f.name for f in dataclasses.fields(TrainerConfig)]
    dataset = DatasetSource(**pick("dataset.", ds_fields))
    if dataset.kind == "csv" and not dataset.path:
        raise ConfigError(f"{src.where('dataset.kind')}: dataset.kind 'csv' requires dataset.path")
    try:
        trainer = TrainerConfig(**pick("trainer.", tr_fields))
    except ValueError as exc:
        raise ConfigError(f"{src.where('trainer')}: {exc}") from None
    kwargs = pick("", ["seed", "rounds", "num_clients", "participation", "record_timing"])
    if "partition.beta" in flat:
        kwargs["beta"] = flat["partition.beta"]
    if "partition.seed" in flat:
        kwargs["partition_seed"] = flat["partition.seed"]
    if "model.hidden" in flat:
        kwargs["hidden"] = tuple(flat["model.hidden"])
    return ExperimentConfig(dataset=dataset, trainer=trainer, **kwargs)


def _load(path: str, overrides) -> tuple[dict, _Source]:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    try:
        node = yaml.compose(text)
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else path
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    src = _Source(path, _key_lines(node) if node is not None else {})
    flat = _flatten(doc or {}, src)
    for text in overrides or ():
        key, value = _parse_override(text)
        src.overrides[key] = text
        kind = _schema_kind(key)
        if kind is None:
            raise ConfigError(f"override '{text}': unknown key '{key}'")
        flat[key] = _coerce(value, kind, key, src)
    return flat, src


def parse_config(path: str, overrides=()) -> ExperimentConfig:
    """Load and validate a run config. Unset fields take the package defaults."""
    flat, src = _load(path, overrides)
    return _build({k: v for k, v in flat.items() if not k.startswith("compare.")}, src)


def parse_compare(path: str, overrides=()) -> CompareSpec:
    """Load a config with a ``compare`` section into one config per variant.

    Each entry of ``compare.variants`` is a mapping with a ``name`` and an
    optional ``trainer`` mapping whose keys override the base trainer.
    """
    flat, src = _load(path, overrides)
    base = {k: v for k, v in flat.items() if not k.startswith("compare.")}
    _build(base, src)
    entries = flat.get("compare.variants")
    if not entries or len(entries) < 2:
        raise ConfigError(f"{src.where('compare.variants')}: compare needs at least two variants")
    seeds = flat.get("compare.seeds", [base.get("seed", 0)])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in seeds):
        raise ConfigError(f"{src.where('compare.seeds')}: 'compare.seeds' must be a non-empty list of integers")

    variants = []
    for i, entry in enumerate(entries):
        where_key = f"compare.variants.{i}"
        if not isinstance(entry, dict) or "name" not in entry:
            raise ConfigError(f"{src.where(where_key)}: each variant needs a 'name'")
        unknown = set(entry) - {"name", "trainer"}
        if unknown:
            raise ConfigError(f"{src.where(where_key)}: unknown variant keys {sorted(unknown)}")
        merged = dict(base)
        for key, value in (entry.get("trainer") or {}).items():
            dotted = f"trainer.{key}"
            if key not in SCHEMA["trainer"]:
                raise ConfigError(f"{src.where(where_key + '.trainer.' + key)}: unknown key '{dotted}'")
            merged[dotted] = _coerce(value, SCHEMA["trainer"][key], dotted, src)
        variants.append((str(entry["name"]), _build(merged, src)))

    names = [n for n, _ in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"{src.where('compare.variants')}: variant names must be unique")
    baseline = flat.get("compare.baseline", names[0])
    if baseline not in names:
        raise ConfigError(f"{src.where('compare.baseline')}: baseline '{baseline}' is not a listed variant")
    return CompareSpec(baseline, tuple(seeds), tuple(variants))
