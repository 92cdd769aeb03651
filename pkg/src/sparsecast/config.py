"""Run configuration: INI-style sections of ``key = value`` lines.

Relative paths resolve against the directory holding the config file. The
``[run] seed`` key is mandatory; every other key has a default.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from sparsecast.balance import AdasynConfig
from sparsecast.cohort import CohortConfig
from sparsecast.errors import ConfigError
from sparsecast.features import FeatureSetSpec
from sparsecast.neural import Hyper
from sparsecast.pipeline import PrepareConfig
from sparsecast.trainer import DEFAULT_CHUNKS, Schedule

SECTIONS = {
    "paths": {"data_dir", "prepared_dir", "checkpoint_dir", "report_dir"},
    "run": {"seed"},
    "cohort": {f.name for f in fields(CohortConfig)} - {"seed", "first_id"},
    "prepare": {f.name for f in fields(PrepareConfig)},
    "features": {"specs", "train"},
    "schedule": {"train_chunks", "test_chunks", "orderings", "personalize_epochs"},
    "hyper": {f.name for f in fields(Hyper)},
    "adasyn": {"k", "beta"},
}

_KEY_LINE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")
_SECTION_LINE = re.compile(r"^\s*\[([^\]]+)\]")


@dataclass(frozen=True)
class Paths:
    data_dir: Path
    prepared_dir: Path
    checkpoint_dir: Path
    report_dir: Path


@dataclass(frozen=True)
class RunConfig:
    paths: Paths
    seed: int
    cohort: CohortConfig
    prepare: PrepareConfig
    specs: tuple
    train_spec: FeatureSetSpec
    schedule: Schedule
    orderings: tuple
    hyper: Hyper
    adasyn: AdasynConfig
    personalize_epochs: int | None = None
    source: Path | None = None
    text: str = field(default="", repr=False)

    def with_seed(self, seed: int) -> "RunConfig":
        seed = int(seed)
        return replace(
            self,
            seed=seed,
            cohort=replace(self.cohort, seed=seed),
            adasyn=replace(self.adasyn, seed=seed),
            schedule=replace(self.schedule, shuffle_seed=seed),
        )

    def snapshot(self) -> dict:
        """JSON-ready view of every resolved setting."""
        return {
            "paths": {k: str(v) for k, v in asdict(self.paths).items()},
            "seed": self.seed,
            "cohort": asdict(self.cohort),
            "prepare": asdict(self.prepare),
            "features": {"specs": [s.name for s in self.specs], "train": self.train_spec.name},
            "schedule": {
                "train_chunks": list(self.schedule.train_chunks),
                "test_chunks": list(self.schedule.test_chunks),
                "orderings": list(self.orderings),
                "personalize_epochs": self.personalize_epochs,
            },
            "hyper": asdict(self.hyper),
            "adasyn": asdict(self.adasyn),
        }


def _line_index(text):
    """(section, key) -> 1-based line number, and section -> line number."""
    keys, sections, current = {}, {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_LINE.match(line)
        if m:
            current = m.group(1).strip().lower()
            sections.setdefault(current, no)
            continue
        m = _KEY_LINE.match(line)
        if m and current is not None and not line[:1].isspace():
            keys.setdefault((current, m.group(1).strip().lower()), no)
    return keys, sections


def _ints(text):
    return tuple(int(x) for x in re.split(r"[,\s]+", text.strip()) if x)


def _optional_int(text):
    return None if text.strip().lower() in ("", "none", "default") else int(text)


_COHORT_TYPES = {
    "n_participants": int,
    "days_per_participant": int,
    "doses_per_day": lambda s: s.strip().lower() if s.strip().lower() == "mixed" else int(s),
    "start_date": str.strip,
}
_PREPARE_TYPES = {"window_len": int, "sample_stride": int, "leakage_probes": int}
_HYPER_TYPES = {"model": lambda s: s.strip().lower(), "batch_size": int, "epochs": _optional_int,
                "hidden": int, "cnn_kernel": int, "cnn_stride": int}


def parse_config(text: str, *, base_dir=".", source=None) -> RunConfig:
    """Parse config text; every error carries the offending line number."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(source or "<config>"))
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", field=exc.option, line=exc.lineno)
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", field=exc.section, line=exc.lineno)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", line=exc.lineno)
    except configparser.ParsingError as exc:
        lineno, line = exc.errors[0]
        raise ConfigError(f"cannot parse {line.strip()!r}", line=lineno)

    key_lines, section_lines = _line_index(text)
    for section in parser.sections():
        if section.lower() not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", field=section, line=section_lines.get(section.lower()))
        for key in parser[section]:
            if key not in SECTIONS[section.lower()]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", field=key,
                                  line=key_lines.get((section.lower(), key)))

    def get(section, key, convert, default=None):
        if not parser.has_option(section, key):
            return default
        raw = parser.get(section, key)
        try:
            return convert(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{section}] {key}: cannot read {raw!r} ({exc})", field=key,
                              line=key_lines.get((section, key))) from None

    def build(section, factory, **kwargs):
        try:
            return factory(**kwargs)
        except ConfigError as exc:
            name = exc.field
            raise ConfigError(f"[{section}] {exc}", field=name,
                              line=key_lines.get((section, name), section_lines.get(section))) from None

    seed = get("run", "seed", int)
    if seed is None:
        raise ConfigError("[run] seed is mandatory", field="seed", line=section_lines.get("run"))

    base_dir = Path(base_dir)
    path_values = {}
    for key, default in (("data_dir", "data"), ("prepared_dir", "prepared"),
                         ("checkpoint_dir", "checkpoints"), ("report_dir", "reports")):
        value = Path(get("paths", key, str.strip, default))
        path_values[key] = value if value.is_absolute() else base_dir / value
    for key, value in path_values.items():
        if value.exists() and not value.is_dir():
            raise ConfigError(f"[paths] {key}: {value} exists and is not a directory", field=key,
                              line=key_lines.get(("paths", key)))

    cohort_kwargs = {}
    for key in SECTIONS["cohort"]:
        value = get("cohort", key, _COHORT_TYPES.get(key, float))
        if value is not None:
            cohort_kwargs[key] = value
    cohort = build("cohort", CohortConfig, seed=seed, **cohort_kwargs)

    prepare_kwargs = {k: get("prepare", k, _PREPARE_TYPES.get(k, float)) for k in SECTIONS["prepare"]}
    prepare = build("prepare", _prepare_config, **{k: v for k, v in prepare_kwargs.items() if v is not None})

    def spec_list(raw):
        return tuple(FeatureSetSpec.parse(s) for s in raw.split(",") if s.strip())

    specs = get("features", "specs", spec_list, None) or (FeatureSetSpec.parse("H+K"),)
    train_spec = get("features", "train", FeatureSetSpec.parse, None) or specs[-1]

    train_chunks = get("schedule", "train_chunks", _ints, DEFAULT_CHUNKS)
    test_chunks = get("schedule", "test_chunks", _ints, train_chunks)
    schedule = build("schedule", Schedule, train_chunks=tuple(train_chunks), test_chunks=tuple(test_chunks),
                     shuffle_seed=seed)
    orderings = get("schedule", "orderings", _ints, (seed,))
    personalize_epochs = get("schedule", "personalize_epochs", _optional_int, None)

    hyper_kwargs = {k: get("hyper", k, _HYPER_TYPES.get(k, float)) for k in SECTIONS["hyper"]}
    hyper = build("hyper", Hyper, **{k: v for k, v in hyper_kwargs.items() if v is not None})

    adasyn = build("adasyn", AdasynConfig, k=get("adasyn", "k", int, 5), beta=get("adasyn", "beta", float, 1.0),
                   seed=seed)

    return RunConfig(
        paths=Paths(**path_values),
        seed=seed,
        cohort=cohort,
        prepare=prepare,
        specs=specs,
        train_spec=train_spec,
        schedule=schedule,
        orderings=tuple(orderings),
        hyper=hyper,
        adasyn=adasyn,
        personalize_epochs=personalize_epochs,
        source=Path(source) if source else None,
        text=text,
    )


def _prepare_config(**kwargs):
    cfg = PrepareConfig(**kwargs)
    checks = (
        ("window_len", cfg.window_len >= 2),
        ("overlap", 0.0 <= cfg.overlap < 1.0),
        ("sample_stride", cfg.sample_stride >= 1),
        ("train_frac", 0.0 < cfg.train_frac < 1.0),
        ("leakage_probes", cfg.leakage_probes >= 0),
    )
    for name, ok in checks:
        if not ok:
            raise ConfigError(f"{name}: out of range ({getattr(cfg, name)!r})", field=name)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, base_dir=path.resolve().parent, source=path)
