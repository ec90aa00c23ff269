"""Experiment configuration (INI), seed splitting and run manifests."""

from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import asdict, dataclass, field, fields
from io import StringIO
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .measures import SpaceTimeGrid
from .model import BUILTINS


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _fmt(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a CLI run needs; ``params`` holds builtin-specific numeric parameters."""

    descriptor: str = "quadratic-free"
    params: tuple = ()
    # grid
    dim: int = 1
    box_halfwidth: float = 8.0
    nx: int = 161
    t0: float = 0.0
    T: float = 1.0
    nt: int = 100
    # initial Gaussian measure
    initial_mean: float = 0.0
    initial_variance: float = 0.5
    # solver
    damping: float = 0.5
    tolerance: float = 1e-8
    max_iter: int = 400
    multistarts: int = 5
    merge_tol: float = 1e-3
    # stability
    sigma_grid: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    threshold: float = 1e-6
    family_means: tuple = (-0.5, 0.0, 0.5)
    family_variances: tuple = (0.25, 0.5, 1.0)
    # particles
    n_values: tuple = (8, 16, 32, 64, 128, 256, 512)
    replicas: int = 20
    delta_factor: float = 3.0
    small_n: tuple = (1, 2)
    gap_points: int = 50
    gap_inner: float = 0.5
    # second-order check
    soc_count: int = 100
    # verify
    tolerance_scale: float = 1.0
    # run
    seed: int = 0
    threads: int = 1
    out: str = "results"

    @property
    def grid(self) -> SpaceTimeGrid:
        return SpaceTimeGrid(self.dim, self.box_halfwidth, self.nx, self.t0, self.T, self.nt)

    def replace(self, **changes) -> "ExperimentConfig":
        d = asdict(self)
        d.update(changes)
        return ExperimentConfig(**d)

    def to_ini(self) -> str:
        """Canonical INI text; parsing it back yields an equal config."""
        lines = []
        for section, keys in SECTIONS.items():
            lines.append(f"[{section}]")
            for key, attr in keys.items():
                lines.append(f"{key} = {_fmt(getattr(self, attr))}")
            lines.append("")
        lines.append("[params]")
        for name, value in self.params:
            lines.append(f"{name} = {_fmt(value)}")
        lines.append("")
        return "\n".join(lines)

    def digest(self) -> str:
        return hashlib.sha256(self.to_ini().encode()).hexdigest()


# section -> {ini key -> attribute}
SECTIONS: dict[str, dict[str, str]] = {
    "problem": {"descriptor": "descriptor"},
    "grid": {k: k for k in ("dim", "box_halfwidth", "nx", "t0", "T", "nt")},
    "initial": {"mean": "initial_mean", "variance": "initial_variance"},
    "solver": {k: k for k in ("damping", "tolerance", "max_iter", "multistarts", "merge_tol")},
    "stability": {"sigma_grid": "sigma_grid", "threshold": "threshold", "means": "family_means", "variances": "family_variances"},
    "particles": {k: k for k in ("n_values", "replicas", "delta_factor", "small_n", "gap_points", "gap_inner")},
    "second_order": {"count": "soc_count"},
    "verify": {"tolerance_scale": "tolerance_scale"},
    "run": {k: k for k in ("seed", "threads", "out")},
}

_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}
_TUPLE_PARSERS = {"sigma_grid": _floats, "family_means": _floats, "family_variances": _floats, "n_values": _ints, "small_n": _ints}
_SCALAR = {"int": int, "float": float, "str": str}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    """1-based line of ``[section]`` or of ``key`` inside it."""
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return i
            continue
        if current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return i
    return None


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text.

    Raises
    ------
    ConfigError
        On syntax errors, unknown sections or keys, bad values or an unknown
        spec descriptor; ``lineno`` points at the offending line.
    """
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError(f"parse error at line {exc.lineno}: missing section header", exc.lineno) from None
    except configparser.ParsingError as exc:
        lineno = exc.errors[0][0] if getattr(exc, "errors", None) else None
        raise ConfigError(f"parse error at line {lineno}", lineno) from None
    except (configparser.DuplicateOptionError, configparser.DuplicateSectionError) as exc:
        raise ConfigError(f"parse error at line {exc.lineno}: {exc.message}", exc.lineno) from None
    values: dict = {}
    params = []
    for section in cp.sections():
        if section == "params":
            for key, raw in cp.items(section):
                try:
                    params.append((key, float(raw)))
                except ValueError:
                    ln = _line_of(text, section, key)
                    raise ConfigError(f"line {ln}: parameter {key!r} is not a number", ln) from None
            continue
        if section not in SECTIONS:
            ln = _line_of(text, section)
            raise ConfigError(f"line {ln}: unknown section [{section}]", ln)
        for key, raw in cp.items(section):
            attr = SECTIONS[section].get(key)
            ln = _line_of(text, section, key)
            if attr is None:
                raise ConfigError(f"line {ln}: unknown key {key!r} in [{section}]", ln)
            try:
                values[attr] = _TUPLE_PARSERS[attr](raw) if attr in _TUPLE_PARSERS else _SCALAR[_TYPES[attr]](raw.strip())
            except ValueError:
                raise ConfigError(f"line {ln}: bad value {raw!r} for {key!r}", ln) from None
    cfg = ExperimentConfig(**values, params=tuple(sorted(params)))
    if cfg.descriptor not in BUILTINS:
        ln = _line_of(text, "problem", "descriptor")
        raise ConfigError(f"line {ln}: unknown descriptor {cfg.descriptor!r}", ln)
    try:
        cfg.grid
    except ValueError as exc:
        raise ConfigError(f"invalid grid: {exc}", _line_of(text, "grid")) from None
    return cfg


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    return parse_config(text)


def stage_seed(seed: int, stage: str) -> int:
    """Seed of a pipeline stage: ``seed`` plus a 32-bit hash of the stage name."""
    return int(seed) + int.from_bytes(hashlib.sha256(stage.encode()).digest()[:4], "big")


def file_checksum(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class RunManifest:
    """Config hash, version, per-stage wall clock and output checksums."""

    config_hash: str
    command: str
    version: str = __version__
    stages: dict = field(default_factory=dict)
    files: dict = field(default_factory=dict)

    def add_file(self, out: Path, path: Path):
        self.files[str(Path(path).relative_to(out))] = file_checksum(path)

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp["run"] = {"command": self.command, "config_hash": self.config_hash, "version": self.version}
        cp["stages"] = {k: repr(v) for k, v in self.stages.items()}
        cp["files"] = dict(sorted(self.files.items()))
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        cp.read_string(text)
        run = cp["run"]
        return cls(
            run["config_hash"],
            run["command"],
            run["version"],
            {k: float(v) for k, v in cp["stages"].items()},
            dict(cp["files"].items()),
        )

    def validate(self, out: str | Path) -> list[str]:
        """Names of listed files whose checksum no longer matches (or that are missing)."""
        bad = []
        for name, digest in self.files.items():
            p = Path(out) / name
            if not p.exists() or file_checksum(p) != digest:
                bad.append(name)
        return bad
