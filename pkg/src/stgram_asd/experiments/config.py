"""Experiment configuration: YAML file + environment + dotted-key overrides."""

from __future__ import annotations

import datetime as _dt
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from ..classifier import HEAD_KINDS
from ..dataio import ConfigurationError
from ..features import SpectralConfig
from ..model import MODEL_FEATURE_KINDS, ModelConfig
from ..trainer import TrainConfig

DATA_ROOT_ENV = "STGRAM_DATA_ROOT"

# the five method columns of the input-feature comparison
DEFAULT_ABLATION = (
    ("LogMel", "CEE"),
    ("Tgram", "CEE"),
    ("Spec", "CEE"),
    ("STgram", "CEE"),
    ("STgram", "ArcFace"),
)


def cell_name(feature_kind: str, head_kind: str) -> str:
    if feature_kind == "STgram":
        return f"STgram-MFN({head_kind})"
    return f"{feature_kind}-MFN" if head_kind == "CEE" else f"{feature_kind}-MFN({head_kind})"


@dataclass
class ExperimentConfig:
    data_root: str | list[str] | None = None
    output_dir: str = "runs"
    run_id: str = "default"
    seed: int = 0
    p: float = 0.1
    score_batch_size: int = 32
    cache_dir: str | None = None
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablation: list[tuple[str, str]] = field(default_factory=lambda: list(DEFAULT_ABLATION))

    def __post_init__(self):
        self.ablation = [tuple(c) for c in self.ablation]
        for feature_kind, head_kind in self.ablation:
            if feature_kind not in MODEL_FEATURE_KINDS or head_kind not in HEAD_KINDS:
                raise ConfigurationError(f"invalid ablation cell ({feature_kind}, {head_kind})")
        if not 0 < self.p <= 1:
            raise ConfigurationError(f"p must be in (0, 1], got {self.p}")

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.run_id

    def roots(self) -> list[str]:
        if not self.data_root:
            raise ConfigurationError(f"no dataset root: set data_root in the config or ${DATA_ROOT_ENV}")
        roots = [self.data_root] if isinstance(self.data_root, str) else list(self.data_root)
        for r in roots:
            if not Path(r).is_dir():
                raise ConfigurationError(f"dataset root does not exist: {r}")
        return roots

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["ablation"] = [list(c) for c in self.ablation]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        train = dict(d.pop("train", None) or {})
        train.setdefault("seed", d.get("seed", 0))
        try:
            return cls(
                spectral=_build(SpectralConfig, d.pop("spectral", None), "spectral"),
                model=_build(ModelConfig, d.pop("model", None), "model"),
                train=_build(TrainConfig, train, "train"),
                **d,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None


def _build(cls, d, section):
    d = dict(d or {})
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigurationError(f"unknown keys in '{section}': {sorted(unknown)}")
    return cls(**d)


def apply_override(d: dict, assignment: str) -> None:
    """Apply ``a.b.c=value`` to a nested dict; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override must look like key=value, got {assignment!r}")
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigurationError(f"cannot override {key}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path: str | os.PathLike | None = None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Config precedence: defaults < file < $STGRAM_DATA_ROOT < overrides."""
    d: dict = {}
    if path is not None:
        try:
            d = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise ConfigurationError(f"config file not found: {path}") from None
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from None
        if not isinstance(d, dict):
            raise ConfigurationError(f"{path}: top level must be a mapping")
    if os.environ.get(DATA_ROOT_ENV):
        d["data_root"] = os.environ[DATA_ROOT_ENV]
    for o in overrides:
        apply_override(d, o)
    return ExperimentConfig.from_dict(d)


class ArtifactExists(FileExistsError):
    pass


class RunDir:
    """Output directory of one run; every written artifact is listed in ``run_manifest.json``.

    Writing an artifact that is already listed is refused, so a rerun with
    the same run id never silently overwrites earlier results.
    """

    MANIFEST = "run_manifest.json"

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        self.path.mkdir(parents=True, exist_ok=True)
        self._file = self.path / self.MANIFEST
        self.artifacts: list[dict] = json.loads(self._file.read_text())["artifacts"] if self._file.exists() else []

    def claim(self, relpath: str) -> Path:
        target = self.path / relpath
        if target.exists() or any(a["path"] == relpath for a in self.artifacts):
            raise ArtifactExists(f"{target} already exists in run {self.path.name}; use a new run_id")
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def record(self, target: str | os.PathLike, subcommand: str) -> None:
        self.record_many([target], subcommand)

    def record_many(self, targets: Iterable[str | os.PathLike], subcommand: str) -> None:
        now = _dt.datetime.now().isoformat(timespec="seconds")
        known = {a["path"] for a in self.artifacts}
        for target in targets:
            rel = str(Path(target).resolve().relative_to(self.path.resolve()))
            if rel not in known:
                self.artifacts.append({"path": rel, "subcommand": subcommand, "created": now})
                known.add(rel)
        tmp = self._file.with_suffix(".tmp")
        tmp.write_text(json.dumps({"artifacts": self.artifacts}, indent=2))
        os.replace(tmp, self._file)
