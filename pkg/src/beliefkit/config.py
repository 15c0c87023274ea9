"""Run configuration: one INI-style file of flat ``key = value`` sections."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

SECTIONS = ("run", "latent", "belief", "agent", "bounds")
RUN_KEYS = ("env", "seed", "out", "workers")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    env: str | None = None
    seed: int = 0
    out: str | None = None
    workers: int = 1
    sections: dict[str, dict[str, str]] = field(default_factory=lambda: {s: {} for s in SECTIONS})

    def section(self, name: str) -> dict[str, str]:
        return dict(self.sections.get(name, {}))

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value`` (``run`` keys may omit the section)."""
        key, sep, value = assignment.partition("=")
        if not sep:
            raise ConfigError(f"expected section.key=value, got {assignment!r}")
        section, dot, name = key.strip().rpartition(".")
        section = section if dot else "run"
        self._set(section, name, value.strip())

    def _set(self, section: str, key: str, value: str) -> None:
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        if section == "run":
            if key not in RUN_KEYS:
                raise ConfigError(f"unknown run option {key!r}")
            try:
                setattr(self, key, int(value) if key in ("seed", "workers") else value)
            except ValueError:
                raise ConfigError(f"{key} must be an integer, got {value!r}") from None
        else:
            self.sections[section][key] = value

    def as_dict(self) -> dict:
        return {"env": self.env, "seed": self.seed, "out": self.out, "workers": self.workers,
                **{s: dict(sorted(v.items())) for s, v in self.sections.items() if s != "run"}}


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(path.read_text(), source=str(path))
    except configparser.Error as e:
        raise ConfigError(f"malformed config {path}: {e}") from None
    cfg = RunConfig()
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg._set(section, key, value)
    return cfg
