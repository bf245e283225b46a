"""INI-style run configuration.

Every tunable has a default here; a config file only needs the keys it
changes. Blank values mean "derive it" (for example ``n`` from the user
count). The fully resolved config is written into every run directory.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path

DEFAULTS: dict[str, dict[str, str]] = {
    "data": {
        "path": "data/ml-100k/u.data",
        "format": "tab_100k",
        "min_user_interactions": "1",
        "min_item_interactions": "1",
        "test_fraction": "0.2",
        "split_seed": "7",
        "top_fraction": "0.01",
        "retained_fraction": "0.05",
        "promoted_seed": "3",
    },
    "mf": {"d_a": "32", "epochs": "50", "lr": "0.005", "reg": "0.02", "seed": "1"},
    "bpr": {"d_b": "32", "epochs": "30", "lr": "0.01", "reg": "0.01", "seed": "2"},
    "env": {
        "k": "10",
        "candidate_fraction": "0.10",
        "fine_tune_steps": "200",
        "fine_tune_lr": "",
    },
    "state": {"h": "10", "r_min": "0", "r_max": "", "sru_seed": "5"},
    "tree": {"depth": "2", "seed": "0"},
    "agent": {
        "n": "",
        "gamma": "0.9",
        "eta": "0.05",
        "episodes": "500",
        "filter_threshold": "3.5",
        "filter_mode": "mean",
        "max_retries": "50",
        "optimizer": "adam",
        "baseline": "level",
        "activation": "elu",
        "policy_seed": "6",
        "seed": "11",
    },
    "harness": {
        "eval_episodes": "10",
        "eval_seed": "1000",
        "metric_k": "10",
        "relevance_threshold": "4.0",
        "baselines": "random,activity,inactivity,high_rating,low_rating",
        "rq1_counts": ",".join(str(c) for c in range(0, 901, 50)),
        "rq1_seed": "0",
        "rq3_depths": "1,2,3,4",
        "rq3_trials": "10000",
        "rq3_train_episodes": "0",
    },
    "run": {"dir": "runs/default"},
}


class ConfigError(ValueError):
    pass


class Config:
    """Typed accessors over a ConfigParser seeded with DEFAULTS."""

    def __init__(self, parser: configparser.ConfigParser, source: Path | None = None):
        self.parser = parser
        self.source = source

    @classmethod
    def defaults(cls) -> "Config":
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        parser.read_dict(DEFAULTS)
        return cls(parser)

    @classmethod
    def load(cls, path) -> "Config":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = cls.defaults()
        cfg.source = path
        extra = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
        extra.read(path, encoding="utf-8")
        for section in extra.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"unknown section [{section}] in {path}")
            for key, value in extra.items(section):
                if key not in DEFAULTS[section]:
                    raise ConfigError(f"unknown key {section}.{key} in {path}")
                cfg.parser.set(section, key, value)
        return cfg

    def set(self, dotted: str, value) -> None:
        section, _, key = dotted.partition(".")
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown setting {dotted!r}")
        self.parser.set(section, key, str(value))

    def get(self, section: str, key: str) -> str:
        return self.parser.get(section, key).strip()

    def int(self, section: str, key: str) -> int:
        return self.parser.getint(section, key)

    def float(self, section: str, key: str) -> float:
        return self.parser.getfloat(section, key)

    def optional_float(self, section: str, key: str) -> float | None:
        raw = self.get(section, key)
        return None if raw in ("", "none") else float(raw)

    def optional_int(self, section: str, key: str) -> int | None:
        raw = self.get(section, key)
        return None if raw in ("", "none") else int(raw)

    def int_list(self, section: str, key: str) -> list[int]:
        return [int(x) for x in self.get(section, key).split(",") if x.strip()]

    def str_list(self, section: str, key: str) -> list[str]:
        return [x.strip() for x in self.get(section, key).split(",") if x.strip()]

    def section(self, name: str) -> dict[str, str]:
        return dict(self.parser.items(name))

    def dumps(self) -> str:
        buf = io.StringIO()
        self.parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")
