"""
Run configuration

Defaults come from the environment (a .env file is loaded if present); a JSON
config file and command-line flags override them. The effective config is
validated before any compute and echoed into the run directory.
"""

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from dotenv import load_dotenv

from cipa_net import CipaConfig, OptimConfig
from data_pipeline import SynthSpec
from errors import ValidationError

# Load environment variables
load_dotenv()

# Configuration
CIPA_SEED = int(os.getenv("CIPA_SEED", "0"))
CIPA_OUT_DIR = os.getenv("CIPA_OUT_DIR", "runs")
CIPA_DATA_DIR = os.getenv("CIPA_DATA_DIR", "data/synth")
CIPA_THREADS = int(os.getenv("CIPA_THREADS", "1"))
CIPA_VERBOSE = os.getenv("CIPA_VERBOSE", "1") not in ("0", "false", "False", "")

SECTIONS = ("model", "synth", "optim")
TOP_LEVEL = ("seed", "data_dir", "out_dir", "threads")


@dataclass(frozen=True)
class RunConfig:
    model: CipaConfig = field(default_factory=CipaConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = CIPA_SEED
    data_dir: str = CIPA_DATA_DIR
    out_dir: str = CIPA_OUT_DIR
    threads: int = CIPA_THREADS

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(SECTIONS) - set(TOP_LEVEL))
        if unknown:
            raise ValidationError(f"unknown config keys: {unknown}")
        try:
            synth = dict(data.get("synth", {}))
            if "seed" in data:
                # the top-level seed also seeds the generator unless synth names its own
                synth.setdefault("seed", data["seed"])
            return cls(
                model=CipaConfig.from_dict(data.get("model", {})),
                synth=SynthSpec.from_dict(synth),
                optim=OptimConfig.from_dict(data.get("optim", {})),
                **{key: data[key] for key in TOP_LEVEL if key in data},
            )
        except (TypeError, ValueError) as e:
            raise ValidationError(f"malformed config: {e}") from e

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ValidationError(f"{path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ValidationError(f"{path}: invalid JSON ({e})") from e
        if not isinstance(data, dict):
            raise ValidationError(f"{path}: top level must be an object")
        return cls.from_dict(data)

    def with_overrides(self, seed: int | None = None, out_dir: str | None = None,
                       data_dir: str | None = None, model: dict | None = None,
                       synth: dict | None = None, optim: dict | None = None) -> "RunConfig":
        """Apply command-line overrides; None leaves a setting untouched"""
        updated = self
        if seed is not None:
            # one seed drives both the model init and the generator
            updated = replace(updated, seed=seed, synth=replace(updated.synth, seed=seed))
        if out_dir is not None:
            updated = replace(updated, out_dir=out_dir)
        if data_dir is not None:
            updated = replace(updated, data_dir=data_dir)
        for name, changes in (("model", model), ("synth", synth), ("optim", optim)):
            changes = {k: v for k, v in (changes or {}).items() if v is not None}
            if changes:
                try:
                    updated = replace(updated, **{name: replace(getattr(updated, name), **changes)})
                except TypeError as e:
                    raise ValidationError(f"bad {name} override: {e}") from e
        return updated

    def validate(self) -> "RunConfig":
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        if self.threads < 1:
            raise ValidationError(f"threads must be >= 1, got {self.threads}")
        self.model.validate()
        self.synth.validate()
        self.optim.validate()
        if self.synth.resolution != self.model.resolution:
            raise ValidationError(
                f"synth.resolution {self.synth.resolution} != model.resolution {self.model.resolution}"
            )
        return self

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "synth": self.synth.to_dict(),
            "optim": self.optim.to_dict(),
            "seed": self.seed,
            "data_dir": self.data_dir,
            "out_dir": self.out_dir,
            "threads": self.threads,
        }

    def echo(self, run_dir: str | Path) -> Path:
        """Write the effective config to <run_dir>/config.json"""
        path = Path(run_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def checkpoint_echo(self) -> dict:
        """Settings stored inside checkpoints; paths and thread counts stay out"""
        data = self.to_dict()
        return {key: data[key] for key in (*SECTIONS, "seed")}
