"""Experiment configuration: a flat JSON object with dotted keys.

Every key is documented in ``KEYS``. Missing keys take their defaults, unknown
keys are rejected, and validation reports all problems at once.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .forecaster import HookSite, ModelConfig
from .sae import SaeConfig
from .tokenizer import TokenizerConfig


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


# key -> (default, type, description)
KEYS: dict[str, tuple[Any, type, str]] = {
    "seed": (0, int, "global seed; every stage derives its rng from it"),
    "data.csv": ("", str, "path to the real-series CSV; empty selects the bundled file"),
    "data.csv_column": ("OT", str, "CSV column to forecast"),
    "data.csv_holdout": (0.25, float, "trailing fraction of the CSV kept for evaluation"),
    "data.suite_per_family": (8, int, "diagnostic series per family"),
    "data.series_length": (512, int, "length of each diagnostic series"),
    "data.base_noise": (0.05, float, "observation noise of the diagnostic suite"),
    "data.context_len": (96, int, "context length C"),
    "data.pred_len": (24, int, "forecast horizon H"),
    "data.train_windows_per_series": (96, int, "training windows sampled per series"),
    "data.real_train_windows": (1536, int, "training windows sampled from the CSV training span"),
    "data.heldout_windows": (128, int, "held-out windows for the cross-entropy check"),
    "tokenizer.n_bins": (256, int, "quantization bins"),
    "tokenizer.clip_lo": (-15.0, float, "lower clip of scaled values"),
    "tokenizer.clip_hi": (15.0, float, "upper clip of scaled values"),
    "model.n_encoder_blocks": (4, int, "encoder depth"),
    "model.n_decoder_blocks": (4, int, "decoder depth"),
    "model.d_model": (64, int, "residual width"),
    "model.n_heads": (4, int, "attention heads"),
    "model.d_ff": (256, int, "feed-forward width"),
    "train.steps": (1200, int, "optimizer steps"),
    "train.batch": (32, int, "windows per step"),
    "train.lr": (3e-3, float, "peak learning rate"),
    "train.warmup": (50, int, "linear warmup steps"),
    "train.clip": (1.0, float, "global gradient-norm clip"),
    "extract.sites": (["enc0", "enc1", "enc3", "dec1", "dec3", "xattn1"], list, "hook sites to capture"),
    "extract.windows_per_series": (24, int, "diagnostic windows per series for SAE training and taxonomy"),
    "sae.d_sae": (512, int, "dictionary size"),
    "sae.k": (16, int, "active features per row"),
    "sae.steps": (2000, int, "SAE optimizer steps"),
    "sae.batch": (256, int, "rows per SAE step"),
    "sae.lr": (1e-3, float, "SAE peak learning rate"),
    "sae.dead_scan_every": (250, int, "steps between dead-feature scans"),
    "sae.resample_until": (0.75, float, "fraction of training during which dead features are resampled"),
    "taxonomy.r_threshold": (0.5, float, "minimum |r| for a concept label"),
    "taxonomy.sites": ([], list, "sites to label; empty means every extracted site"),
    "ablation.single_sites": (["enc1"], list, "sites for single-feature ablation"),
    "ablation.progressive_sites": (["enc0", "enc1", "enc3"], list, "sites for progressive ablation"),
    "ablation.n_windows": (256, int, "evaluation windows from the CSV holdout"),
    "ablation.n_samples": (4, int, "forecast samples per window"),
    "ablation.top_single": (16, int, "top-ranked features ablated one at a time"),
    "ablation.n_features": (64, int, "features in the progressive ranking"),
    "ablation.checkpoints": ([1, 2, 4, 8, 16, 32, 64], list, "progressive checkpoints"),
    "ablation.temperature": (1.0, float, "sampling temperature"),
}


def _coerce(key: str, value: Any, problems: list[str]) -> Any:
    default, typ, _ = KEYS[key]
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if typ is list:
        if not isinstance(value, list):
            problems.append(f"{key}: expected a list, got {type(value).__name__}")
            return default
        return list(value)
    if isinstance(value, bool) or not isinstance(value, typ):
        problems.append(f"{key}: expected {typ.__name__}, got {type(value).__name__}")
        return default
    return value


@dataclass
class ExperimentConfig:
    values: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: (list(d) if isinstance(d, list) else d) for k, (d, _, _) in KEYS.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key: str):
        return self.values[key]

    # --- construction -----------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError(["<root>: expected a JSON object"])
        problems: list[str] = []
        values = {}
        for key, value in raw.items():
            if key not in KEYS:
                problems.append(f"{key}: unknown key")
                continue
            values[key] = _coerce(key, value, problems)
        cfg = cls(values)
        problems.extend(cfg.problems())
        if problems:
            raise ConfigError(problems)
        return cfg

    @classmethod
    def parse(cls, text: str) -> "ExperimentConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"<root>: not valid JSON ({exc})"]) from None
        return cls.from_dict(raw)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError([f"<file>: {path} does not exist"])
        return cls.parse(path.read_text(encoding="utf-8"))

    def serialize(self) -> str:
        return json.dumps(self.values, indent=2, sort_keys=True) + "\n"

    def to_dict(self) -> dict:
        return json.loads(self.serialize())

    def config_hash(self) -> str:
        return hashlib.sha256(json.dumps(self.values, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, **dotted) -> "ExperimentConfig":
        raw = self.to_dict()
        raw.update(dotted)
        return ExperimentConfig.from_dict(raw)

    # --- typed views --------------------------------------------------------

    def tokenizer(self) -> TokenizerConfig:
        v = self.values
        return TokenizerConfig(v["tokenizer.n_bins"], v["tokenizer.clip_lo"], v["tokenizer.clip_hi"])

    def model(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            n_encoder_blocks=v["model.n_encoder_blocks"],
            n_decoder_blocks=v["model.n_decoder_blocks"],
            d_model=v["model.d_model"],
            n_heads=v["model.n_heads"],
            d_ff=v["model.d_ff"],
            vocab=self.tokenizer().vocab_size,
            max_context=max(v["data.context_len"], v["data.pred_len"]),
            seed=v["seed"],
        )

    def sae(self, site: HookSite) -> SaeConfig:
        v = self.values
        return SaeConfig(
            d_sae=v["sae.d_sae"],
            k=v["sae.k"],
            steps=v["sae.steps"],
            batch=v["sae.batch"],
            base_lr=v["sae.lr"],
            dead_scan_every=v["sae.dead_scan_every"],
            resample_until=v["sae.resample_until"],
            seed=v["seed"] * 1000 + _site_salt(site),
        )

    def sites(self, key: str) -> list[HookSite]:
        return [HookSite.parse(s) for s in self.values[key]]

    # --- validation -------------------------------------------------------

    def problems(self) -> list[str]:
        v = self.values
        out: list[str] = []
        positive = [k for k, (_, t, _) in KEYS.items() if t is int and k != "seed"]
        for k in positive:
            if isinstance(v[k], int) and v[k] <= 0:
                out.append(f"{k}: must be positive, got {v[k]}")
        if v["seed"] < 0:
            out.append(f"seed: must be non-negative, got {v['seed']}")
        if not 0.0 < v["data.csv_holdout"] < 1.0:
            out.append(f"data.csv_holdout: must lie in (0, 1), got {v['data.csv_holdout']}")
        if v["tokenizer.clip_lo"] >= v["tokenizer.clip_hi"]:
            out.append("tokenizer.clip_lo: must be below tokenizer.clip_hi")
        if v["model.d_model"] > 0 and v["model.n_heads"] > 0 and v["model.d_model"] % v["model.n_heads"]:
            out.append(f"model.n_heads: {v['model.n_heads']} does not divide model.d_model={v['model.d_model']}")
        if v["sae.k"] > v["sae.d_sae"]:
            out.append(f"sae.k: {v['sae.k']} exceeds sae.d_sae={v['sae.d_sae']}")
        if not 0.0 <= v["sae.resample_until"] <= 1.0:
            out.append("sae.resample_until: must lie in [0, 1]")
        if not -1.0 <= v["taxonomy.r_threshold"] <= 1.0 or v["taxonomy.r_threshold"] < 0:
            out.append("taxonomy.r_threshold: must lie in [0, 1]")
        if v["train.warmup"] < 0:
            out.append("train.warmup: must be non-negative")
        cps = v["ablation.checkpoints"]
        if not all(isinstance(c, int) and not isinstance(c, bool) and c > 0 for c in cps):
            out.append("ablation.checkpoints: entries must be positive integers")
        elif any(b <= a for a, b in zip(cps, cps[1:])):
            out.append("ablation.checkpoints: must be strictly ascending")
        elif cps and cps[-1] > v["ablation.n_features"]:
            out.append(f"ablation.checkpoints: last checkpoint {cps[-1]} exceeds ablation.n_features")
        if v["ablation.n_features"] > v["sae.d_sae"]:
            out.append("ablation.n_features: exceeds sae.d_sae")
        if v["ablation.top_single"] > v["sae.d_sae"]:
            out.append("ablation.top_single: exceeds sae.d_sae")
        out.extend(self._site_problems())
        return out

    def _site_problems(self) -> list[str]:
        out = []
        try:
            mcfg = self.model()
        except ValueError:
            return out
        extracted = set()
        for key in ("extract.sites", "taxonomy.sites", "ablation.single_sites", "ablation.progressive_sites"):
            for spec in self.values[key]:
                if not isinstance(spec, str):
                    out.append(f"{key}: site {spec!r} is not a string")
                    continue
                try:
                    site = HookSite.parse(spec)
                    site.validate(mcfg)
                except ValueError as exc:
                    out.append(f"{key}: {exc}")
                    continue
                if key == "extract.sites":
                    extracted.add(site)
                elif site not in extracted:
                    out.append(f"{key}: site {spec} is not listed in extract.sites")
        return out


def _site_salt(site: HookSite) -> int:
    return {"encoder_block_out": 0, "decoder_block_out": 1, "cross_attention_out": 2}[site.kind] * 100 + site.block_index


def bundled_config_path() -> Path:
    return Path(str(resources.files("tsinterp") / "data" / "desk.json"))


def bundled_csv_path() -> Path:
    return Path(str(resources.files("tsinterp") / "data" / "ett_like.csv"))


def describe_keys() -> str:
    width = max(map(len, KEYS))
    return "\n".join(f"{k.ljust(width)}  {json.dumps(d)}  {desc}" for k, (d, _, desc) in KEYS.items())
