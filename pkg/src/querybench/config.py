"""Pipeline configuration: one YAML file drives every stage.

The config is validated up front and a redacted copy is embedded in the
export manifest so a dataset records how it was built.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .corpus import ChunkingConfig
from .retrieval import MODES, Bm25Params, FusionWeights

DEFAULT_PROFILES = [
    "a retail customer comparing everyday banking products",
    "a small-business owner reviewing account terms",
    "a first-time saver asking about rates and conditions",
]


class ConfigError(Exception):
    """Configuration is missing, malformed, or inconsistent."""


@dataclass
class ProvidersConfig:
    mode: str = "mock"  # mock | http
    chat_base_url: str | None = None
    embed_base_url: str | None = None
    generator_model: str = "mock-generator"
    evaluator_model: str = "mock-evaluator"
    embedding_model: str = "mock-embedding"
    dense_dim: int = 32
    api_key_env: str = "QUERYBENCH_API_KEY"
    max_retries: int = 3
    max_concurrency: int = 8
    timeout: float = 60.0
    audit: bool = False

    def validate(self) -> None:
        if self.mode not in ("mock", "http"):
            raise ConfigError(f"providers.mode must be 'mock' or 'http', got {self.mode!r}")
        if self.mode == "http":
            if not self.chat_base_url:
                raise ConfigError("providers.chat_base_url is required in http mode")
            if not self.embed_base_url:
                raise ConfigError("providers.embed_base_url is required in http mode")
        if self.dense_dim < 1:
            raise ConfigError("providers.dense_dim must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("providers.max_retries must be >= 0")
        if self.max_concurrency < 1:
            raise ConfigError("providers.max_concurrency must be >= 1")


@dataclass
class GenerationConfig:
    profiles: list[str] = field(default_factory=lambda: list(DEFAULT_PROFILES))
    k_distribution: dict[int, float] = field(
        default_factory=lambda: {2: 0.6, 3: 0.3, 4: 0.1})
    merge_per_product: int = 2
    deepen_per_document: int = 1
    compare_per_category: int = 2
    enable_vetting: bool = False
    temperature: float = 0.7

    def validate(self) -> None:
        if not self.profiles or any(not p.strip() for p in self.profiles):
            raise ConfigError("generation.profiles must be a non-empty list of strings")
        bad_keys = sorted(k for k in self.k_distribution if k not in (2, 3, 4))
        if bad_keys:
            raise ConfigError(f"generation.k_distribution keys must be 2-4, got {bad_keys}")
        if any(p < 0 for p in self.k_distribution.values()):
            raise ConfigError("generation.k_distribution probabilities must be >= 0")
        if sum(self.k_distribution.values()) <= 0:
            raise ConfigError("generation.k_distribution must have positive mass")
        for name in ("merge_per_product", "deepen_per_document", "compare_per_category"):
            if getattr(self, name) < 0:
                raise ConfigError(f"generation.{name} must be >= 0")


@dataclass
class ScoringConfig:
    n_samples: int = 3
    temperature: float = 0.2
    threshold: float = 4.0

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ConfigError("scoring.n_samples must be >= 1")
        if not 1.0 <= self.threshold <= 5.0:
            raise ConfigError("scoring.threshold must lie in [1, 5]")


@dataclass
class CalibrationConfig:
    bin_edges: list[float] = field(default_factory=lambda: [2.0, 3.0, 4.0])
    per_bin: int = 25

    def validate(self) -> None:
        if not self.bin_edges:
            raise ConfigError("calibration.bin_edges must be non-empty")
        if sorted(self.bin_edges) != list(self.bin_edges):
            raise ConfigError("calibration.bin_edges must be sorted ascending")
        if self.per_bin < 1:
            raise ConfigError("calibration.per_bin must be >= 1")


@dataclass
class AnnotationConfig:
    acceptance_min: int = 3
    host: str = "127.0.0.1"
    port: int = 8321
    token: str | None = None

    def validate(self) -> None:
        if self.acceptance_min not in (1, 2, 3):
            raise ConfigError("annotation.acceptance_min must be 1, 2 or 3")
        if not 0 < self.port < 65536:
            raise ConfigError("annotation.port must be a valid TCP port")


@dataclass
class EvalConfig:
    modes: list[str] = field(default_factory=lambda: ["bm25", "dense", "sparse", "multivec"])
    cutoffs: list[int] = field(default_factory=lambda: [5, 10])
    fusion_weights: list[list[float]] = field(
        default_factory=lambda: [[0.4, 0.3, 0.3], [0.7, 0.3, 0.0], [0.5, 0.0, 0.5]])
    pool_size: int = 200
    bm25_k1: float = 1.5
    bm25_b: float = 0.75
    bm25_tokenizer: str = "unicode_word"

    def validate(self) -> None:
        unknown = sorted(set(self.modes) - set(MODES))
        if unknown:
            raise ConfigError(f"eval.modes contains unknown modes: {unknown}")
        if not self.modes:
            raise ConfigError("eval.modes must be non-empty")
        if not self.cutoffs or any(k < 1 for k in self.cutoffs):
            raise ConfigError("eval.cutoffs must be positive integers")
        if self.pool_size < max(self.cutoffs):
            raise ConfigError("eval.pool_size must be >= the largest cutoff")
        for triple in self.fusion_weights:
            if len(triple) != 3:
                raise ConfigError(
                    f"eval.fusion_weights entries need 3 weights, got {triple}")
            self.weights_for(triple)  # delegates range/sum checks

    @staticmethod
    def weights_for(triple: list[float]) -> FusionWeights:
        try:
            return FusionWeights(*triple)
        except Exception as exc:
            raise ConfigError(f"bad fusion weights {triple}: {exc}") from exc

    def bm25_params(self) -> Bm25Params:
        return Bm25Params(k1=self.bm25_k1, b=self.bm25_b,
                          tokenizer_id=self.bm25_tokenizer)


@dataclass
class PipelineConfig:
    workspace: Path
    seed: int = 42
    run_timestamp: str = "1970-01-01T00:00:00Z"
    dataset_id: str = "querybench"
    dataset_version: str = "0.1.0"
    templates_dir: Path | None = None
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig)
    providers: ProvidersConfig = field(default_factory=ProvidersConfig)
    generation: GenerationConfig = field(default_factory=GenerationConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    annotation: AnnotationConfig = field(default_factory=AnnotationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if not str(self.workspace).strip():
            raise ConfigError("workspace path must be non-empty")
        if self.chunking.max_chunk_length < 1:
            raise ConfigError("chunking.max_chunk_length must be >= 1")
        if self.templates_dir is not None and not Path(self.templates_dir).is_dir():
            raise ConfigError(f"templates_dir does not exist: {self.templates_dir}")
        for section in (self.providers, self.generation, self.scoring,
                        self.calibration, self.annotation, self.eval):
            section.validate()

    def to_manifest_dict(self) -> dict:
        """Config snapshot for export manifests; paths become strings and
        credentials stay in the environment."""
        raw = dataclasses.asdict(self)
        raw["workspace"] = str(self.workspace)
        raw["templates_dir"] = str(self.templates_dir) if self.templates_dir else None
        raw["generation"]["k_distribution"] = {
            str(k): v for k, v in self.generation.k_distribution.items()}
        return raw


_SECTION_TYPES = {
    "chunking": ChunkingConfig,
    "providers": ProvidersConfig,
    "generation": GenerationConfig,
    "scoring": ScoringConfig,
    "calibration": CalibrationConfig,
    "annotation": AnnotationConfig,
    "eval": EvalConfig,
}


def _build_section(name: str, cls, data: dict):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {name}: {unknown}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad {name} section: {exc}") from exc


def config_from_dict(data: dict, base_dir: Path | str = ".") -> PipelineConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    data = dict(data)
    base_dir = Path(base_dir)

    if "workspace" not in data:
        raise ConfigError("config is missing the 'workspace' key")
    workspace = Path(data.pop("workspace"))
    if not workspace.is_absolute():
        workspace = base_dir / workspace

    templates_dir = data.pop("templates_dir", None)
    if templates_dir is not None:
        templates_dir = Path(templates_dir)
        if not templates_dir.is_absolute():
            templates_dir = base_dir / templates_dir

    sections = {}
    for name, cls in _SECTION_TYPES.items():
        block = data.pop(name, {})
        if not isinstance(block, dict):
            raise ConfigError(f"config section {name!r} must be a mapping")
        if name == "generation" and "k_distribution" in block:
            block = dict(block)
            block["k_distribution"] = {
                int(k): float(v) for k, v in block["k_distribution"].items()}
        sections[name] = _build_section(name, cls, block)

    scalars = {}
    for key in ("seed", "run_timestamp", "dataset_id", "dataset_version"):
        if key in data:
            scalars[key] = data.pop(key)
    if data:
        raise ConfigError(f"unknown top-level config keys: {sorted(data)}")

    config = PipelineConfig(workspace=workspace, templates_dir=templates_dir,
                            **scalars, **sections)
    config.validate()
    return config


def load_config(path: Path | str) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return config_from_dict(data, base_dir=path.parent)
