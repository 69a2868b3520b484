"""Experiment configuration: TOML documents validated by pydantic models, and the builders that turn them into
models and federated datasets.

A minimal document::

    schema_version = 1
    experiment_id = "minimal"
    seed = 0

    [dataset]
    kind = "synthetic"

    [[algorithms]]
    algorithm = "fedavg"
    alpha = 0.1
    rounds = 10
"""
import logging
import warnings
from typing import Any, List, Literal, Optional

import toml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from fedsim import model_zoo
from fedsim.data import (FederatedDataset, build_federated_dataset, load_manifest, parse_csv, parse_libsvm,
                         placeholder_dataset, synth_blobs)
from fedsim.engine import AlgoConfig
from fedsim.errors import ConfigError
from fedsim.model import ModelI

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# The local and global step-size grids searched by `fedsim grid` when a config gives none.
DEFAULT_ALPHA_GRID = [0.0001, 0.0003, 0.0007, 0.001, 0.003, 0.007, 0.01, 0.03, 0.07, 0.1, 0.3, 0.7]
DEFAULT_ETA_GRID = [0.01, 0.03, 0.07, 0.1, 0.3, 0.7, 1.0]


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class ModelConfig(_Section):
    kind: Literal['mclr', 'quadratic', 'mlp'] = 'mclr'
    l2_coeff: float = Field(1e-4, ge=0)
    hidden_width: int = Field(8, ge=1)
    init_scale: float = Field(0.5, gt=0)
    # Quadratic objectives only.
    dimension: int = Field(10, ge=1)
    mu: float = Field(1.0, gt=0)
    L: float = Field(10.0, gt=0)


class DatasetConfig(_Section):
    kind: Literal['synthetic', 'libsvm', 'csv', 'none'] = 'synthetic'
    num_classes: int = Field(5, ge=2)
    num_features: int = Field(10, ge=1)
    num_samples: int = Field(5000, ge=2)
    spread: float = Field(1.0, gt=0)
    path: Optional[str] = None
    manifest: Optional[str] = None
    split_ratio: float = Field(0.75, gt=0, lt=1)

    @model_validator(mode='after')
    def _path_given(self) -> 'DatasetConfig':
        if self.kind in ('libsvm', 'csv') and not self.path:
            raise ValueError('a %s dataset needs a path' % self.kind)

        return self


class PartitionConfig(_Section):
    num_clients: int = Field(10, ge=1)
    labels_per_client: int = Field(2, ge=1)
    seed: Optional[int] = None


class GridConfig(_Section):
    alpha_values: List[float] = Field(default_factory=lambda: list(DEFAULT_ALPHA_GRID), min_length=1)
    eta_values: List[float] = Field(default_factory=lambda: list(DEFAULT_ETA_GRID), min_length=1)
    selection: Literal['final_loss', 'rounds_to_accuracy'] = 'final_loss'
    target_accuracy: Optional[float] = Field(None, gt=0, le=1)

    @model_validator(mode='after')
    def _positive(self) -> 'GridConfig':
        if any(value <= 0 for value in self.alpha_values + self.eta_values):
            raise ValueError('grid values must be positive')

        if self.selection == 'rounds_to_accuracy' and self.target_accuracy is None:
            raise ValueError('selection by rounds to accuracy needs target_accuracy')

        return self


class ReportConfig(_Section):
    thresholds: List[float] = Field(default_factory=lambda: [0.5, 0.6, 0.7, 0.8])
    reference: Optional[float] = None
    format: Literal['csv', 'jsonl'] = 'csv'


class ExperimentConfig(_Section):
    schema_version: Literal[1]
    experiment_id: str = 'experiment'
    seed: int = 0
    output_dir: str = 'results'
    model: ModelConfig = ModelConfig()
    dataset: DatasetConfig = DatasetConfig()
    partition: PartitionConfig = PartitionConfig()
    algorithms: List[AlgoConfig] = Field(min_length=1)
    grid: Optional[GridConfig] = None
    report: ReportConfig = ReportConfig()

    @model_validator(mode='before')
    @classmethod
    def _propagate_seed(cls, data: Any) -> Any:
        """Algorithms without their own seed inherit the experiment seed."""
        if isinstance(data, dict) and isinstance(data.get('algorithms'), list):
            seed = data.get('seed', 0)
            data = {**data, 'algorithms': [{'seed': seed, **a} if isinstance(a, dict) else a
                                           for a in data['algorithms']]}

        return data

    def with_seed(self, seed: int) -> 'ExperimentConfig':
        """Override every seed of the experiment."""
        data = self.model_dump()
        data['seed'] = seed
        data['partition']['seed'] = None

        for algorithm in data['algorithms']:
            algorithm['seed'] = seed

        return ExperimentConfig.model_validate(data)


def parse_config(document: dict) -> ExperimentConfig:
    """Validate a config document. Unknown top-level keys are ignored with a warning."""
    unknown = sorted(set(document) - set(ExperimentConfig.model_fields))

    if unknown:
        warnings.warn('Ignoring unknown config keys: %s.' % ', '.join(unknown))
        document = {key: value for key, value in document.items() if key not in unknown}

    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        error = e.errors()[0]
        raise ConfigError(error['msg'], field='.'.join(str(part) for part in error['loc']) or None)


def load_config(path: str) -> ExperimentConfig:
    """Load and validate an experiment config.

    :param path: The TOML file.
    :return: The validated config.
    """
    try:
        with open(path, 'r') as f:
            document = toml.load(f)
    except toml.TomlDecodeError as e:
        raise ConfigError(e.msg, line=e.lineno)
    except OSError as e:
        raise ConfigError('cannot read %s: %s' % (path, e.strerror or e))

    return parse_config(document)


def build_dataset(cfg: ExperimentConfig) -> FederatedDataset:
    """Load or generate the samples of an experiment and partition them across its clients."""
    if cfg.model.kind == 'quadratic' or cfg.dataset.kind == 'none':
        return placeholder_dataset(cfg.partition.num_clients)

    dataset = cfg.dataset

    if dataset.kind == 'synthetic':
        samples = synth_blobs(cfg.seed, dataset.num_classes, dataset.num_features, dataset.num_samples,
                              dataset.spread)
    elif dataset.kind == 'libsvm':
        with open(dataset.path, 'r') as f:
            samples = parse_libsvm(f, dataset.num_features)
    else:
        samples = parse_csv(dataset.path, dataset.num_features)

    manifest = load_manifest(dataset.manifest) if dataset.manifest else None
    seed = cfg.partition.seed if cfg.partition.seed is not None else cfg.seed
    num_classes = dataset.num_classes if dataset.kind == 'synthetic' else None

    return build_federated_dataset(samples, cfg.partition.num_clients, cfg.partition.labels_per_client,
                                   dataset.split_ratio, seed, manifest=manifest, num_classes=num_classes)


def build_model(cfg: ExperimentConfig, data: FederatedDataset) -> ModelI:
    spec = cfg.model

    if spec.kind == 'quadratic':
        return model_zoo.make_quadratic(spec.dimension, spec.mu, spec.L, cfg.seed)

    num_classes = max(data.num_classes, cfg.dataset.num_classes if cfg.dataset.kind == 'synthetic' else 2)

    if spec.kind == 'mlp':
        return model_zoo.MLPModel(data.num_features, spec.hidden_width, num_classes, spec.init_scale)

    return model_zoo.MCLRModel(num_classes, data.num_features, spec.l2_coeff)
