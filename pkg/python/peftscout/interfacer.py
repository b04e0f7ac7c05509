"""Interfacing functions to talk to run configurations and architecture files."""

import json
from pathlib import Path
import tomllib
from typing import Any, Dict, List, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator
import yaml

from .backbone import BackboneConfig
from .data_io.tasks import SyntheticTask
from .search import SEARCH_MODES, BudgetConfig
from .selector import ArchitectureEntry, SearchedArchitecture
from .supernet import PEFT_KINDS, SpaceConfig
from .utilities.utils import atomic_write_text, content_hash

ARCH_SCHEMA_VERSION = 1


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class BackboneSection(_Section):
    """Extents of the backbone."""

    num_layers: int = 2
    model_dim: int = 32
    ffn_dim: int = 64
    num_heads: int = 2
    vocab_size: int = 32
    max_seq_len: int = 16
    num_classes: int = 4
    ffn_layer_norm: bool = False


class SpaceSection(_Section):
    """Search space."""

    kinds: List[str] = Field(default_factory=lambda: list(PEFT_KINDS))
    dims: List[int] = Field(default_factory=lambda: [1, 4, 8])
    placement: Optional[Dict[str, List[str]]] = None
    adapter_nonlinearity: bool = False


class BudgetSection(_Section):
    """Budget and search hyperparameters."""

    budget_ratio: float = 0.05
    Z: int = 100
    tau: float = 0.85
    H: int = 5
    gamma: float = 0.85
    T: int = 2000
    lr_weights: float = 3e-4
    lr_arch: float = 1e-2
    seed: int = 0
    mode: str = "iterative"
    batch_size: int = 32
    weight_decay: float = 0.01
    gumbel_temperature: float = 1.0
    gumbel_anneal_to: Optional[float] = None
    project_to_budget: bool = True


class TaskSection(_Section):
    """Synthetic task of the search and of re-training."""

    kind: str = "keyed-lookup"
    vocab_size: int = 32
    seq_len: int = 16
    num_classes: int = 4
    num_train: int = 2000
    num_val: int = 500
    num_test: int = 500
    seed: int = 0


class PretrainSection(_Section):
    """Pretraining of the backbone on a task with the same extents."""

    kind: str = "copy-class"
    steps: int = 500
    lr: float = 0.1
    batch_size: int = 32
    seed: int = 0


class RetrainSection(_Section):
    """Re-training of a searched architecture."""

    steps: int = 500
    lr: float = 3e-3
    batch_size: int = 32
    weight_decay: float = 0.01


class SweepSection(_Section):
    """Grid for hyperparameter sweeps; empty lists keep the budget section's value."""

    Z: List[int] = Field(default_factory=list)
    gamma: List[float] = Field(default_factory=list)
    H: List[int] = Field(default_factory=list)
    tau: List[float] = Field(default_factory=list)
    budget_ratio: List[float] = Field(default_factory=list)
    seeds: List[int] = Field(default_factory=lambda: [0])
    random_baselines: int = 0


class OutputSection(_Section):
    """Where artifacts go."""

    directory: str = "runs/latest"


class RunConfig(_Section):
    """Complete, schema-validated configuration of a run.

    Unknown keys are rejected in every section.

    Example:
        >>> cfg = RunConfig.model_validate({"budget": {"budget_ratio": 0.1}})
        >>> cfg.budget_config().budget_ratio
        0.1
    """

    backbone: BackboneSection = Field(default_factory=BackboneSection)
    space: SpaceSection = Field(default_factory=SpaceSection)
    budget: BudgetSection = Field(default_factory=BudgetSection)
    task: TaskSection = Field(default_factory=TaskSection)
    pretrain: PretrainSection = Field(default_factory=PretrainSection)
    retrain: RetrainSection = Field(default_factory=RetrainSection)
    sweep: SweepSection = Field(default_factory=SweepSection)
    output: OutputSection = Field(default_factory=OutputSection)

    @model_validator(mode="after")
    def _check_domain(self) -> "RunConfig":
        backbone = self.backbone_config()
        self.space_config()
        self.budget_config()
        self.pretrain_task()
        task = self.task_spec()
        if task.vocab_size > backbone.vocab_size or task.num_classes > backbone.num_classes:
            raise ValueError("The task vocabulary / classes exceed the backbone's extents.")
        if task.seq_len > backbone.max_seq_len:
            raise ValueError("The task sequences are longer than the backbone's max_seq_len.")
        return self

    def backbone_config(self) -> BackboneConfig:
        """Backbone configuration."""
        return BackboneConfig(**self.backbone.model_dump())

    def space_config(self) -> SpaceConfig:
        """Search space configuration."""
        return SpaceConfig(**self.space.model_dump())

    def budget_config(self) -> BudgetConfig:
        """Budget configuration."""
        return BudgetConfig(**self.budget.model_dump())

    def task_spec(self) -> SyntheticTask:
        """Task of the search and of re-training."""
        return SyntheticTask(**self.task.model_dump())

    def pretrain_task(self) -> SyntheticTask:
        """Pretraining task: same extents as the search task, own kind and seed."""
        task = self.task.model_dump()
        task.update(kind=self.pretrain.kind, seed=self.pretrain.seed)
        return SyntheticTask(**task)

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON of the fully defaulted configuration.

        The output section is left out: where a run writes does not change it.
        """
        return content_hash(self.model_dump(mode="json", exclude={"output"}))


def load_config(fname: Union[str, Path]) -> RunConfig:
    """Load a run configuration from a TOML or YAML file.

    :param fname: Configuration file (``.toml``, ``.yaml`` or ``.yml``).

    :return: Validated configuration.

    :raises OSError: File does not exist or cannot be decoded.
    :raises ValueError: Unknown file type or invalid content (``ValidationError``).
    """
    fname = Path(fname)
    if not fname.exists():
        raise OSError(f"The requested configuration file {fname} does not exist.")

    suffix = fname.suffix.lower()
    if suffix == ".toml":
        try:
            with fname.open("rb") as fin:
                content = tomllib.load(fin)
        except tomllib.TOMLDecodeError as orig_err:
            raise OSError(
                f"Cannot open the configuration file {fname.name}. TOML decode error."
            ) from orig_err
    elif suffix in (".yaml", ".yml"):
        try:
            with fname.open("r", encoding="utf-8") as fin:
                content = yaml.safe_load(fin) or {}
        except yaml.YAMLError as orig_err:
            raise OSError(
                f"Cannot open the configuration file {fname.name}. YAML decode error."
            ) from orig_err
    else:
        raise ValueError(f"Unknown configuration file type {fname.suffix!r}.")

    if not isinstance(content, dict):
        raise ValueError(f"The configuration file {fname.name} must hold a mapping.")
    return RunConfig.model_validate(content)


def apply_overrides(
    config: RunConfig,
    mode: Optional[str] = None,
    budget_ratio: Optional[float] = None,
    seed: Optional[int] = None,
    out: Optional[Union[str, Path]] = None,
) -> RunConfig:
    """Return a configuration with command-line overrides applied and re-validated.

    :raises ValueError: Overridden values are invalid.
    """
    data = config.model_dump()
    if mode is not None:
        if mode not in SEARCH_MODES:
            raise ValueError(f"Unknown search mode {mode!r}, must be one of {SEARCH_MODES}.")
        data["budget"]["mode"] = mode
    if budget_ratio is not None:
        data["budget"]["budget_ratio"] = budget_ratio
    if seed is not None:
        data["budget"]["seed"] = seed
    if out is not None:
        data["output"]["directory"] = str(out)
    return RunConfig.model_validate(data)


# ARCHITECTURE FILES #


def architecture_to_dict(arch: SearchedArchitecture) -> Dict[str, Any]:
    """Plain dictionary of an architecture, as written to file."""
    return {
        "schema_version": ARCH_SCHEMA_VERSION,
        "dims": list(arch.dims),
        "budget": arch.budget,
        "provenance": dict(arch.provenance),
        "total_params": arch.total_params,
        "sites": [
            {
                "name": entry.name,
                "kind": entry.kind,
                "position": entry.position,
                "kept": entry.kept,
                "dim": entry.dim,
                "param_count": entry.param_count,
            }
            for entry in arch.entries
        ],
    }


def export_architecture(arch: SearchedArchitecture, fname: Union[str, Path]) -> Path:
    """Write an architecture to a JSON file with sorted keys.

    :param arch: Architecture to write.
    :param fname: File name.

    :return: Path of the written file.
    """
    text = json.dumps(architecture_to_dict(arch), indent=2, sort_keys=True) + "\n"
    return atomic_write_text(fname, text)


def import_architecture(fname: Union[str, Path]) -> SearchedArchitecture:
    """Read and validate an architecture file.

    :param fname: File name.

    :return: Architecture.

    :raises OSError: File does not exist or is not valid JSON.
    :raises ValueError: Unsupported schema version or inconsistent content.
    """
    fname = Path(fname)
    if not fname.exists():
        raise OSError(f"The requested architecture file {fname} does not exist.")
    with fname.open("r", encoding="utf-8") as fin:
        try:
            content = json.load(fin)
        except json.decoder.JSONDecodeError as orig_err:
            raise OSError(
                f"Cannot open the architecture file {fname.name}. JSON decode error."
            ) from orig_err

    version = content.get("schema_version")
    if version != ARCH_SCHEMA_VERSION:
        raise ValueError(
            f"Architecture file schema version {version} is not supported, "
            f"expected version {ARCH_SCHEMA_VERSION}."
        )

    try:
        entries = []
        for site in content["sites"]:
            if site["kind"] not in PEFT_KINDS:
                raise ValueError(f"Unknown PEFT kind {site['kind']!r} in {fname.name}.")
            entries.append(
                ArchitectureEntry(
                    name=str(site["name"]),
                    kind=str(site["kind"]),
                    position=str(site["position"]),
                    kept=bool(site["kept"]),
                    dim=int(site["dim"]),
                    param_count=int(site["param_count"]),
                )
            )
        budget = content.get("budget")
        arch = SearchedArchitecture(
            entries=tuple(entries),
            dims=tuple(int(d) for d in content["dims"]),
            budget=None if budget is None else float(budget),
            provenance=dict(content.get("provenance", {})),
        )
    except (KeyError, TypeError) as orig_err:
        raise ValueError(f"Malformed architecture file {fname.name}.") from orig_err

    if content.get("total_params", arch.total_params) != arch.total_params:
        raise ValueError(
            f"Architecture file {fname.name}: total_params does not match the sites."
        )
    return arch
