"""Run searches over a hyperparameter grid, enable batch runs."""

from dataclasses import replace
import itertools
import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .backbone import Backbone, build_backbone, pretrain_backbone
from .data_io.excel_writer import sweep_workbook_writer
from .data_io.export import write_table
from .data_io.tasks import SplitData, generate_task
from .interfacer import RunConfig
from .search import BudgetConfig, retrain, run_search
from .selector import SearchedArchitecture
from .supernet import enumerate_sites
from .utilities.baselines import random_architecture

logger = logging.getLogger(__name__)

SWEEP_HEADER = (
    "mode",
    "Z",
    "gamma",
    "H",
    "tau",
    "budget_ratio",
    "seed",
    "total_params",
    "param_ratio",
    "val_accuracy",
    "test_accuracy",
)

GRID_KEYS = ("Z", "gamma", "H", "tau", "budget_ratio")


class SweepRunner:
    """Search, re-train and evaluate every point of a hyperparameter grid.

    The backbone is pretrained (or taken as given) once and shared by all runs.

    Example:
        >>> cfg = RunConfig.model_validate({"sweep": {"Z": [10, 20], "seeds": [0, 1]}})
        >>> runner = SweepRunner(cfg)
        >>> runner.num_points
        4
        >>> rows = runner.run()
    """

    def __init__(self, config: RunConfig, backbone: Optional[Backbone] = None) -> None:
        """Initialize the sweep.

        :param config: Run configuration; its ``sweep`` section spans the grid.
        :param backbone: Frozen backbone to use; pretrained from the config if None.

        :raises ValueError: The given backbone is not frozen.
        """
        if backbone is not None and not backbone.frozen:
            raise ValueError("The backbone of a sweep must be pretrained and frozen.")
        self.config = config
        self._backbone = backbone
        self._data = None

        self.rows: List[Tuple] = []

    # PROPERTIES #

    @property
    def backbone(self) -> Backbone:
        """Frozen backbone shared by all runs; pretrained on first access."""
        if self._backbone is None:
            cfg = self.config
            backbone = build_backbone(cfg.backbone_config(), seed=cfg.pretrain.seed)
            self._backbone = pretrain_backbone(
                backbone,
                cfg.pretrain_task(),
                steps=cfg.pretrain.steps,
                lr=cfg.pretrain.lr,
                batch_size=cfg.pretrain.batch_size,
                seed=cfg.pretrain.seed,
            )
        return self._backbone

    @property
    def data(self) -> SplitData:
        """Split data of the search task; generated on first access."""
        if self._data is None:
            self._data = generate_task(self.config.task_spec())
        return self._data

    @property
    def grid(self) -> List[BudgetConfig]:
        """Budget configurations of all grid points, seeds varying fastest."""
        base = self.config.budget_config()
        sweep = self.config.sweep
        axes = [getattr(sweep, key) or [getattr(base, key)] for key in GRID_KEYS]
        seeds = sweep.seeds or [base.seed]

        ret = []
        for values in itertools.product(*axes):
            point = dict(zip(GRID_KEYS, values))  # noqa: B905
            for seed in seeds:
                ret.append(replace(base, seed=seed, **point))
        return ret

    @property
    def num_points(self) -> int:
        """Number of searches in the grid."""
        return len(self.grid)

    # METHODS #

    def run(self) -> List[Tuple]:
        """Run all grid points and the random baselines.

        :return: Result rows, aligned with ``SWEEP_HEADER``.
        """
        self.rows = []
        grid = self.grid
        for it, budget in enumerate(grid):
            logger.info("sweep point %d of %d: %s", it + 1, len(grid), budget)
            self.rows.append(self.run_point(budget))

        ratios = sorted({budget.budget_ratio for budget in grid})
        for ratio in ratios:
            for it in range(self.config.sweep.random_baselines):
                self.rows.append(self.run_random(ratio, it))
        return self.rows

    def run_point(self, budget: BudgetConfig) -> Tuple:
        """Search and re-train one grid point.

        :param budget: Budget configuration of the point.

        :return: Result row.
        """
        provenance = {"config_hash": self.config.content_hash()}
        arch, trace = run_search(
            self.backbone, self.config.space_config(), self.data, budget, provenance
        )
        metrics = self._retrain(arch, budget.seed)
        logger.info(
            "search %.2f s, retrain %.2f s", trace.search_seconds, metrics.seconds
        )
        return (
            budget.mode,
            budget.Z,
            budget.gamma,
            budget.H,
            budget.tau,
            budget.budget_ratio,
            budget.seed,
            arch.total_params,
            arch.total_params / self.backbone.param_count,
            metrics.val_accuracy,
            metrics.test_accuracy,
        )

    def run_random(self, budget_ratio: float, draw: int) -> Tuple:
        """Re-train one random architecture of equal budget.

        :param budget_ratio: Budget as fraction of the backbone parameters.
        :param draw: Index of the draw, seeds the random architecture.

        :return: Result row; hyperparameters of the search are left empty.
        """
        arch = self.random_architecture(budget_ratio, draw)
        metrics = self._retrain(arch, draw)
        logger.info("random draw %d: retrain %.2f s", draw, metrics.seconds)
        return (
            "random",
            "",
            "",
            "",
            "",
            budget_ratio,
            draw,
            arch.total_params,
            arch.total_params / self.backbone.param_count,
            metrics.val_accuracy,
            metrics.test_accuracy,
        )

    def random_architecture(self, budget_ratio: float, draw: int) -> SearchedArchitecture:
        """Random architecture within the budget of a ratio.

        :param budget_ratio: Budget as fraction of the backbone parameters.
        :param draw: Index of the draw.

        :return: Random architecture.
        """
        backbone = self.backbone
        sites = enumerate_sites(backbone, self.config.space_config(), seed=draw)
        return random_architecture(
            sites,
            budget_ratio * backbone.param_count,
            np.random.default_rng([draw, 4]),
            provenance={"mode": "random", "draw": draw},
        )

    def accuracy_gap(self) -> Dict[str, float]:
        """Median test accuracy of searched minus random architectures.

        :return: Dictionary with both medians and their difference; NaN where a
            group has no rows.
        """
        searched = [row[10] for row in self.rows if row[0] != "random"]
        rand = [row[10] for row in self.rows if row[0] == "random"]
        med_s = float(np.median(searched)) if searched else np.nan
        med_r = float(np.median(rand)) if rand else np.nan
        return {"searched": med_s, "random": med_r, "gap": med_s - med_r}

    def write(self, directory: Union[str, Path]) -> Tuple[Path, Path]:
        """Write the result rows as ``sweep.csv`` and ``sweep.xlsx``.

        :param directory: Output directory.

        :return: Paths of the CSV file and of the workbook.
        """
        directory = Path(directory)
        fcsv = write_table(SWEEP_HEADER, self.rows, directory / "sweep.csv")
        fxlsx = sweep_workbook_writer(SWEEP_HEADER, self.rows, directory / "sweep.xlsx")
        return fcsv, fxlsx

    def _retrain(self, arch: SearchedArchitecture, seed: int):
        """Re-train an architecture with the configured settings."""
        cfg = self.config.retrain
        return retrain(
            arch,
            self.backbone,
            self.data,
            steps=cfg.steps,
            lr=cfg.lr,
            batch_size=cfg.batch_size,
            seed=seed,
            weight_decay=cfg.weight_decay,
            adapter_nonlinearity=self.config.space.adapter_nonlinearity,
        )
