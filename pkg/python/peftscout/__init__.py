"""Budget-guided search of parameter-efficient fine-tuning architectures."""

import os

VERBOSITY = int(os.environ.get("PEFTSCOUT_VERBOSITY", 0))

from . import autodiff  # noqa: E402
from . import data_io  # noqa: E402
from . import interfacer  # noqa: E402
from . import utilities  # noqa: E402
from .backbone import Backbone, BackboneConfig, build_backbone, pretrain_backbone  # noqa: E402
from .search import BudgetConfig, PEFTSearchProcessor, retrain, run_search  # noqa: E402
from .supernet import SpaceConfig  # noqa: E402
from .sweep import SweepRunner  # noqa: E402

__all__ = [
    "VERBOSITY",
    "Backbone",
    "BackboneConfig",
    "BudgetConfig",
    "PEFTSearchProcessor",
    "SpaceConfig",
    "SweepRunner",
    "autodiff",
    "build_backbone",
    "data_io",
    "interfacer",
    "pretrain_backbone",
    "retrain",
    "run_search",
    "utilities",
]
