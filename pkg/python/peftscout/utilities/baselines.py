"""Random architectures of equal budget, the reference a search has to beat."""

from typing import Dict, List, Optional

import numpy as np

from ..selector import ArchitectureEntry, SearchedArchitecture
from ..supernet import ModuleSite, param_count


def random_architecture(
    sites: List[ModuleSite],
    budget: float,
    rng: np.random.Generator,
    provenance: Optional[Dict[str, object]] = None,
) -> SearchedArchitecture:
    """Draw a random architecture that fits into a budget.

    Sites are visited in random order with a random candidate dimension each; a site
    is kept if it still fits into the remaining budget.

    :param sites: Sites of the search space.
    :param budget: Absolute parameter budget.
    :param rng: Random generator.
    :param provenance: Recorded in the architecture.

    :return: Random architecture with ``total_params <= budget``.
    """
    n = len(sites)
    order = rng.permutation(n)
    choice = rng.integers(0, len(sites[0].dims), size=n) if n else np.zeros(0, int)

    kept: Dict[int, int] = {}
    used = 0
    for idx in order:
        site = sites[idx]
        dim = site.dims[choice[idx]] if site.rank_parameterized else site.dims[0]
        count = param_count(site.kind, site.position, dim)
        if used + count <= budget:
            kept[int(idx)] = dim
            used += count

    entries = []
    for idx, site in enumerate(sites):
        dim = kept.get(idx)
        entries.append(
            ArchitectureEntry(
                name=site.name,
                kind=site.kind,
                position=site.position.name,
                kept=dim is not None,
                dim=0 if dim is None else int(dim),
                param_count=0 if dim is None else param_count(site.kind, site.position, dim),
            )
        )
    dims = sites[0].dims if sites else ()
    return SearchedArchitecture(
        entries=tuple(entries),
        dims=tuple(dims),
        budget=float(budget),
        provenance=dict(provenance or {"mode": "random"}),
    )
