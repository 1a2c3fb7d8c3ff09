"""
Seed derivation from the master seed
"""
from typing import Dict, List
import numpy as np

# Fixed purpose keys; changing one changes every artifact that depends on it
PURPOSES: Dict[str, int] = {
    "partition": 1,
    "corruption": 2,
    "holdout": 3,
    "streams": 4,
    "init": 5,
    "shuffle": 6,
    "synthetic": 7,
    "rademacher": 8,
    "graph": 9,
}


def seed_sequence(master_seed: int, purpose: str, *keys: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, PURPOSES[purpose], *keys])


def derive_seed(master_seed: int, purpose: str, *keys: int) -> int:
    """32-bit integer seed (accepted by numpy, networkx and scikit-learn alike)"""
    return int(seed_sequence(master_seed, purpose, *keys).generate_state(1, dtype=np.uint32)[0])


def agent_rngs(master_seed: int, purpose: str, num_agents: int) -> List[np.random.Generator]:
    """One independent generator per agent"""
    return [np.random.default_rng(child) for child in seed_sequence(master_seed, purpose).spawn(num_agents)]
