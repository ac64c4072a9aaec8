"""
Deterministic seed derivation for the self-triggered DMPC simulator.

Every random stream in a run (per-agent disturbances, sampled verification
checks) is derived from the single root seed of the scenario and a fixed
namespace string. Derived seeds depend only on (root seed, namespace), never
on the order in which streams are created, so two variants run with the same
root seed see the same disturbance realization for every agent.
"""

import hashlib

import numpy as np


# =============================================================================
# Namespaces
# =============================================================================
# These strings are part of the reproducibility contract: changing one
# changes every logged disturbance of every stored run.
# =============================================================================

NAMESPACE_DISTURBANCE = "st-dmpc:disturbance"
NAMESPACE_TERMINAL_CHECK = "st-dmpc:terminal-check"
NAMESPACE_LIPSCHITZ_CHECK = "st-dmpc:lipschitz-check"


def _hash_to_seed(namespace: str) -> int:
    """
    Convert a namespace string to a stable positive 63-bit integer.

    Uses MD5 (for speed and determinism, not security) and takes the first
    8 bytes, masked to 63 bits so the value is a valid non-negative seed.
    """
    h = hashlib.md5(namespace.encode("utf-8")).digest()
    return int.from_bytes(h[:8], "big") & 0x7FFFFFFFFFFFFFFF


def derive_seed(root_seed: int, namespace: str, agent_id: int | None = None) -> int:
    """
    Derive a child seed from the root seed.

    Args:
        root_seed: The scenario (or CLI) seed.
        namespace: One of the NAMESPACE_* constants.
        agent_id: Optional agent index; different agents get different seeds.

    Returns:
        A stable non-negative integer seed.
    """
    if root_seed < 0:
        raise ValueError(f"seed must be non-negative, got {root_seed}")
    key = f"{namespace}:{root_seed}"
    if agent_id is not None:
        key = f"{key}:agent:{agent_id}"
    return _hash_to_seed(key)


def agent_rng(root_seed: int, agent_id: int) -> np.random.Generator:
    """Disturbance stream of one agent."""
    return np.random.default_rng(derive_seed(root_seed, NAMESPACE_DISTURBANCE, agent_id))


def check_rng(root_seed: int, namespace: str, agent_id: int | None = None) -> np.random.Generator:
    """Random stream for a sampled verification check."""
    return np.random.default_rng(derive_seed(root_seed, namespace, agent_id))
