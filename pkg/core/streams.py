"""
Seed to stream derivation.

One experiment seed fans out to independent per-stage, per-worker streams.
The stage name is hashed with CRC-32 into the SeedSequence spawn key, so
adding a stage or a worker never reshuffles the randomness of another one.
"""

import zlib

import numpy as np


def stage_key(stage: str) -> int:
    return zlib.crc32(stage.encode('utf-8'))


def derive_seed_sequence(seed: int, stage: str, worker: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(stage_key(stage), int(worker)))


def derive_stream(seed: int, stage: str, worker: int = 0) -> np.random.Generator:
    """
    Counter-based generator for one (stage, worker) pair

    Args:
        seed: Experiment seed (64-bit)
        stage: Stage name, e.g. 'sample-cdlt' or 'mc-run.chain'
        worker: Worker or chain index

    Returns:
        numpy Generator over Philox
    """
    return np.random.Generator(np.random.Philox(derive_seed_sequence(seed, stage, worker)))
