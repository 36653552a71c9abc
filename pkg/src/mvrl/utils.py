import hashlib
import logging
import os
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .constants import LOG_LEVEL_ENV_VAR, NUM_THREADS_ENV_VAR

LOG_FORMAT = '%(asctime)s - %(levelname)-8s - %(name)-12s - %(message)s'
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def _stream_key(name: str) -> int:
    """Stable 32-bit key for a stream name (``hash()`` is salted per process)."""
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


class SeedBank:
    """
    Fans one global seed out to independent, named random streams.

    Every stream is a counter-based Philox generator keyed by
    ``(seed, name)``, so adding a new consumer never perturbs the draws
    of an existing one.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._numpy: Dict[str, np.random.Generator] = {}
        self._torch: Dict[str, torch.Generator] = {}

    def sequence(self, name: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(_stream_key(name),))

    def numpy(self, name: str) -> np.random.Generator:
        """Returns the (cached) numpy generator for ``name``."""
        if name not in self._numpy:
            self._numpy[name] = np.random.Generator(np.random.Philox(self.sequence(name)))
        return self._numpy[name]

    def int_seed(self, name: str) -> int:
        return int(self.sequence(name).generate_state(1, dtype=np.uint32)[0])

    def torch(self, name: str) -> torch.Generator:
        """Returns the (cached) CPU torch generator for ``name``."""
        if name not in self._torch:
            generator = torch.Generator()
            generator.manual_seed(self.int_seed(name))
            self._torch[name] = generator
        return self._torch[name]

    def seed_torch_init(self, name: str) -> None:
        """Seeds torch's global generator, which ``nn`` layers use for initialisation."""
        torch.manual_seed(self.int_seed(name))


def configure_logging(debug: bool = False) -> None:
    """Root logging setup shared by every entry point."""
    level_name = os.getenv(LOG_LEVEL_ENV_VAR)
    level = logging.DEBUG if debug else logging.INFO
    if level_name:
        level = getattr(logging, level_name.upper(), level)
    logging.basicConfig(level=level, format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT)
    logging.getLogger().setLevel(level)
    # matplotlib is chatty at DEBUG about font discovery.
    logging.getLogger("matplotlib").setLevel(logging.WARNING)


def apply_thread_limit() -> Optional[int]:
    """Applies ``MVRL_NUM_THREADS`` to torch, if set."""
    value = os.getenv(NUM_THREADS_ENV_VAR)
    if not value:
        return None
    try:
        threads = int(value)
    except ValueError:
        logging.warning(f"Ignoring {NUM_THREADS_ENV_VAR}={value!r}: not an integer.")
        return None
    torch.set_num_threads(max(1, threads))
    logging.info(f"torch limited to {threads} CPU thread(s).")
    return threads


def get_project_root() -> Path:
    """
    Determines the project root path.

    If the 'RUNNING_IN_DOCKER' environment variable is set, it assumes the root
    is '/app'. Otherwise, it calculates the root relative to this file's location.

    (This file is in /src/mvrl/, so root is two levels up).
    """
    if os.getenv("RUNNING_IN_DOCKER"):
        return Path("/app")
    return Path(__file__).resolve().parent.parent.parent
