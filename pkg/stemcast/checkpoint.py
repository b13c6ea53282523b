# checkpoint.py
"""
Self-describing model checkpoints.

A checkpoint is a numpy ``.npz`` archive with one float64 array per named
parameter (``param/<name>``) and a ``__meta__`` entry holding a JSON string:
architecture, normalization parameters, wavelet and task configuration,
split fractions and the training seed.
"""

import json
import logging
import zipfile
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .models import Forecaster, build_model

logger = logging.getLogger("stemcast.checkpoint")

META_KEY = "__meta__"
PARAM_PREFIX = "param/"
# fixed entry timestamp so identical models give identical bytes
_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_checkpoint(path, model: Forecaster, meta: Dict, state: Optional[Dict[str, np.ndarray]] = None) -> None:
    """Write ``model`` (or ``state``, a snapshot of its parameters) with ``meta``."""
    state = model.state_dict() if state is None else state
    payload = {PARAM_PREFIX + name: np.ascontiguousarray(values) for name, values in state.items()}
    full_meta = dict(meta, architecture=model.architecture)
    payload[META_KEY] = np.array(json.dumps(full_meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as archive:
        for key in sorted(payload):
            info = zipfile.ZipInfo(key + ".npy", date_time=_ZIP_EPOCH)
            with archive.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, payload[key], allow_pickle=False)
    logger.info("Saved %s checkpoint with %d tensors to %s", model.family, len(payload) - 1, path)


def load_checkpoint(path) -> Tuple[Forecaster, Dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"Checkpoint does not exist: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if META_KEY not in archive.files:
            raise DataError(f"{path} is not a stemcast checkpoint (no metadata)")
        meta = json.loads(str(archive[META_KEY]))
        state = {k[len(PARAM_PREFIX):]: archive[k] for k in archive.files if k.startswith(PARAM_PREFIX)}
    try:
        model = build_model(meta["architecture"], seed=meta.get("seed", 0))
    except (ConfigError, KeyError) as e:
        raise DataError(f"{path}: unknown or incomplete architecture: {e}") from e
    model.load_state_dict(state)
    return model, meta
