import json
import logging
import os
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from app.config import SCHEMA_VERSION
from app.models.icnn import IcnnParams, params_from_records, params_to_records
from app.utils.error_handler import ConfigError

logger = logging.getLogger(__name__)

GENERATED_PREFIX = "# generated"


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path


def write_csv(frame: pd.DataFrame, path) -> str:
    """CSV with one leading '# generated <UTC time>' comment line; the rest is deterministic."""
    ensure_dir(os.path.dirname(os.fspath(path)) or '.')
    with open(path, 'w', newline='') as handle:
        handle.write(f"{GENERATED_PREFIX} {datetime.now(timezone.utc).isoformat()}\n")
        frame.to_csv(handle, index=False, float_format='%.17g', na_rep='')
    logger.info(f"Wrote {len(frame)} rows to {path}")
    return os.fspath(path)


def read_csv(path) -> pd.DataFrame:
    return pd.read_csv(path, comment=None, skiprows=1)


def _builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(payload: dict, path) -> str:
    ensure_dir(os.path.dirname(os.fspath(path)) or '.')
    if 'schema_version' not in payload:
        payload = {'schema_version': SCHEMA_VERSION, **payload}
    with open(path, 'w') as handle:
        json.dump(payload, handle, indent=2, sort_keys=False, allow_nan=True, default=_builtin)
        handle.write('\n')
    logger.info(f"Wrote {path}")
    return os.fspath(path)


def read_json(path) -> dict:
    try:
        with open(path) as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"File not found: {path}", field='path') from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Invalid JSON in {path}: line {exc.lineno}: {exc.msg}", field='path') from exc


def save_params(params: IcnnParams, path) -> str:
    return write_json(params_to_records(params), path)


def load_params(path) -> IcnnParams:
    return params_from_records(read_json(path))
