"""
Atomic persistence for fit results, reports and tables.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np
import pandas as pd

PathLike = Union[str, Path]

CSV_FLOAT_FORMAT = "%.17g"


def _to_builtin(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return _to_builtin(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def dumps_json(payload: Dict[str, Any]) -> str:
    return json.dumps(_to_builtin(payload), indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_text_atomic(path: PathLike, content: str) -> str:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{p.name}.", dir=str(p.parent))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(content)
        os.replace(tmp, p)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return str(p)


def write_json_atomic(path: PathLike, payload: Dict[str, Any]) -> str:
    return write_text_atomic(path, dumps_json(payload))


def write_csv_atomic(df: pd.DataFrame, path: PathLike, sep: str = ",") -> str:
    content = df.to_csv(index=False, sep=sep, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return write_text_atomic(path, content)


def read_json(path: PathLike) -> Dict[str, Any]:
    with Path(path).open("r", encoding="utf-8") as f:
        return json.load(f)
