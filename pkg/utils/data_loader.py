# utils/data_loader.py
from pathlib import Path
from typing import Sequence, Union

import pandas as pd


def load_report(path: Union[str, Path], required: Sequence[str] = ()) -> pd.DataFrame:
    """Read a report CSV written by a stage and check that the expected columns are present."""
    df = pd.read_csv(path, encoding="utf-8")
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: missing columns {missing}")
    return df
