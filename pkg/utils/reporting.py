# utils/reporting.py
"""CSV/plot-data writers, checksums and the run manifest."""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

# ---- Config ----
FLOAT_FORMAT = "%.17g"
CHECKSUM_CHUNK = 1 << 20


# ---------------- CSV ---------------- #
def write_csv(df: pd.DataFrame, path) -> Path:
    """Comma separated, '.' decimal, header row, LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return path


def file_checksum(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(CHECKSUM_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------- Plot data ---------------- #
def emit_plotdata(curve, fit, path) -> Dict[str, Any]:
    """
    Two-column files next to `path`:
      <stem>_tv.csv      k, tv
      <stem>_fit.csv     k, fitted  (C * exp(-gamma k))
      <stem>_resid.csv   k, residual (tv - fitted)
    An empty curve gives header-only files. Returns paths and the max |residual|.
    """
    path = Path(path)
    stem = path.with_suffix("")
    k = np.arange(len(curve.tv_values), dtype=int)
    tv = np.asarray(curve.tv_values, dtype=float)
    if fit is not None and k.size:
        fitted = fit.C_fit * np.exp(-fit.gamma_fit * k)
    else:
        fitted = np.zeros(0) if not k.size else np.full(k.size, np.nan)
    resid = tv - fitted if k.size else np.zeros(0)
    out = {
        "tv": write_csv(pd.DataFrame({"k": k, "tv": tv}), f"{stem}_tv.csv"),
        "fit": write_csv(pd.DataFrame({"k": k, "fitted": fitted}), f"{stem}_fit.csv"),
        "residual": write_csv(pd.DataFrame({"k": k, "residual": resid}), f"{stem}_resid.csv"),
    }
    finite = resid[np.isfinite(resid)]
    return {"files": out, "max_abs_residual": float(np.abs(finite).max()) if finite.size else 0.0}


# ---------------- Manifest ---------------- #
class FileEntry(BaseModel):
    path: str
    sha256: str


class RunManifest(BaseModel):
    config: Dict[str, Any]
    version: str
    elapsed: Dict[str, float] = Field(default_factory=dict)
    verdicts: Dict[str, bool] = Field(default_factory=dict)
    files: List[FileEntry] = Field(default_factory=list)
    fits: Dict[str, Dict[str, Any]] = Field(default_factory=dict)
    notes: Dict[str, Any] = Field(default_factory=dict)

    def add_file(self, path, root: Optional[Path] = None) -> None:
        p = Path(path)
        rel = str(p.relative_to(root)) if root is not None else str(p)
        self.files.append(FileEntry(path=rel, sha256=file_checksum(p)))

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n")
        return path


__all__ = ["write_csv", "file_checksum", "emit_plotdata", "RunManifest", "FileEntry", "FLOAT_FORMAT"]
