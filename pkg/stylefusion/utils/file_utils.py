import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import pandas as pd
from pydantic import BaseModel

from ..core.config import settings
from ..models.config import OutputFormat
from ..models.reports import BoundReport, ExperimentReport, RunManifest

MASK_COLUMNS = ["experiment", "mode", "kappa", "mask_fraction", "mae_logits", "mae_alpha", "mae_output", "seed"]
KAPPA_COLUMNS = ["experiment", "mode", "kappa", "style_contribution", "prompt_contribution", "branch_gain", "seed"]
BOUND_COLUMNS = ["check_name", "delta_or_sigma", "empirical", "bound", "slack", "satisfied", "trials", "seed", "detail"]


def ensure_output_directory(out_dir: Optional[str] = None) -> Path:
    """Ensure the report directory exists."""
    path = Path(out_dir or settings.OUTPUT_DIR)
    path.mkdir(parents=True, exist_ok=True)
    return path


def canonical_json(document: Any) -> str:
    """Sorted-key, 2-space JSON with a trailing newline."""
    if isinstance(document, BaseModel):
        document = document.model_dump(mode="json")
    return json.dumps(document, indent=2, sort_keys=True) + "\n"


def config_sha256(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON of a validated config."""
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def experiment_frame(report: ExperimentReport) -> pd.DataFrame:
    """One row per (mode, mask fraction) cell with per-layer MAE columns appended."""
    rows = []
    for cell in report.cells:
        row: Dict[str, Any] = {
            "experiment": report.experiment,
            "mode": cell.mode.value,
            "kappa": cell.kappa,
            "mask_fraction": cell.mask_fraction,
            "mae_logits": cell.mae_logits,
            "mae_alpha": cell.mae_alpha,
            "mae_output": cell.mae_output,
            "seed": report.metadata.get("seed"),
        }
        for layer in cell.per_layer:
            row[f"mae_logits_L{layer.layer}"] = layer.mae_logits
            row[f"mae_alpha_L{layer.layer}"] = layer.mae_alpha
            row[f"mae_output_L{layer.layer}"] = layer.mae_output
        rows.append(row)
    return pd.DataFrame(rows, columns=_ordered_columns(MASK_COLUMNS, rows))


def kappa_frame(report: ExperimentReport) -> pd.DataFrame:
    rows = [
        {
            "experiment": report.experiment,
            "mode": "dssi",
            "kappa": cell.kappa,
            "style_contribution": cell.style_contribution,
            "prompt_contribution": cell.prompt_contribution,
            "branch_gain": cell.branch_gain,
            "seed": report.metadata.get("seed"),
        }
        for cell in report.kappa_cells
    ]
    return pd.DataFrame(rows, columns=KAPPA_COLUMNS)


def bound_frame(reports: Sequence[BoundReport]) -> pd.DataFrame:
    """One row per bound check, in suite order."""
    rows = [
        {
            "check_name": r.check_name,
            "delta_or_sigma": r.parameter,
            "empirical": r.empirical,
            "bound": r.bound,
            "slack": r.slack,
            "satisfied": r.satisfied,
            "trials": r.trials,
            "seed": r.seed,
            "detail": r.detail,
        }
        for r in reports
    ]
    return pd.DataFrame(rows, columns=BOUND_COLUMNS)


def _ordered_columns(base: List[str], rows: Iterable[Dict[str, Any]]) -> List[str]:
    extra: List[str] = []
    for row in rows:
        extra.extend(k for k in row if k not in base and k not in extra)
    return base + extra


def save_frame(frame: pd.DataFrame, out_dir: Path, stem: str) -> str:
    path = out_dir / f"{stem}.csv"
    frame.to_csv(path, index=False, float_format="%.17g")
    return str(path)


def save_json(document: Any, out_dir: Path, name: str) -> str:
    path = out_dir / name
    path.write_text(canonical_json(document), encoding="utf-8")
    return str(path)


def save_outputs(
    out_dir: Path,
    stem: str,
    frame: pd.DataFrame,
    document: Any,
    output_format: OutputFormat,
) -> List[str]:
    """Write the CSV and/or JSON form of one report, returning the written paths."""
    written = []
    if output_format in (OutputFormat.CSV, OutputFormat.BOTH):
        written.append(save_frame(frame, out_dir, stem))
    if output_format in (OutputFormat.JSON, OutputFormat.BOTH):
        written.append(save_json(document, out_dir, f"{stem}.json"))
    return written


def save_manifest(manifest: RunManifest, out_dir: Path) -> str:
    return save_json(manifest, out_dir, "manifest.json")
