# services/report_service.py

import hashlib
import json
import logging
from pathlib import Path

from pydantic import BaseModel

logger = logging.getLogger(__name__)

SCHEMA_FILE = "report.schema.json"


def canonical_json(data) -> str:
    if isinstance(data, BaseModel):
        data = data.model_dump(mode="json")
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_of(data) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def report_digest(report: BaseModel) -> str:
    """Hash of the canonical report with wall-clock timings left out."""
    data = report.model_dump(mode="json")
    data.pop("timings", None)
    return sha256_of(data)


def write_report(report: BaseModel, out_dir: str | Path, name: str) -> Path:
    """Validate, then write <name>.json and the report JSON schema next to it."""
    report = type(report).model_validate(report.model_dump())
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.json"
    path.write_text(canonical_json(report) + "\n", encoding="utf-8")
    (out / SCHEMA_FILE).write_text(
        json.dumps(type(report).model_json_schema(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    logger.info(f"[Report] wrote {path}")
    return path
