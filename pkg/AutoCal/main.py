from __future__ import annotations

import math
from pathlib import Path
from typing import Any, Dict, Optional

from fastapi import FastAPI, HTTPException
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field, ValidationError

from . import __version__
from .errors import ReportError, ScenarioError, SolverError
from .pipeline import run_pipeline
from .report import compare, load_report
from .settings import configure_logging, get_settings, public_config
from .sim import Scenario, generate, load_scenario

BASE_DIR = Path(__file__).resolve().parent
SCENARIO_DIR = BASE_DIR / "scenarios"

app = FastAPI(title="AutoCal", version=__version__)

settings = get_settings()
configure_logging(settings)


# -----------------------------
# Schemas
# -----------------------------
class RunIn(BaseModel):
    scenario: Optional[str] = Field(default=None, description="bundled scenario name")
    fields: Dict[str, Any] = Field(default_factory=dict, description="scenario fields (override the named one)")
    alpha: Optional[float] = Field(default=None, ge=0.0, lt=1.0)
    n_test: Optional[int] = Field(default=None, ge=1)
    pq_size: Optional[int] = Field(default=None, ge=1)
    segment_size: Optional[int] = Field(default=None, ge=2)
    change_detection: bool = True
    out: Optional[str] = None


class CompareIn(BaseModel):
    a: str = Field(min_length=1)
    b: str = Field(min_length=1)


def _finite(v: Any) -> Any:
    """NaN and inf are not valid JSON; report them as null."""
    return None if isinstance(v, float) and not math.isfinite(v) else v


def _json_safe(d: Dict[str, Any]) -> Dict[str, Any]:
    return {k: _finite(v) for k, v in d.items()}


def _scenario_for(body: RunIn) -> Scenario:
    if body.scenario:
        path = SCENARIO_DIR / f"{body.scenario}.env"
        return load_scenario(path, **body.fields)
    try:
        return Scenario.model_validate(body.fields)
    except ValidationError as e:
        raise HTTPException(status_code=400, detail="invalid_scenario") from e


# -----------------------------
# Routes
# -----------------------------
@app.get("/healthz")
def healthz():
    scenarios = sorted(p.stem for p in SCENARIO_DIR.glob("*.env"))
    return {"status": "ok", "version": __version__, "scenarios": scenarios}


@app.get("/config")
def config():
    return JSONResponse(public_config(settings))


@app.post("/run")
def run(body: RunIn):
    update = {k: v for k, v in (("alpha", body.alpha), ("n_test", body.n_test),
                                ("pq_size", body.pq_size), ("segment_size", body.segment_size)) if v is not None}
    update["change_detection"] = body.change_detection
    run_settings = settings.model_validate({**settings.model_dump(), **update})
    try:
        scenario = _scenario_for(body)
        stream, truth = generate(scenario)
        report = run_pipeline(stream, truth, run_settings, scenario)
    except ScenarioError as e:
        raise HTTPException(status_code=400, detail=e.reason)
    except SolverError as e:
        raise HTTPException(status_code=422, detail=e.reason)
    if body.out:
        report.write(body.out)
    return {"ok": True, "summary": _json_safe(report.summary.model_dump()), "rows": len(report.rows)}


@app.post("/compare")
def compare_reports(body: CompareIn):
    try:
        result = compare(load_report(body.a), load_report(body.b))
    except ReportError as e:
        raise HTTPException(status_code=400, detail=e.reason)
    return {"ok": True, "rows_a": result.rows_a, "rows_b": result.rows_b,
            "max_deviation": _finite(result.max_deviation),
            "deviations": _json_safe(result.deviations)}
