"""HTTP service wrapping the experiment harness and the LP oracle.

Experiments execute synchronously inside the request (they are batch jobs;
long runs block until done) and write their artifacts under the requested
output directory on the server's filesystem.  The CLI talks to this app
in-process by default.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .. import __version__
from ..cmdp import build_cmdp
from ..env import DeviceModel
from ..harness import EXPERIMENTS, HarnessConfig, load_config, run_experiment
from ..lp_oracle import solve_cmdp_lp, write_lp_text

app = FastAPI(
    title="dcc",
    description="Decentralized constraint coordination for multi-agent offloading",
    version=__version__,
)


class HealthResponse(BaseModel):
    status: str
    version: str
    experiments: list[str]


class ExperimentRequest(BaseModel):
    experiment: str
    config: dict = Field(default_factory=dict)
    seed: int = 0
    runs: int | None = None
    out_dir: str = "runs"


class ExperimentResponse(BaseModel):
    experiment: str
    seed: int
    out_dir: str
    summary: dict


class LpSolveRequest(BaseModel):
    device: dict
    theta_i: float
    theta_minus_freq: float = 0.0
    dump_path: str | None = None


class LpSolveResponse(BaseModel):
    objective: float
    lambda_star: float
    discounted_cost: float
    mass: float
    n_states: int
    theta_i: float


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(
        status="ok", version=__version__, experiments=sorted(EXPERIMENTS)
    )


@app.get("/v1/config/default")
def default_config() -> dict:
    return HarnessConfig().to_dict()


@app.post("/v1/experiments", response_model=ExperimentResponse)
def experiments(req: ExperimentRequest) -> ExperimentResponse:
    if req.experiment not in EXPERIMENTS:
        raise HTTPException(
            status_code=400,
            detail=f"unknown experiment {req.experiment!r}; known: {sorted(EXPERIMENTS)}",
        )
    try:
        cfg = load_config(None, req.config)
        summary = run_experiment(req.experiment, cfg, req.seed, req.out_dir, req.runs)
    except (ValueError, RuntimeError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return ExperimentResponse(
        experiment=req.experiment, seed=req.seed, out_dir=req.out_dir, summary=summary
    )


@app.post("/v1/lp/solve", response_model=LpSolveResponse)
def lp_solve(req: LpSolveRequest) -> LpSolveResponse:
    try:
        model = DeviceModel.from_dict(req.device)
        cmdp = build_cmdp(model, req.theta_i, req.theta_minus_freq)
        occ = solve_cmdp_lp(cmdp)
        if req.dump_path:
            write_lp_text(cmdp, req.theta_i, req.dump_path)
    except (ValueError, KeyError, RuntimeError) as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    return LpSolveResponse(
        objective=occ.objective,
        lambda_star=occ.lambda_star,
        discounted_cost=occ.cost_value,
        mass=occ.mass,
        n_states=cmdp.n_states,
        theta_i=occ.theta_i,
    )
