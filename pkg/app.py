"""
FastAPI application for the FoMEMO optimization service

Serves in-context posterior queries and candidate proposals from a frozen,
pre-trained aggregation model. The checkpoint is read from FOMEMO_CHECKPOINT
at startup.
"""
import logging
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import RedirectResponse

from core.schemas.api import HealthResponse, PosteriorRequest, PosteriorResponse, ProposeRequest, ProposeResponse
from core.services.pfn_model import load_checkpoint
from core.services.services import OptimizationService, TOOL_VERSION
from helpers.config import configure_logging, load_settings
from helpers.errors import FomemoError

settings = load_settings()
configure_logging(settings.log_level)
logger = logging.getLogger(__name__)

app = FastAPI(
    title="FoMEMO API",
    description="""
    Multi-objective Bayesian optimization with a pre-trained in-context model.

    Features:
    - Posterior mean / std / UCB of the preference-conditioned Tchebycheff aggregation
    - Candidate proposals with EI, UCB or the hypervolume-improvement acquisition

    Trajectories are sent with raw objective values; the service normalizes them
    the same way the optimization loop does.
    """,
    version=TOOL_VERSION,
    docs_url="/docs",
    redoc_url="/redoc",
    openapi_url="/openapi.json",
    swagger_ui_parameters={"defaultModelsExpandDepth": -1}
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)

app.state.service = OptimizationService()
app.state.checkpoint = None


@app.on_event("startup")
async def startup_event():
    """Load the checkpoint named by FOMEMO_CHECKPOINT"""
    logger.info("Starting up FoMEMO API...")
    if not settings.checkpoint:
        logger.warning("FOMEMO_CHECKPOINT is not set; posterior and propose will answer 503")
        return
    try:
        loaded = load_checkpoint(settings.checkpoint, device=settings.device)
        app.state.service = OptimizationService(loaded.model)
        app.state.checkpoint = settings.checkpoint
        logger.info(f"Loaded checkpoint {settings.checkpoint}")
    except FomemoError as e:
        logger.error(f"Could not load checkpoint {settings.checkpoint}: {e}")
        logger.warning("Continuing startup without a model")


@app.get("/", include_in_schema=False)
async def root():
    """
    Root endpoint that redirects to the API documentation
    """
    return RedirectResponse(url="/docs")


@app.get("/health", response_model=HealthResponse, tags=["Service"], summary="Service status")
async def health() -> HealthResponse:
    service: OptimizationService = app.state.service
    return HealthResponse(
        status="ok" if service.ready else "degraded",
        checkpoint_loaded=service.ready,
        checkpoint=app.state.checkpoint,
    )


def _service() -> OptimizationService:
    service: OptimizationService = app.state.service
    if not service.ready:
        raise HTTPException(status_code=503, detail="No checkpoint is loaded. Set FOMEMO_CHECKPOINT and restart.")
    return service


@app.post(
    "/posterior/v1",
    response_model=PosteriorResponse,
    summary="Aggregation posterior at query points",
    description="""
    Predict the distribution of the Tchebycheff aggregation under one preference
    for every query point, conditioned on the trajectory. Returns the mean,
    standard deviation and mean + beta * std per query.
    """,
    tags=["Optimization"],
    status_code=200,
    response_description="Per-query posterior summaries",
)
def posterior(request: PosteriorRequest) -> PosteriorResponse:
    logger.info(f"Received posterior request with {len(request.query_x)} queries")
    service = _service()
    try:
        return service.posterior(request)
    except FomemoError as e:
        logger.warning(f"Rejected posterior request: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error processing posterior request: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Error processing posterior request: {str(e)}")


@app.post(
    "/propose/v1",
    response_model=ProposeResponse,
    summary="Propose the next candidates",
    description="""
    Run one proposal round for the trajectory: q candidates maximizing the chosen
    acquisition over the unit cube. Identical requests (same seed) return
    identical candidates.
    """,
    tags=["Optimization"],
    status_code=200,
    response_description="Proposed candidates with their acquisition values",
)
def propose(request: ProposeRequest) -> ProposeResponse:
    logger.info(f"Received propose request ({request.acquisition.kind}, q={request.acquisition.q})")
    service = _service()
    try:
        result = service.propose(request)
        logger.info(f"Proposed {len(result.candidates)} candidates in {result.wall_ms} ms")
        return result
    except FomemoError as e:
        logger.warning(f"Rejected propose request: {e}")
        raise HTTPException(status_code=422, detail=str(e))
    except Exception as e:
        logger.error(f"Error processing propose request: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Error processing propose request: {str(e)}")


if __name__ == "__main__":
    """
    Run the application with Uvicorn
    """
    import uvicorn

    uvicorn.run(
        "app:app",
        host="0.0.0.0",
        port=8000,
        reload=True
    )
