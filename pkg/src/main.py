from fastapi import FastAPI, HTTPException, Query
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse, Response
from contextlib import asynccontextmanager
from typing import Dict, List
from pathlib import Path
import asyncio
import logging
import os
from dotenv import load_dotenv
from starlette.concurrency import run_in_threadpool

from src.models.records import GazeEvent
from src.services.analytics_service import build_network, export_network
from src.services.pipeline_service import ARTIFACTS, run_session
from src.utils.config import WORKERS_ENV, RunConfig, env_overrides
from src.utils.errors import ConfigError, DataError, GazeTraceError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

# session_id -> output directory of the sessions run by this process
sessions: Dict[str, Path] = {}


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup
    print("Starting up gazetrace API...")
    print(f"[Main] {WORKERS_ENV}: {os.getenv(WORKERS_ENV) or 'not set'}")
    yield
    # Shutdown
    print("Shutting down...")

app = FastAPI(
    title="gazetrace API",
    description="3D gaze events, timelines and attention networks from perception records",
    version="1.0.0",
    lifespan=lifespan
)

app.add_middleware(
    CORSMiddleware,
    allow_origins=["*"],
    allow_credentials=True,
    allow_methods=["*"],
    allow_headers=["*"],
)


def _error_response(e: Exception) -> JSONResponse:
    if isinstance(e, ConfigError):
        status = 400
    elif isinstance(e, DataError):
        status = 422
    else:
        status = 500
    return JSONResponse(status_code=status, content={"status": "error", "error": str(e)})


@app.get("/")
async def root():
    return {
        "name": "gazetrace API",
        "version": "1.0.0",
        "status": "operational"
    }


@app.get("/api/health")
async def health_check():
    try:
        workers = env_overrides().get("workers", 1)
    except ConfigError:
        workers = None
    return {
        "status": "healthy",
        "environment": os.getenv("APP_ENV", "development"),
        "workers": workers,
        "sessions": len(sessions),
    }


@app.post("/api/sessions/run")
async def run_session_endpoint(config: RunConfig):
    """Run a full session; the encoding stage uses config.workers threads"""
    try:
        # own event loop in a worker thread so the server keeps answering
        result = await run_in_threadpool(lambda: asyncio.run(run_session(config)))
    except GazeTraceError as e:
        print(f"[Main] ❌ Session failed: {e}")
        return _error_response(e)
    except Exception as e:
        logger.exception("[Main] unexpected session failure")
        return _error_response(e)
    sessions[result["session_id"]] = Path(result["output_dir"])
    return {
        "status": "success",
        "session_id": result["session_id"],
        "output_dir": result["output_dir"],
        "events": result["events"],
        "artifacts": sorted(result["artifacts"]),
    }


@app.get("/api/sessions/{session_id}/artifacts/{name}")
async def get_artifact(session_id: str, name: str):
    """Serve one artifact file of a finished session"""
    output_dir = sessions.get(session_id)
    if output_dir is None:
        raise HTTPException(status_code=404, detail="Session not found")
    if name not in ARTIFACTS:
        raise HTTPException(status_code=404, detail="Artifact not found")
    file_path = output_dir / name
    if not file_path.is_file():
        raise HTTPException(status_code=404, detail="Artifact not found")
    media_type = "application/json" if name.endswith(".json") else "text/plain"
    return FileResponse(file_path, media_type=media_type, filename=name)


@app.post("/api/network/export")
async def export_network_endpoint(
    events: List[GazeEvent], format: str = Query("dot", pattern="^(dot|json)$")
):
    """Attention network of the posted events, as DOT or JSON"""
    if any(e.duration_s is None for e in events):
        return _error_response(DataError("every event needs duration_s"))
    document = export_network(build_network(events), format)
    media_type = "application/json" if format == "json" else "text/vnd.graphviz"
    return Response(content=document, media_type=media_type)
