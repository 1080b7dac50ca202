from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from contextlib import asynccontextmanager
import logging
import uvicorn
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

from scripts.config import Config

# Import routers
from api.routes import search

logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    # Startup
    logger.info("Video search service starting up...")
    yield
    # Shutdown
    logger.info("Video search service shutting down...")

app = FastAPI(
    title="Video Search",
    description="Ad-hoc text-to-video ranking over encoder-specific common spaces",
    version="1.0.0",
    lifespan=lifespan
)

# Configure CORS
app.add_middleware(
    CORSMiddleware,
    allow_origins=Config.allowed_origins(),
    allow_credentials=True,
    allow_methods=["GET", "POST", "OPTIONS"],
    allow_headers=["Content-Type"],
)

app.include_router(search.router, prefix="/search", tags=["Search"])


@app.get("/")
async def root():
    return {
        "message": "Video search service",
        "version": "1.0.0",
        "docs": "/docs"
    }


@app.get("/health")
async def health_check():
    return {"status": "healthy", "service": "video-search"}


@app.get("/debug")
async def debug_request():
    """Index and configuration status for troubleshooting"""
    from datetime import datetime

    index = search.get_index()
    return {
        "status": "debug_info",
        "index_status": "loaded" if index else "unavailable",
        "checkpoints": index.checkpoints if index else Config.checkpoint_paths(),
        "features": Config.FEATURES,
        "videos": index.size if index else 0,
        "server_time": datetime.now().isoformat(),
    }


def serve(host: str = None, port: int = None):
    logging.basicConfig(level=Config.LOG_LEVEL.upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    uvicorn.run(app, host=host or Config.API_HOST, port=port or Config.API_PORT)


if __name__ == "__main__":
    serve()
