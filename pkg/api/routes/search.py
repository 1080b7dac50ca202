from fastapi import APIRouter, HTTPException
from typing import List
from pydantic import BaseModel, Field
import logging
import sys
import os

# Add the parent directory to the path
sys.path.append(os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))))

from scripts.config import Config
from scripts.index_manager import IndexManager
from retrieval.errors import DataError, NumericalError, RetrievalError, UsageError

router = APIRouter()
logger = logging.getLogger(__name__)

_index = None


# Lazy initialization of the ranking index
def get_index():
    global _index
    if _index is None:
        try:
            _index = IndexManager()
        except Exception as e:
            logger.error(f"Error initializing ranking index: {str(e)}")
            return None
    return _index


def set_index(index):
    """Install a prepared index (used by tests and by `serve` with explicit paths)"""
    global _index
    _index = index


# Pydantic models
class SearchRequest(BaseModel):
    query: str
    top_n: int = Field(default=Config.TOPN, ge=1, le=1000)


class SearchResult(BaseModel):
    video_id: str
    score: float
    rank: int


class SearchResponse(BaseModel):
    query: str
    total: int
    results: List[SearchResult]


@router.post("/", response_model=SearchResponse)
async def search_videos(search_request: SearchRequest):
    """Rank the collection for a free-text query"""
    if not search_request.query.strip():
        raise HTTPException(status_code=422, detail="Query must not be empty")

    index = get_index()
    if not index:
        raise HTTPException(status_code=503, detail="Ranking index not available")

    try:
        ranked = index.search(search_request.query, search_request.top_n)
    except UsageError as e:
        raise HTTPException(status_code=422, detail=str(e))
    except (DataError, NumericalError) as e:
        logger.error(f"Search error: {str(e)}")
        raise HTTPException(status_code=500, detail=f"Search failed: {str(e)}")
    except RetrievalError as e:
        raise HTTPException(status_code=500, detail=f"Search failed: {str(e)}")

    results = [SearchResult(video_id=vid, score=score, rank=rank)
               for rank, (vid, score) in enumerate(zip(ranked.video_ids, ranked.scores), start=1)]
    return SearchResponse(query=search_request.query, total=index.size, results=results)


@router.get("/health")
async def search_health():
    index = get_index()
    if not index:
        raise HTTPException(status_code=503, detail="Ranking index not available")
    return {"status": "ready", "videos": index.size, "models": len(index.models)}
