import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from retrieval.config import TrainConfig
from retrieval.errors import ConfigError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)


class Config:
    """Configuration of the ranking service"""

    # Index Configuration
    CHECKPOINT = os.getenv("SEA_CHECKPOINT")
    FEATURES = os.getenv("SEA_FEATURES")
    TOPN = int(os.getenv("SEA_TOPN", "1000"))
    THREADS = int(os.getenv("SEA_THREADS", "1"))

    # API Configuration
    API_HOST = os.getenv("SEA_API_HOST", "0.0.0.0")
    API_PORT = int(os.getenv("SEA_API_PORT", "8000"))
    LOG_LEVEL = os.getenv("SEA_LOG_LEVEL", "INFO")
    ALLOWED_ORIGINS = os.getenv("SEA_ALLOWED_ORIGINS", "http://localhost:3000")

    @classmethod
    def allowed_origins(cls) -> List[str]:
        return [o.strip() for o in cls.ALLOWED_ORIGINS.split(",") if o.strip()]

    @classmethod
    def checkpoint_paths(cls) -> List[str]:
        """Several comma-separated checkpoints are late-fused by averaging"""
        return [p.strip() for p in (cls.CHECKPOINT or "").split(",") if p.strip()]

    @classmethod
    def validate_config(cls):
        """Validate that all required environment variables are set"""
        required_vars = ["CHECKPOINT", "FEATURES"]

        missing_vars = [f"SEA_{var}" for var in required_vars if not getattr(cls, var)]

        if missing_vars:
            raise ConfigError(f"Missing required environment variables: {', '.join(missing_vars)}")

        logger.info("Configuration validated successfully")
        return True


def build_train_config(file_values: Optional[Dict[str, Any]] = None,
                       overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    """defaults < config file < explicit flags; unknown keys are rejected"""
    values: Dict[str, Any] = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            values[key.lower()] = value
    try:
        return TrainConfig(**values)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(x) for x in err['loc']) or 'config'}: {err['msg']}"
                             for err in e.errors())
        raise ConfigError(f"Invalid training configuration: {problems}")


def load_train_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> TrainConfig:
    file_values: Dict[str, Any] = {}
    if path:
        if not Path(path).exists():
            raise ConfigError(f"Config file not found: {path}")
        file_values = dict(dotenv_values(path))
    return build_train_config(file_values, overrides)

