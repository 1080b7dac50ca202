"""Validated trainer settings"""

from typing import Any, List

from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .encoders import ENCODER_TAGS, GRU_HIDDEN, W2V_DIM
from .errors import ConfigError
from .spaces import COMMON_DIM, TRANSFORM_DIM, normalize_fusion


class TrainConfig(BaseModel):
    """Trainer settings; defaults follow the published training recipe"""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    alpha: float = 0.2
    batch_size: int = 128
    lr0: float = 1e-4
    lr_decay: float = 0.99
    plateau_patience: int = 3
    early_stop_patience: int = 10
    restarts: int = 3
    max_epochs: int = 200
    dc: int = COMMON_DIM
    seed: int = 0
    val_metric: str = "map"
    fusion: str = "sea"
    loss: str = "combined"
    encoders: List[str] = ["bow", "w2v", "gru", "bert"]
    min_count: int = 5
    word_dim: int = W2V_DIM
    gru_hidden: int = GRU_HIDDEN
    transform_dim: int = TRANSFORM_DIM
    threads: int = 1

    @field_validator("alpha", "lr0", "lr_decay")
    @classmethod
    def positive_float(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @field_validator("plateau_patience", "early_stop_patience", "restarts", "max_epochs", "dc",
                     "min_count", "word_dim", "gru_hidden", "transform_dim", "threads")
    @classmethod
    def positive_int(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("batch_size")
    @classmethod
    def batch_of_two(cls, v: int) -> int:
        if v < 2:
            raise ValueError("must be >= 2 so that every sentence has a negative")
        return v

    @field_validator("val_metric")
    @classmethod
    def known_metric(cls, v: str) -> str:
        v = v.lower()
        if v not in ("map", "recall_sum"):
            raise ValueError("must be map or recall_sum")
        return v

    @field_validator("loss")
    @classmethod
    def known_loss(cls, v: str) -> str:
        if v not in ("combined", "single"):
            raise ValueError("must be combined or single")
        return v

    @field_validator("fusion")
    @classmethod
    def known_fusion(cls, v: str) -> str:
        try:
            return normalize_fusion(v)
        except ConfigError as e:
            raise ValueError(str(e))

    @field_validator("encoders", mode="before")
    @classmethod
    def split_encoders(cls, v: Any) -> List[str]:
        if isinstance(v, str):
            v = [t.strip() for t in v.split(",") if t.strip()]
        return list(v)

    @model_validator(mode="after")
    def check_encoders(self) -> "TrainConfig":
        if not self.encoders:
            raise ValueError("at least one encoder is required")
        unknown = [t for t in self.encoders if t not in ENCODER_TAGS]
        if unknown:
            raise ValueError(f"unknown encoders {unknown}; expected a subset of {list(ENCODER_TAGS)}")
        if len(set(self.encoders)) != len(self.encoders):
            raise ValueError("encoders must not repeat")
        if "gru" in self.encoders and "bigru" in self.encoders:
            raise ValueError("use at most one of gru and bigru")
        return self

    def describe(self) -> str:
        return " ".join(f"{k}={','.join(v) if isinstance(v, list) else v}"
                        for k, v in self.model_dump().items())
