# labelprop/schemas.py
from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

SEQ_PATTERN = r"^[A-Za-z0-9_.@-]+$"


class Tier(str, Enum):
    GT = "gt"
    PGT = "pgt"


class Record(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# MANIFEST ROWS
class ManifestEntry(Record):
    image: str
    labels: str
    tier: Tier
    seq: str = Field(pattern=SEQ_PATTERN)
    offset: int = Field(ge=0)
    rating: Optional[int] = Field(None, ge=1, le=10)
    trust: Optional[float] = Field(None, ge=0, le=1)

    @model_validator(mode="after")
    def gt_rules(self):
        if self.tier == Tier.GT:
            if self.offset != 0:
                raise ValueError(f"GT entry {self.seq} must have offset 0, got {self.offset}")
            if self.rating is not None and self.rating != 10:
                raise ValueError(f"GT entry {self.seq} must be rated 10, got {self.rating}")
        elif self.offset == 0:
            raise ValueError(f"PGT entry {self.seq} must have offset >= 1")
        return self

    @property
    def key(self):
        return (self.seq, self.offset, self.tier)

    @property
    def item_id(self) -> str:
        return f"{self.seq}/{self.offset}"


# PGT INDEX
class PgtItem(Record):
    seq: str = Field(pattern=SEQ_PATTERN)
    offset: int = Field(ge=1)
    image: str
    labels: str
    rating: Optional[int] = Field(None, ge=1, le=9)

    @property
    def item_id(self) -> str:
        return f"{self.seq}/{self.offset}"

    def to_entry(self) -> ManifestEntry:
        return ManifestEntry(
            image=self.image,
            labels=self.labels,
            tier=Tier.PGT,
            seq=self.seq,
            offset=self.offset,
            rating=self.rating,
        )


class RatingRow(Record):
    id: str = Field(pattern=r"^[A-Za-z0-9_.@-]+/\d+$")
    rating: int = Field(ge=1, le=10)


# RUN LOGS
class PropagationLogRow(Record):
    seq: str
    offset: int
    iters: int
    free_energy: float
    changed_pixels: int


class TrainLogRow(Record):
    epoch: int
    step: int
    train_loss: float
    val_miou: Optional[float] = None
    tf: float
