"""
Per-round training metrics and their CSV form
"""
import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import pydantic
from pydantic import ConfigDict, Field

from .exceptions import DatasetFormatError
from .tensor import ParamVector

logger = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "round",
    "epoch",
    "lr",
    "train_loss",
    "test_accuracy",
    "uplink_bits_total",
    "uplink_bits_per_param_per_iter",
    "downlink_support_size",
    "wall_ms",
)


class MetricsRecord(pydantic.BaseModel):
    """One communication round"""

    model_config = ConfigDict(extra="forbid", frozen=True)

    round: int = Field(ge=0)
    epoch: float = Field(ge=0, description="Fractional epoch progress at the end of the round")
    lr: float
    train_loss: float
    test_accuracy: float = Field(ge=0, le=1)
    uplink_bits_total: int = Field(ge=0, description="Bits sent by all clients this round")
    uplink_bits_per_param_per_iter: float = Field(ge=0)
    downlink_support_size: int = Field(ge=0)
    wall_ms: float = Field(default=0.0, ge=0)

    def csv_row(self) -> List[str]:
        # repr gives the shortest text that parses back to the same float
        return [repr(v) if isinstance(v, float) else str(v) for v in (getattr(self, c) for c in METRICS_COLUMNS)]


@dataclass
class MetricsLog:
    """Records of a run in round order, plus the final global parameters"""
    records: List[MetricsRecord] = field(default_factory=list)
    final_params: Optional[ParamVector] = None

    def append(self, record: MetricsRecord) -> None:
        if self.records and record.round != self.records[-1].round + 1:
            raise ValueError(f"round {record.round} does not follow {self.records[-1].round}")
        self.records.append(record)

    @property
    def last(self) -> MetricsRecord:
        return self.records[-1]

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def write_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(METRICS_COLUMNS)
            for record in self.records:
                writer.writerow(record.csv_row())

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "MetricsLog":
        """
        Parse a metrics CSV.

        Raises:
            DatasetFormatError: If the header or a row does not match the metrics schema
        """
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or tuple(header) != METRICS_COLUMNS:
                raise DatasetFormatError(f"{path}: not a metrics CSV")
            log = cls()
            for lineno, row in enumerate(reader, start=2):
                if len(row) != len(METRICS_COLUMNS):
                    raise DatasetFormatError(f"{path}:{lineno}: expected {len(METRICS_COLUMNS)} fields")
                try:
                    log.append(MetricsRecord(**dict(zip(METRICS_COLUMNS, row))))
                except (pydantic.ValidationError, ValueError) as e:
                    raise DatasetFormatError(f"{path}:{lineno}: {e}") from e
        return log
