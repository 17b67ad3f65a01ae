__all__ = ["CSVAble"]

from abc import ABC, abstractmethod
from typing import ClassVar, Dict, Tuple


class CSVAble(ABC):
    csv_header: ClassVar[Tuple[str, ...]]
    """Column names, in output order."""

    @abstractmethod
    def to_csv_row(self) -> Dict[str, str]:
        """Convert data model to a :py:class:`csv.DictWriter` row."""

    @staticmethod
    @abstractmethod
    def parse_from_csv_row(row: Dict[str, str]):
        """Parse :py:class:`csv.DictReader` row to data model."""
