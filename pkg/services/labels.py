"""
Labels Module - class labels and corpus splits shared by data, models and metrics
"""

from enum import Enum

from errors import DataError


class Label(str, Enum):
    BONAFIDE = "bonafide"
    SPOOF = "spoof"

    @property
    def index(self) -> int:
        """Class index of this label in the classifier logits."""
        return 0 if self is Label.BONAFIDE else 1

    @classmethod
    def parse(cls, value: str) -> "Label":
        try:
            return cls(value)
        except ValueError:
            raise DataError(f"unknown label '{value}'") from None


class Split(str, Enum):
    PRETRAIN = "pretrain"
    TRAIN = "train"
    DEV = "dev"
    EVAL = "eval"

    @classmethod
    def parse(cls, value: str) -> "Split":
        try:
            return cls(value)
        except ValueError:
            raise DataError(f"unknown split '{value}'") from None
