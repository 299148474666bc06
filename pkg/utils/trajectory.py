"""
Per-iteration CSV log. Rows are appended and flushed as they arrive so an
aborted fit keeps everything written so far.
"""
from pathlib import Path

import pandas as pd

from utils.file_utils import backup_file


class TrajectoryWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = None
        if self.path.exists():
            if append:
                self.columns = list(pd.read_csv(self.path, nrows=0).columns)
            else:
                backup_file(self.path)
                self.path.unlink()

    def write(self, row: dict):
        if self.columns is None:
            self.columns = list(row)
            header = True
        else:
            header = False
        frame = pd.DataFrame([row], columns=self.columns)
        frame.to_csv(self.path, mode="a", header=header, index=False, float_format="%.17g")

    __call__ = write


def read_trajectory(path) -> pd.DataFrame:
    return pd.read_csv(path, float_precision="round_trip")


def truncate_trajectory(path, last_iteration: int):
    """Drop rows past ``last_iteration`` (used when resuming from an older checkpoint)."""
    path = Path(path)
    if not path.exists():
        return
    frame = pd.read_csv(path, float_precision="round_trip")
    frame = frame[frame["iteration"] <= last_iteration]
    frame.to_csv(path, index=False, float_format="%.17g")
