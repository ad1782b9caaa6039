import csv
import os
import typing
from dataclasses import dataclass

METRIC_COLUMNS = ("step", "epoch", "split", "task", "loss", "accuracy")


@dataclass
class MetricRow:
    step: int
    epoch: int
    split: str
    task: str
    loss: float
    accuracy: float

    def cells(self) -> typing.List[str]:
        return [str(self.step), str(self.epoch), self.split, self.task, f"{self.loss:.12g}", f"{self.accuracy:.12g}"]


class MetricsLogger:
    """
    Training metrics as CSV (step, epoch, split, task, loss, accuracy). Rows are kept in
    memory as well; with ``path=None`` nothing is written.
    """

    def __init__(self, path: typing.Optional[str] = None, append: bool = False):
        self.path = path
        self.rows: typing.List[MetricRow] = []
        if path is None:
            return
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        if not (append and os.path.exists(path)):
            with open(path, "w", newline="") as f:
                csv.writer(f).writerow(METRIC_COLUMNS)

    def log(self, step: int, epoch: int, split: str, task: str, loss: float, accuracy: float) -> MetricRow:
        row = MetricRow(step, epoch, split, task, float(loss), float(accuracy))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as f:
                csv.writer(f).writerow(row.cells())
        return row


def read_metrics(path: str) -> typing.List[MetricRow]:
    with open(path, "r", newline="") as f:
        return [MetricRow(int(r["step"]), int(r["epoch"]), r["split"], r["task"], float(r["loss"]),
                          float(r["accuracy"])) for r in csv.DictReader(f)]
