# grad2task_protocol.py
import csv
import typing
from dataclasses import dataclass, field

import numpy as np

from shared.errors import DatasetError

SPLITS = ("train", "val", "test")
ROLES = ("meta-train", "meta-test")


class Example(typing.NamedTuple):
    """
    One labeled sequence. ``tokens`` already starts with the [CLS] id.
    """
    text: str
    tokens: typing.Tuple[int, ...]
    label: int


@dataclass
class LabeledDataset:
    """
    The labeled data of one task, split into train / val / test pools.
    Class ids are dense: 0 .. len(class_names) - 1.
    """
    name: str
    class_names: typing.List[str]
    train: typing.List[Example] = field(default_factory=list)
    val: typing.List[Example] = field(default_factory=list)
    test: typing.List[Example] = field(default_factory=list)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def pool(self, split: str) -> typing.List[Example]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split '{split}'")
        return getattr(self, split)

    def __len__(self):
        return len(self.train)

    def class_counts(self, split: str = "train") -> typing.List[int]:
        counts = [0] * self.num_classes
        for ex in self.pool(split):
            counts[ex.label] += 1
        return counts

    def validate(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError(f"{self.name}: class names are not unique")
        for split in SPLITS:
            for ex in self.pool(split):
                if not 0 <= ex.label < self.num_classes:
                    raise DatasetError(f"{self.name}: label {ex.label} out of range in {split} pool")
        overlap = {ex.tokens for ex in self.train} & {ex.tokens for ex in self.test}
        if overlap:
            raise DatasetError(f"{self.name}: {len(overlap)} sequences appear in both train and test pools")
        return self


@dataclass
class Episode:
    """
    A few-shot task instance. Labels are episode-local (0 .. num_classes - 1).
    """
    task_name: str
    support: typing.List[Example]
    query: typing.List[Example]
    shots: int
    num_classes: int
    class_names: typing.List[str] = field(default_factory=list)

    def support_of(self, label: int) -> typing.List[Example]:
        return [ex for ex in self.support if ex.label == label]


def canonical_order(examples: typing.Sequence[Example]) -> typing.List[Example]:
    """Label-then-tokens order; any permutation of the input yields the same list."""
    return sorted(examples, key=lambda ex: (ex.label, ex.tokens))


@dataclass
class EvalRow:
    variant: str
    task: str
    k: int
    mean: float
    std: float
    runs: int
    accuracies: typing.List[float] = field(default_factory=list)

    @classmethod
    def from_accuracies(cls, variant: str, task: str, k: int, accuracies: typing.Sequence[float]) -> "EvalRow":
        arr = np.asarray(accuracies, dtype=np.float64)
        return cls(variant=variant, task=task, k=k, mean=float(arr.mean()),
                   std=float(arr.std(ddof=0)), runs=len(arr), accuracies=[float(a) for a in arr])


@dataclass
class EvalReport:
    rows: typing.List[EvalRow] = field(default_factory=list)

    def extend(self, other: "EvalReport"):
        self.rows.extend(other.rows)
        return self

    def row(self, variant: str, task: str, k: int) -> EvalRow:
        for r in self.rows:
            if (r.variant, r.task, r.k) == (variant, task, k):
                return r
        raise KeyError((variant, task, k))

    def mean_accuracy(self, variant: str, k: typing.Optional[int] = None) -> float:
        rows = [r for r in self.rows if r.variant == variant and (k is None or r.k == k)]
        return float(np.mean([r.mean for r in rows]))


@dataclass
class TaskEmbeddingRecord:
    episode_id: int
    task_name: str
    layers: typing.List[typing.List[float]] = field(default_factory=list)


REPORT_COLUMNS = ("variant", "task", "k", "mean", "std", "runs")


def write_report_csv(report: EvalReport, path: str):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(REPORT_COLUMNS)
        for r in report.rows:
            writer.writerow([r.variant, r.task, r.k, f"{r.mean:.12g}", f"{r.std:.12g}", r.runs])


def read_report_csv(path: str) -> EvalReport:
    with open(path, "r", newline="") as f:
        rows = [EvalRow(variant=r["variant"], task=r["task"], k=int(r["k"]), mean=float(r["mean"]),
                        std=float(r["std"]), runs=int(r["runs"])) for r in csv.DictReader(f)]
    return EvalReport(rows=rows)
