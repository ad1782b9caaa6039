"""
Dataset ingestion (JSONL) and the task registry with square-root size weighting.
"""
import json
import os
import typing
from dataclasses import dataclass

import bittensor as bt
import numpy as np
from pydantic import BaseModel, ValidationError

from shared.errors import DatasetError
from shared.grad2task_protocol import ROLES, SPLITS, Example, LabeledDataset
from tasks.vocabulary import Vocabulary


class _JsonlLine(BaseModel):
    text: str
    label: str
    split: str = "train"


def load_jsonl(path: str, vocab: Vocabulary, max_seq_len: int = 32,
               name: typing.Optional[str] = None) -> LabeledDataset:
    """
    Reads one task. Labels get dense ids in first-occurrence order; an optional
    ``split`` field routes a line to the train / val / test pool (default train).
    """
    task_name = name or os.path.splitext(os.path.basename(path))[0]
    class_ids: typing.Dict[str, int] = {}
    pools: typing.Dict[str, typing.List[Example]] = {s: [] for s in SPLITS}
    truncated = 0

    with open(path, "r") as f:
        for lineno, raw in enumerate(f, 1):
            if not raw.strip():
                continue
            try:
                line = _JsonlLine.model_validate(json.loads(raw))
            except (json.JSONDecodeError, ValidationError) as e:
                raise DatasetError(f"{path}:{lineno}: malformed line ({e.__class__.__name__}: {e})") from e
            if line.split not in SPLITS:
                raise DatasetError(f"{path}:{lineno}: unknown split '{line.split}'")
            label = class_ids.setdefault(line.label, len(class_ids))
            tokens = vocab.encode(line.text, max_seq_len)
            if len(line.text.split()) + 1 > max_seq_len:
                truncated += 1
            pools[line.split].append(Example(text=line.text, tokens=tokens, label=label))

    if not class_ids:
        raise DatasetError(f"{path}: empty dataset file")
    if truncated:
        bt.logging.warning(f"{task_name} | {truncated} sequences truncated to max_seq_len {max_seq_len}")

    dataset = LabeledDataset(name=task_name, class_names=list(class_ids), **pools)
    bt.logging.debug(f"{task_name} | loaded {len(dataset.train)} train / {len(dataset.val)} val / "
                     f"{len(dataset.test)} test examples, {dataset.num_classes} classes")
    return dataset.validate()


def write_jsonl(dataset: LabeledDataset, path: str):
    with open(path, "w") as f:
        for split in SPLITS:
            for ex in dataset.pool(split):
                line = {"text": ex.text, "label": dataset.class_names[ex.label], "split": split}
                f.write(json.dumps(line) + "\n")


class ManifestEntry(BaseModel):
    name: str
    path: str
    role: str


class RegistryManifest(BaseModel):
    vocab: str
    datasets: typing.List[ManifestEntry]


@dataclass
class RegisteredTask:
    dataset: LabeledDataset
    role: str
    path: typing.Optional[str] = None


class TaskRegistry:
    """
    Named datasets tagged meta-train / meta-test. Sampling weight of task i is
    sqrt(|D_i|) / sum_j sqrt(|D_j|), with |D| the train pool size.
    """

    def __init__(self, vocab: typing.Optional[Vocabulary] = None):
        self.vocab = vocab
        self._tasks: typing.Dict[str, RegisteredTask] = {}

    def add(self, dataset: LabeledDataset, role: str = "meta-train", path: typing.Optional[str] = None):
        if role not in ROLES:
            raise DatasetError(f"unknown role '{role}' for {dataset.name}; expected one of {ROLES}")
        if dataset.name in self._tasks:
            raise DatasetError(f"task '{dataset.name}' registered twice")
        self._tasks[dataset.name] = RegisteredTask(dataset=dataset, role=role, path=path)
        return self

    def __len__(self):
        return len(self._tasks)

    def __contains__(self, name: str):
        return name in self._tasks

    def names(self, role: typing.Optional[str] = None) -> typing.List[str]:
        return [n for n, t in self._tasks.items() if role is None or t.role == role]

    def get(self, name: str) -> LabeledDataset:
        try:
            return self._tasks[name].dataset
        except KeyError:
            raise DatasetError(f"unknown task '{name}'") from None

    def role(self, name: str) -> str:
        return self._tasks[name].role

    def subset(self, role: str) -> "TaskRegistry":
        sub = TaskRegistry(self.vocab)
        for name in self.names(role):
            task = self._tasks[name]
            sub.add(task.dataset, task.role, task.path)
        return sub

    def sizes(self) -> typing.Dict[str, int]:
        return {n: len(t.dataset.train) for n, t in self._tasks.items()}

    def weights(self) -> np.ndarray:
        sizes = np.array([len(t.dataset.train) for t in self._tasks.values()], dtype=np.float64)
        roots = np.sqrt(sizes)
        return roots / roots.sum()

    def total_train_examples(self) -> int:
        return sum(self.sizes().values())

    @classmethod
    def load_manifest(cls, path: str, max_seq_len: int = 32) -> "TaskRegistry":
        base = os.path.dirname(os.path.abspath(path))
        try:
            with open(path, "r") as f:
                manifest = RegistryManifest.model_validate(json.load(f))
        except (json.JSONDecodeError, ValidationError) as e:
            raise DatasetError(f"{path}: malformed registry manifest ({e})") from e
        vocab = Vocabulary.load(os.path.join(base, manifest.vocab))
        registry = cls(vocab)
        for entry in manifest.datasets:
            dataset_path = os.path.join(base, entry.path)
            registry.add(load_jsonl(dataset_path, vocab, max_seq_len, name=entry.name), entry.role, dataset_path)
        bt.logging.info(f"registry | loaded {len(registry)} tasks from {path}")
        return registry

    def save(self, directory: str, manifest_name: str = "registry.json") -> str:
        if self.vocab is None:
            raise DatasetError("registry has no vocabulary to save")
        os.makedirs(directory, exist_ok=True)
        self.vocab.save(os.path.join(directory, "vocab.txt"))
        entries = []
        for name, task in self._tasks.items():
            filename = f"{name}.jsonl"
            write_jsonl(task.dataset, os.path.join(directory, filename))
            entries.append(ManifestEntry(name=name, path=filename, role=task.role))
        manifest = RegistryManifest(vocab="vocab.txt", datasets=entries)
        manifest_path = os.path.join(directory, manifest_name)
        with open(manifest_path, "w") as f:
            json.dump(manifest.model_dump(), f, indent=2)
        return manifest_path
