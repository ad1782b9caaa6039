"""
Episodic samplers: task choice, support/query episodes and the support subsampling used
to extract gradient features.
"""
import math
import typing

from shared.errors import DatasetError, InsufficientExamplesError
from shared.grad2task_protocol import Episode, Example, LabeledDataset
from shared.tensor_core import Rng
from tasks.datasets import TaskRegistry


def sample_task(registry: TaskRegistry, rng: Rng) -> str:
    names = registry.names()
    if not names:
        raise DatasetError("cannot sample a task from an empty registry")
    return names[int(rng.np.choice(len(names), p=registry.weights()))]


def sample_episode(dataset: LabeledDataset, k: int, query_k: typing.Optional[int], rng: Rng,
                   split: str = "train") -> Episode:
    """
    k support and query_k query examples per class, drawn without replacement from one
    pool. Labels are episode-local; every class of the dataset takes part.
    """
    query_k = k if query_k is None else query_k
    if k < 1 or query_k < 0:
        raise DatasetError(f"invalid shots k={k}, query_k={query_k}")
    if dataset.num_classes < 2:
        raise DatasetError(f"{dataset.name}: an episode needs at least 2 classes")

    by_class: typing.List[typing.List[Example]] = [[] for _ in range(dataset.num_classes)]
    for ex in dataset.pool(split):
        by_class[ex.label].append(ex)

    support, query = [], []
    for label, pool in enumerate(by_class):
        if len(pool) < k + query_k:
            raise InsufficientExamplesError(
                f"{dataset.name}: class '{dataset.class_names[label]}' has {len(pool)} {split} examples, "
                f"needs {k + query_k}")
        picked = rng.np.choice(len(pool), size=k + query_k, replace=False)
        support.extend(pool[int(i)]._replace(label=label) for i in picked[:k])
        query.extend(pool[int(i)]._replace(label=label) for i in picked[k:])

    return Episode(task_name=dataset.name, support=support, query=query, shots=k,
                   num_classes=dataset.num_classes, class_names=list(dataset.class_names))


def default_subsample_sizes(shots: int, num_classes: int) -> typing.Tuple[int, int]:
    """m = ceil(k/2) prototypes per class, a scored subset of C*(k - m) examples."""
    m = math.ceil(shots / 2)
    return m, num_classes * (shots - m)


def subsample_support(episode: Episode, proto_per_class: typing.Optional[int], probe_size: typing.Optional[int],
                      rng: Rng) -> typing.Tuple[typing.List[Example], typing.List[Example]]:
    """Splits the support set into a prototype subset (m per class) and a disjoint scored subset."""
    default_m, default_scored = default_subsample_sizes(episode.shots, episode.num_classes)
    m = default_m if proto_per_class is None else proto_per_class
    probe_size = default_scored if probe_size is None else probe_size
    if m < 1 or probe_size < 1 or m * episode.num_classes + probe_size > len(episode.support):
        raise DatasetError(
            f"{episode.task_name}: cannot draw {m} prototypes per class for {episode.num_classes} classes "
            f"plus a scored subset of {probe_size} from {len(episode.support)} support examples")

    protos: typing.List[Example] = []
    rest: typing.List[Example] = []
    for label in range(episode.num_classes):
        members = episode.support_of(label)
        if len(members) < m:
            raise InsufficientExamplesError(
                f"{episode.task_name}: class {label} has {len(members)} support examples, needs {m}")
        picked = set(int(i) for i in rng.np.choice(len(members), size=m, replace=False))
        protos.extend(ex for i, ex in enumerate(members) if i in picked)
        rest.extend(ex for i, ex in enumerate(members) if i not in picked)

    scored_idx = rng.np.choice(len(rest), size=probe_size, replace=False)
    scored = [rest[int(i)] for i in sorted(scored_idx)]
    return protos, scored
