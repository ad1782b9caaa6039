"""
Synthetic heterogeneous text-classification tasks.

Every family instance owns a disjoint region of the vocabulary (all of its words share a
prefix) and labels are computed from the word sequence by ``label_of`` alone.

  keyword-presence   2 classes  trigger word present?
  keyword-parity     2 classes  trigger count odd?
  dominant-topic     C classes  which topic's words are most frequent (C in 3, 5, 7)
  lexicon-sentiment  2 classes  more positive than negative lexicon words?
"""
import typing
from dataclasses import dataclass, field

import bittensor as bt

from shared.config import DataConfig
from shared.errors import DatasetError
from shared.grad2task_protocol import Example, LabeledDataset
from shared.tensor_core import Rng
from tasks.datasets import TaskRegistry
from tasks.vocabulary import RESERVED_TOKENS, Vocabulary

FAMILY_KINDS = {
    "keyword-presence": "kp",
    "keyword-parity": "kc",
    "dominant-topic": "dt",
    "lexicon-sentiment": "ls",
}
TOPIC_CLASS_COUNTS = (3, 5, 7)
TOPIC_WORDS = 3
LEXICON_WORDS = 6
MAX_ATTEMPTS = 10000


@dataclass
class FamilySpec:
    kind: str
    num_classes: int
    prefix: str

    @property
    def task_name(self) -> str:
        return f"{self.kind}-{self.prefix}"

    @classmethod
    def parse(cls, text: str, index: int) -> "FamilySpec":
        kind, _, classes = text.partition(":")
        if kind not in FAMILY_KINDS:
            raise DatasetError(f"unknown task family '{kind}'; expected one of {sorted(FAMILY_KINDS)}")
        if kind == "dominant-topic":
            num_classes = int(classes) if classes else 3
            if num_classes not in TOPIC_CLASS_COUNTS:
                raise DatasetError(f"dominant-topic needs C in {TOPIC_CLASS_COUNTS}, got {num_classes}")
        else:
            if classes and int(classes) != 2:
                raise DatasetError(f"{kind} is a 2-class family, got {classes}")
            num_classes = 2
        return cls(kind=kind, num_classes=num_classes, prefix=f"{FAMILY_KINDS[kind]}{index}")

    # vocabulary region -------------------------------------------------------

    def filler(self, count: int) -> typing.List[str]:
        return [f"{self.prefix}_w{i}" for i in range(count)]

    @property
    def trigger(self) -> str:
        return f"{self.prefix}_trig"

    def topic_words(self, c: int) -> typing.List[str]:
        return [f"{self.prefix}_t{c}_{j}" for j in range(TOPIC_WORDS)]

    @property
    def positive_words(self) -> typing.List[str]:
        return [f"{self.prefix}_pos{j}" for j in range(LEXICON_WORDS)]

    @property
    def negative_words(self) -> typing.List[str]:
        return [f"{self.prefix}_neg{j}" for j in range(LEXICON_WORDS)]

    @property
    def class_names(self) -> typing.List[str]:
        if self.kind == "keyword-presence":
            suffixes = ["absent", "present"]
        elif self.kind == "keyword-parity":
            suffixes = ["even", "odd"]
        elif self.kind == "lexicon-sentiment":
            suffixes = ["negative", "positive"]
        else:
            suffixes = [f"topic{c}" for c in range(self.num_classes)]
        return [f"{self.prefix}_{s}" for s in suffixes]

    def words(self, words_per_family: int) -> typing.List[str]:
        out = self.filler(words_per_family)
        if self.kind in ("keyword-presence", "keyword-parity"):
            out.append(self.trigger)
        elif self.kind == "dominant-topic":
            for c in range(self.num_classes):
                out.extend(self.topic_words(c))
        else:
            out.extend(self.positive_words + self.negative_words)
        return out + self.class_names


@dataclass
class SuiteSpec:
    families: typing.List[FamilySpec]
    train_per_class: int = 64
    val_per_class: int = 32
    test_size: int = 200
    min_len: int = 8
    max_len: int = 16
    words_per_family: int = 24
    vocab_limit: int = 1024
    label_noise: float = 0.0
    max_seq_len: int = 32
    roles: typing.Dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: DataConfig, max_seq_len: int = 32) -> "SuiteSpec":
        families, roles = [], {}
        for role, names in (("meta-train", cfg.meta_train), ("meta-test", cfg.meta_test)):
            for text in names:
                family = FamilySpec.parse(text, len(families))
                families.append(family)
                roles[family.task_name] = role
        return cls(families=families, train_per_class=cfg.train_per_class, val_per_class=cfg.val_per_class,
                   test_size=cfg.test_size, min_len=cfg.min_len, max_len=cfg.max_len,
                   words_per_family=cfg.words_per_family, vocab_limit=cfg.vocab_limit,
                   label_noise=cfg.label_noise, max_seq_len=max_seq_len, roles=roles)

    def vocabulary(self) -> Vocabulary:
        words = [w for fam in self.families for w in fam.words(self.words_per_family)]
        needed = len(RESERVED_TOKENS) + len(words)
        if needed > self.vocab_limit:
            raise DatasetError(f"vocabulary limit {self.vocab_limit} is too small for the requested "
                               f"families ({needed} tokens needed)")
        return Vocabulary.from_words(words)


def label_of(family: FamilySpec, words: typing.Sequence[str]) -> int:
    """The family's labeling rule; a pure function of the word sequence."""
    if family.kind == "keyword-presence":
        return int(family.trigger in words)
    if family.kind == "keyword-parity":
        return sum(w == family.trigger for w in words) % 2
    if family.kind == "dominant-topic":
        counts = [sum(w in set(family.topic_words(c)) for w in words) for c in range(family.num_classes)]
        return max(range(family.num_classes), key=lambda c: (counts[c], -c))
    positives = sum(w in set(family.positive_words) for w in words)
    negatives = sum(w in set(family.negative_words) for w in words)
    return int(positives > negatives)


def _draft(family: FamilySpec, target: int, spec: SuiteSpec, rng: Rng) -> typing.List[str]:
    g = rng.np
    filler = family.filler(spec.words_per_family)
    marked: typing.List[str] = []
    if family.kind == "keyword-presence":
        marked = [family.trigger] * (int(g.integers(1, 3)) if target else 0)
    elif family.kind == "keyword-parity":
        marked = [family.trigger] * int(g.choice([0, 2] if target == 0 else [1, 3]))
    elif family.kind == "dominant-topic":
        lead = int(g.integers(3, 5))
        marked = list(g.choice(family.topic_words(target), size=lead))
        others = [c for c in range(family.num_classes) if c != target]
        for c in g.choice(others, size=min(2, len(others)), replace=False):
            marked.extend(g.choice(family.topic_words(int(c)), size=int(g.integers(1, lead))))
    else:
        major = int(g.integers(2, 5))
        minor = int(g.integers(0, major))
        win, lose = ((family.positive_words, family.negative_words) if target
                     else (family.negative_words, family.positive_words))
        marked = list(g.choice(win, size=major)) + list(g.choice(lose, size=minor))

    length = max(int(g.integers(spec.min_len, spec.max_len + 1)), len(marked))
    words = [str(w) for w in marked] + [str(w) for w in g.choice(filler, size=length - len(marked))]
    g.shuffle(words)
    return words


def _generate_family(family: FamilySpec, spec: SuiteSpec, vocab: Vocabulary, rng: Rng) -> LabeledDataset:
    seen: typing.Set[typing.Tuple[int, ...]] = set()
    per_class = {
        "train": [spec.train_per_class] * family.num_classes,
        "val": [spec.val_per_class] * family.num_classes,
        "test": [-(-spec.test_size // family.num_classes)] * family.num_classes,
    }
    pools: typing.Dict[str, typing.List[Example]] = {}
    for split, counts in per_class.items():
        split_rng = rng.child(split)
        examples = []
        for target, count in enumerate(counts):
            made, attempts = 0, 0
            while made < count:
                attempts += 1
                if attempts > MAX_ATTEMPTS * max(count, 1):
                    raise DatasetError(f"{family.task_name}: cannot generate {count} unique examples "
                                       f"for class {target}; enlarge words_per_family or max_len")
                words = _draft(family, target, spec, split_rng)
                if len(words) + 1 > spec.max_seq_len:
                    raise DatasetError(f"{family.task_name}: sequence of {len(words)} words exceeds "
                                       f"max_seq_len {spec.max_seq_len}")
                label = label_of(family, words)
                text = " ".join(words)
                tokens = vocab.encode(text, spec.max_seq_len)
                if tokens in seen:
                    continue
                seen.add(tokens)
                if spec.label_noise > 0 and split_rng.np.random() < spec.label_noise:
                    label = int((label + split_rng.np.integers(1, family.num_classes)) % family.num_classes)
                examples.append(Example(text=text, tokens=tokens, label=label))
                made += 1
        pools[split] = examples
    return LabeledDataset(name=family.task_name, class_names=family.class_names, **pools).validate()


def make_synthetic_suite(rng: Rng, spec: SuiteSpec) -> typing.List[LabeledDataset]:
    if not spec.families:
        raise DatasetError("suite spec names no task families")
    if spec.max_len + 1 > spec.max_seq_len:
        raise DatasetError(f"max_len {spec.max_len} does not fit max_seq_len {spec.max_seq_len} with [CLS]")
    vocab = spec.vocabulary()
    datasets = []
    for family in spec.families:
        dataset = _generate_family(family, spec, vocab, rng.child(family.task_name))
        bt.logging.info(f"gen-data | {dataset.name} | {len(dataset.train)} train / {len(dataset.val)} val / "
                        f"{len(dataset.test)} test, {dataset.num_classes} classes")
        datasets.append(dataset)
    return datasets


def build_synthetic_registry(rng: Rng, spec: SuiteSpec) -> TaskRegistry:
    registry = TaskRegistry(spec.vocabulary())
    for dataset in make_synthetic_suite(rng, spec):
        registry.add(dataset, spec.roles.get(dataset.name, "meta-train"))
    return registry
