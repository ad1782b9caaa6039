import pytest

from shared.errors import DatasetError
from shared.tensor_core import Rng
from tasks.synthetic_suite import FamilySpec, SuiteSpec, build_synthetic_registry, label_of, make_synthetic_suite

from tests.conftest import tiny_data_cfg


def test_roles_and_names(registry):
    assert registry.names("meta-train") == ["keyword-presence-kp0", "dominant-topic-dt1", "lexicon-sentiment-ls2"]
    assert registry.names("meta-test") == ["keyword-presence-kp3", "keyword-parity-kc4"]
    assert registry.get("dominant-topic-dt1").num_classes == 3


def test_labels_follow_the_family_rule(suite_spec, registry):
    for family in suite_spec.families:
        dataset = registry.get(family.task_name)
        for split in ("train", "val", "test"):
            for ex in dataset.pool(split):
                assert ex.label == label_of(family, ex.text.split())


def test_pools_are_balanced_and_disjoint(suite_spec, registry):
    for family in suite_spec.families:
        dataset = registry.get(family.task_name)
        assert dataset.class_counts("train") == [suite_spec.train_per_class] * family.num_classes
        assert dataset.class_counts("val") == [suite_spec.val_per_class] * family.num_classes
        pools = [{ex.tokens for ex in dataset.pool(s)} for s in ("train", "val", "test")]
        assert not (pools[0] & pools[1]) and not (pools[0] & pools[2]) and not (pools[1] & pools[2])
        for ex in dataset.train:
            assert len(ex.tokens) <= suite_spec.max_seq_len


def test_families_use_disjoint_vocabulary_regions(suite_spec):
    regions = [set(f.words(suite_spec.words_per_family)) for f in suite_spec.families]
    for i in range(len(regions)):
        for j in range(i + 1, len(regions)):
            assert not regions[i] & regions[j]


def test_generation_is_a_function_of_the_seed(suite_spec):
    first = make_synthetic_suite(Rng(3), suite_spec)
    second = make_synthetic_suite(Rng(3), suite_spec)
    other = make_synthetic_suite(Rng(4), suite_spec)
    assert [d.train for d in first] == [d.train for d in second]
    assert [d.train for d in first] != [d.train for d in other]


def test_label_rules():
    family = FamilySpec.parse("dominant-topic:5", 0)
    words = family.topic_words(2) * 2 + family.topic_words(4)[:1] + family.filler(3)
    assert label_of(family, words) == 2
    parity = FamilySpec.parse("keyword-parity", 1)
    assert label_of(parity, [parity.trigger] * 3) == 1
    assert label_of(parity, [parity.trigger] * 2 + parity.filler(2)) == 0
    sentiment = FamilySpec.parse("lexicon-sentiment", 2)
    assert label_of(sentiment, sentiment.positive_words[:2] + sentiment.negative_words[:1]) == 1
    assert label_of(sentiment, sentiment.positive_words[:1] + sentiment.negative_words[:1]) == 0


@pytest.mark.parametrize("text", ["sarcasm", "dominant-topic:4", "keyword-presence:3"])
def test_invalid_family_specs(text):
    with pytest.raises(DatasetError):
        FamilySpec.parse(text, 0)


def test_vocab_limit():
    spec = SuiteSpec.from_config(tiny_data_cfg(vocab_limit=20), max_seq_len=12)
    with pytest.raises(DatasetError, match="vocabulary limit"):
        spec.vocabulary()


def test_max_len_must_fit_sequence_length():
    spec = SuiteSpec.from_config(tiny_data_cfg(), max_seq_len=8)
    with pytest.raises(DatasetError, match="max_seq_len"):
        build_synthetic_registry(Rng(0), spec)


def test_label_noise_flips_some_labels():
    spec = SuiteSpec.from_config(tiny_data_cfg(meta_train=("keyword-presence",), meta_test=(), label_noise=0.3),
                                 max_seq_len=12)
    dataset = make_synthetic_suite(Rng(1), spec)[0]
    family = spec.families[0]
    flipped = [ex for ex in dataset.train if ex.label != label_of(family, ex.text.split())]
    assert 0 < len(flipped) < len(dataset.train)
