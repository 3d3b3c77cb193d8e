import json

import pytest

from clif.adapters import AdapterShape
from clif.datagen import build_benchmark
from clif.encoder import EncoderConfig, FrozenEncoder

MINI_MANIFEST = {
    "name": "mini",
    "vocabulary": {
        "seed": 99,
        "filler_count": 24,
        "groups": {"g1": 4, "g2": 4, "g3": 4, "g4": 4, "g5": 4, "g6": 4},
    },
    "defaults": {"train_per_class": 40, "val_per_class": 10, "test_per_class": 20,
                 "noise_rate": 0.0},
    "learner": {"learning_rate": 0.01, "fewshot_epochs": 30, "max_epochs": 15},
    "tasks": [
        {"name": "up-1", "role": "upstream", "family": "keyword-topic",
         "keywords_per_text": 3, "groups": ["g1", "g2"], "labels": ["red", "blue"]},
        {"name": "up-2", "role": "upstream", "family": "keyword-topic",
         "keywords_per_text": 3, "groups": ["g3", "g4"], "labels": ["hot", "cold"]},
        {"name": "few-1", "role": "fewshot", "family": "keyword-topic",
         "keywords_per_text": 3, "groups": ["g5", "g6"], "labels": ["wet", "dry"]},
    ],
    "stream": {"order": "default", "k": 4, "resamples": 2},
}

# two permuted tasks over shared new-cluster groups with one shared label set
MINI_INTERFERE = {
    "name": "mini-interfere",
    "vocabulary": {
        "seed": 41,
        "filler_count": 24,
        "groups": {"p1": 4, "p2": 4, "p3": 4, "p4": 4},
    },
    "defaults": {"train_per_class": 40, "val_per_class": 10, "test_per_class": 20,
                 "noise_rate": 0.0},
    "learner": {"learning_rate": 0.01, "fewshot_epochs": 30, "max_epochs": 15},
    "tasks": [
        {"base_name": "perm", "role": "upstream", "family": "label-permuted",
         "keywords_per_text": 3,
         "groups": [["p1", "p2"], ["p3", "p4"]],
         "task_labels": [["crimson", "cobalt"], ["crimson", "cobalt"]],
         "permutations": [[0, 1], [1, 0]]},
        {"name": "mini-few", "role": "fewshot", "family": "keyword-topic",
         "keywords_per_text": 3, "groups": ["p1", "p2"], "labels": ["crimson", "cobalt"]},
    ],
    "stream": {"order": "default", "k": 4, "resamples": 2},
}


@pytest.fixture(scope="session")
def encoder_config():
    return EncoderConfig()


@pytest.fixture(scope="session")
def encoder(encoder_config):
    return FrozenEncoder(encoder_config)


@pytest.fixture(scope="session")
def shape(encoder_config):
    return AdapterShape(dim=encoder_config.dim, num_layers=encoder_config.num_layers)


@pytest.fixture(scope="session")
def small_encoder_config():
    return EncoderConfig(hash_buckets=512, dim=16, num_layers=2, encoder_seed=5)


@pytest.fixture(scope="session")
def small_encoder(small_encoder_config):
    return FrozenEncoder(small_encoder_config)


@pytest.fixture(scope="session")
def small_shape():
    return AdapterShape(dim=16, num_layers=2, adapter_hidden=4, head_hidden=4)


@pytest.fixture(scope="session")
def mini_benchmark():
    return build_benchmark(json.loads(json.dumps(MINI_MANIFEST)))


@pytest.fixture(scope="session")
def mini_interfere():
    return build_benchmark(json.loads(json.dumps(MINI_INTERFERE)))


@pytest.fixture()
def mini_manifest_file(tmp_path):
    path = tmp_path / "mini-manifest.json"
    path.write_text(json.dumps(MINI_MANIFEST))
    return path
