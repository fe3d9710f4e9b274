import numpy as np
import pytest

from vflkit import data, protocol, synth_data
from vflkit.model import LayerSpec, LocalModel


@pytest.fixture(scope="session")
def toy_logistic_system():
    """Hand-built 1-D + 1-D sigmoid system: score = x_a + x_b."""
    m_a = LocalModel([LayerSpec("linear", 1, 1, [[1.0]], [0.0])])
    m_b = LocalModel([LayerSpec("linear", 1, 1, [[1.0]], [0.0])])
    return protocol.VFLSystem(
        [protocol.Participant("A", [0], m_a),
         protocol.Participant("B1", [1], m_b)],
        protocol.Coordinator("heterolr", bias=np.zeros(1)), 2)


@pytest.fixture(scope="session")
def credit_setup():
    """Trained mid-size credit-like logistic system with its views."""
    ds = data.normalize(synth_data.make_credit_like(n=8000, seed=7))
    train, test = data.train_test_split(ds, 0.2, seed=1)
    spec = data.PartitionSpec([list(range(13)), list(range(13, 23))])
    train_views = data.partition_vertical(train, spec)
    test_views = data.partition_vertical(test, spec)
    system, history = protocol.train_heterolr(
        train_views, train.labels, epochs=20, lr=0.05, batch=64, seed=2)
    return {
        "system": system, "history": history, "spec": spec,
        "train_views": train_views, "test_views": test_views,
        "train_labels": train.labels, "test_labels": test.labels,
    }


@pytest.fixture(scope="session")
def digits_setup():
    """Small trained split-network digit system."""
    train = synth_data.make_digits_like(4000, seed=13)
    test = synth_data.make_digits_like(1200, seed=14)
    spec = data.image_column_partition([14, 14])
    train_views = data.partition_vertical(train, spec)
    test_views = data.partition_vertical(test, spec)
    dims = [[v.shape[1], 64, 32] for v in train_views]
    system, history = protocol.train_splitnn(
        train_views, train.labels, dims, [64, 32, 10],
        epochs=6, lr=0.05, batch=64, seed=2)
    return {
        "system": system, "history": history, "spec": spec,
        "train_views": train_views, "test_views": test_views,
        "train_labels": train.labels, "test_labels": test.labels,
    }
