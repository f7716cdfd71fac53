"""Shared fixtures: a small trained federation reused by the slower tests."""

import numpy as np
import pytest

from vfgl_lab import manipulation, protocol
from vfgl_lab.graph import split_features, synth_sbm


@pytest.fixture(scope="session")
def small_graph():
    return synth_sbm(120, 3, 0.2, 0.01, 16, 3.0, seed=0)


@pytest.fixture(scope="session")
def small_stack(small_graph):
    """Clean two-client federation trained on the small benchmark."""
    split = split_features(small_graph, 2, seed=0)
    config = protocol.TrainConfig(epochs=80, seed=0)
    clients, server, log = protocol.train_vfgl(small_graph, split, config)
    return clients, server, log


@pytest.fixture(scope="session")
def small_pipeline(small_graph):
    """Manipulated training plus shadow distillation on the small benchmark."""
    split = split_features(small_graph, 2, seed=0)
    config = protocol.TrainConfig(epochs=40, seed=0, manipulation="na2",
                                  tau=10, shadow_epochs=150)
    return manipulation.distillation_pipeline(small_graph, split, config)


@pytest.fixture
def query_service(small_pipeline, small_graph):
    pipe = small_pipeline
    return protocol.QueryService(pipe.clients, pipe.server, small_graph, 0)
