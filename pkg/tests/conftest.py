import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(int(os.environ.get("POINTSEG_THREADS", "1")))


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def tiny_config(*overrides):
    from pointseg.config import Config, apply_overrides

    items = ["data.height=16", "data.width=16", "data.frames=3", "data.n_points=6",
             "data.n_train=3", "data.n_val=1", "data.n_test=2",
             "encoder.dim=16", "encoder.strides=[2,4]", "encoder.layers=1", "encoder.heads=2",
             "encoder.points=2", "encoder.ffn_dim=32", "tracker.heads=2", "tracker.corr_radius=1",
             "tracker.corr_dim=8", "tracker.grid_size=2", "fusion.heads=2", "fusion.ffn_dim=32",
             "fusion.decoder_dim=8", "train.epochs=2", "train.accumulation=2"]
    items += list(overrides)
    return apply_overrides(Config(), items).validate()


@pytest.fixture(scope="session")
def tiny_records():
    from pointseg.phantom import generate_records

    recs, _ = generate_records(tiny_config().data, 5)
    return recs


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
