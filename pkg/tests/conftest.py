import numpy as np
import pytest

from graphstad import pipeline as P
from graphstad.config import PipelineConfig
from graphstad.model import GraphSTAD
from graphstad.simlab import SyntheticWorld, generate_dataset
from graphstad.training import TrainConfig, WindowSet, channel_weights, train


@pytest.fixture(scope="session")
def toy_world():
    """Default toy dataset with its fitted preprocessing."""
    cfg = PipelineConfig()
    ds = generate_dataset(SyntheticWorld(cfg.geometry, cfg.world))
    pre = P.fit_preprocessor(ds, cfg)
    return cfg, ds, pre, pre.apply(ds)


@pytest.fixture(scope="session")
def toy_run(toy_world):
    """Toy-arch model trained on 200 healthy windows; held-out windows come from the test range."""
    cfg, ds, pre, scaled = toy_world
    seqs = [seq for _, seq in P.run_sequences(ds, scaled, "train").values()]
    T = cfg.arch.window
    starts = [(r, s) for r in range(len(seqs)) for s in range(0, 50)]
    windows = WindowSet(seqs, T, starts)
    assert len(windows) == 200
    held = [seq for _, seq in P.run_sequences(ds, scaled, "test").values()]
    held_windows = WindowSet(held, T, [(r, s) for r in range(len(held)) for s in range(0, 40, T)])
    model = GraphSTAD(cfg.arch, ds.geometry, seed=0)
    weights = channel_weights(ds.segmentation.active_mask, cfg.loss)
    result = train(model, windows, weights, cfg.loss, TrainConfig(epochs=8, patience=3, seed=0))
    return model, result, windows, held_windows, weights, cfg


def pytest_configure(config):
    np.set_printoptions(precision=4, suppress=True)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def record(request):
    """Append one criterion line to the acceptance section of the terminal summary."""
    def _record(cid, ok, detail):
        request.config.stash.setdefault(ACCEPTANCE, []).append(f"{cid} {'PASS' if ok else 'FAIL'} {detail}")
    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
