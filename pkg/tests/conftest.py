import numpy as np
import pytest
import torch


def central_difference_check(fn, tensors, n_coords=12, h=1e-6, seed=0):
    """Largest relative error between autograd and central differences.

    ``fn`` maps nothing to a scalar and reads ``tensors`` (leaf tensors with
    ``requires_grad``) in place; ``n_coords`` coordinates of each tensor are
    probed.
    """
    rng = np.random.default_rng(seed)
    out = fn()
    grads = torch.autograd.grad(out, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.view(-1)
        gflat = g.reshape(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            plus = fn().item()
            flat[i] = orig - h
            minus = fn().item()
            flat[i] = orig
            numeric = (plus - minus) / (2 * h)
            analytic = gflat[i].item()
            scale = max(abs(numeric), abs(analytic), 1e-6)
            worst = max(worst, abs(numeric - analytic) / scale)
    return worst


@pytest.fixture
def fd_check():
    return central_difference_check


@pytest.fixture
def double_precision():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


TINY = {
    "preset": "desk",
    "data.crop_size": 32,
    "data.jitter_resize": 36,
    "data.batch_size": 4,
    "gen.embed_dim": 4,
    "gen.time_embed_dim": 8,
    "disc.base_channels": 4,
    "disc.n_layers": 2,
    "bridge.hidden_channels": 2,
    "train.epochs_const": 2,
    "train.epochs_decay": 2,
    "train.checkpoint_every": 2,
    "monitor.eval_size": 4,
    "monitor.probe_size": 2,
}


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory):
    from atme.data import make_toy_dataset

    root = tmp_path_factory.mktemp("toy")
    make_toy_dataset(root, 10, size=32, seed=0)
    return root


@pytest.fixture
def tiny_cfg(toy_root):
    from atme import config as cfgmod

    return cfgmod.resolve({**TINY, "data.root": str(toy_root)})


@pytest.fixture(scope="session")
def toy_pairs(toy_root):
    from atme.data import PairedImageDataset

    return PairedImageDataset(toy_root).pairs


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
