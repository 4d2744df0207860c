import numpy as np
import pytest


def central_diff(f, x, eps=1e-4):
    """Central finite-difference gradient of scalar ``f`` at array ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f(x)
        x[i] = old - eps
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_template_digits(root, n_train=300, n_test=100, seed=0):
    """Ten noisy class templates written as 28x28 IDX files."""
    from hyperquant.data import SPLITS, write_idx

    g = np.random.default_rng(seed)
    templates = g.random((10, 28, 28)) < 0.15
    root.mkdir(parents=True, exist_ok=True)
    for split, n in (("train", n_train), ("test", n_test)):
        y = np.arange(n) % 10
        noise = g.random((n, 28, 28)) < 0.05
        images = np.where(templates[y] ^ noise, 255, 0)
        img, lab = SPLITS[split]
        write_idx(root / img, images)
        write_idx(root / lab, y)
    return root


@pytest.fixture(scope="session")
def digits_dir(tmp_path_factory):
    return write_template_digits(tmp_path_factory.mktemp("digits"))


TINY_TOML = """\
seed = 3
[data]
path = "{data}"
[model]
sizes = [784, 24, 10]
exempt_first = false
exempt_last = true
[hq]
lr = 0.1
batch_size = 64
pretrain_epochs = 3
r_low = 0.3
r_high = 0.6
step = 0.15
round_epochs = 2
plateau_patience = 0
quant_epochs = 3
threshold_lr = 2.0
"""


@pytest.fixture
def tiny_config(tmp_path, digits_dir):
    path = tmp_path / "tiny.toml"
    path.write_text(TINY_TOML.format(data=digits_dir))
    return path


ACCEPTANCE: list[str] = []


def record(criterion: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {criterion:2d} {'PASS' if ok else 'FAIL'}  {title}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
