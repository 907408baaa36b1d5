import os

import numpy as np
import pytest

from fedte.data import Dataset
from fedte.nn import Batch, Conv, Dense, ModelSpec, Network, Pool
from fedte.orchestrator import AlgorithmVariant, FedConfig
from fedte.penalties import FisherDiag, Prox


def synth_dataset(n, seed, shape=(1, 12, 12), classes=10):
    """Random images with a class-dependent bright pixel so nets can learn."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, n).astype(np.int64)
    images = (rng.random((n, *shape)) * 0.2).astype(np.float32)
    for c in range(classes):
        images[labels == c, 0, c % shape[1], (2 * c) % shape[2]] += 0.8
    return Dataset(images, labels, n_classes=classes)


def tiny_spec():
    return ModelSpec((1, 12, 12), (Conv(4, kernel=5), Pool(), Dense(10, relu=False)))


def tiny_cfg(variant, seed=3, rounds=4, **overrides):
    base = dict(
        clients=5, ratio=0.4, epochs=1, batch_size=32, rounds=rounds,
        lr=0.05, lr_decay=0.99, seed=seed, variant=variant, gamma=1.0,
        proxy_fraction=0.05, fisher_samples=64, model_stride=1,
    )
    base.update(overrides)
    return FedConfig(**base)


# small architectures (< 200 params) for finite-difference gradient checks
GRADCHECK_SPECS = (
    ModelSpec((1, 1, 4), (Dense(5), Dense(3, relu=False))),
    ModelSpec((1, 6, 6), (Conv(2, kernel=3), Pool(), Dense(3, relu=False))),
    ModelSpec((2, 5, 5), (Conv(3, kernel=2), Dense(3), Dense(2, relu=False))),
)


def finite_difference_grad(net, params, batch, penalty, h=1e-3):
    fd = np.zeros_like(params)
    for i in range(params.size):
        plus = params.copy()
        plus[i] += h
        minus = params.copy()
        minus[i] -= h
        lp, _ = net.loss_and_grad(plus, batch, penalty)
        lm, _ = net.loss_and_grad(minus, batch, penalty)
        fd[i] = (lp - lm) / (2 * h)
    return fd


def kink_margin(net, params, batch):
    """Distance of relu pre-activations / pool gaps from nondifferentiable points.

    Central differences are only a valid oracle when no perturbed evaluation
    crosses a relu kink or flips a pooling argmax.
    """
    margin = np.inf
    _, caches = net._forward(params, batch.inputs, keep=True)
    prev_act = None
    for entry in caches:
        kind, layer = entry[0], entry[1]
        if kind in ("conv", "dense"):
            z = entry[4]
            if layer.relu:
                margin = min(margin, float(np.abs(z).min()))
            prev_act = np.maximum(z, 0) if layer.relu else z
        else:  # pool; reconstruct windows from the preceding activation
            a = prev_act
            nb, c, h, w = a.shape
            r = (
                a.reshape(nb, c, h // 2, 2, w // 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(nb, c, h // 2, w // 2, 4)
            )
            s = np.sort(r, axis=-1)
            gaps = s[..., 3] - s[..., 2]
            positive_top = s[..., 3] > 0  # all-clamped windows are exactly flat
            if np.any(positive_top):
                margin = min(margin, float(gaps[positive_top].min()))
    return margin


def gradcheck_case(case_seed, h=1e-3):
    """One random (net, params, batch, penalty) tuple for oracle comparison.

    Draws are rejected while any relu/pooling unit is closer than a few step
    sizes to its kink, where finite differences stop being a valid oracle.
    """
    for attempt in range(100):
        rng = np.random.default_rng((case_seed, attempt))
        spec = GRADCHECK_SPECS[int(rng.integers(len(GRADCHECK_SPECS)))]
        net = Network(spec, dtype=np.float64)
        assert net.n_params <= 200
        params = rng.normal(0, 0.5, net.n_params)
        b = int(rng.integers(1, 5))
        batch = Batch(
            rng.random((b, *spec.input_shape)),
            rng.integers(0, net.output_dim, b),
        )
        if kink_margin(net, params, batch) <= 5 * h:
            continue
        kind = int(rng.integers(3))
        if kind == 0:
            penalty = None
        elif kind == 1:
            penalty = Prox(float(rng.uniform(0, 2)), rng.normal(0, 0.5, net.n_params))
        else:
            penalty = FisherDiag(
                float(rng.uniform(0, 2)),
                rng.normal(0, 0.5, net.n_params),
                rng.uniform(0, 1, net.n_params),
            )
        return net, params, batch, penalty
    raise RuntimeError(f"no kink-free case found for seed {case_seed}")


def assert_grad_close(analytic, fd, rtol=1e-4):
    err = np.abs(analytic - fd).max()
    scale = max(1.0, np.abs(fd).max())
    assert err <= rtol * scale, f"gradient error {err} vs scale {scale}"


def records_equal(a, b):
    """Bitwise comparison of two RoundRecord sequences."""
    if len(a) != len(b):
        return False
    for x, y in zip(a, b):
        if x.selected != y.selected:
            return False
        if x.test_accuracy != y.test_accuracy or x.test_loss != y.test_loss:
            return False
        if (x.params is None) != (y.params is None):
            return False
        if x.params is not None and not np.array_equal(x.params, y.params):
            return False
    return True


def write_idx_dataset(dir_path, n_train=400, n_test=100, side=16, seed=0):
    """MNIST-layout IDX files with a learnable synthetic signal."""
    from fedte.data import save_idx

    os.makedirs(dir_path, exist_ok=True)

    def build(n, sub_seed):
        r = np.random.default_rng((seed, sub_seed))
        labels = r.integers(0, 10, n).astype(np.int64)
        images = r.integers(0, 40, (n, 1, side, side)).astype(np.float32)
        for c in range(10):
            images[labels == c, 0, c, (2 * c) % side] += 200
        return Dataset(np.clip(images, 0, 255) / 255.0, labels)

    save_idx(build(n_train, 1),
             os.path.join(dir_path, "train-images-idx3-ubyte"),
             os.path.join(dir_path, "train-labels-idx1-ubyte"))
    save_idx(build(n_test, 2),
             os.path.join(dir_path, "t10k-images-idx3-ubyte"),
             os.path.join(dir_path, "t10k-labels-idx1-ubyte"))
    return dir_path


def _dataset_dir(name):
    root = os.environ.get("FEDTE_DATA_DIR", os.path.join(os.getcwd(), "data"))
    path = os.path.join(root, name)
    return path if os.path.isdir(path) else None


@pytest.fixture(scope="session")
def mnist_dir():
    path = _dataset_dir("mnist")
    if path is None:
        pytest.skip("MNIST files not available (see scripts/fetch_data.py)")
    return path


@pytest.fixture(scope="session")
def fashion_dir():
    path = _dataset_dir("fashion")
    if path is None:
        pytest.skip("FashionMNIST files not available (see scripts/fetch_data.py)")
    return path


@pytest.fixture(scope="session")
def cifar_dir():
    path = _dataset_dir("cifar10")
    if path is None:
        pytest.skip("CIFAR-10 files not available (see scripts/fetch_data.py)")
    return path


def make_variant(kind, alpha=0.0, beta=0.0):
    return AlgorithmVariant(kind, alpha, beta)
