"""Federated training loop: client selection, local SGD, weighted aggregation.

The loop is fully deterministic given the config seed. Every random stream is
derived from (seed, purpose-code, ...) tuples so that paired runs of different
algorithm variants share client selections, partitions and batch orders.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import penalties
from .data import PartitionConfig, dirichlet_partition, iterate_batches, split_proxy
from .errors import ConfigError, DivergenceError
from .nn import Network, baseline_cnn, lr_at_round, sgd_step
from .target import TargetTracker

VARIANT_KINDS = ("fedavg", "fedprox", "fedcl", "fedprox-te", "fedcl-te")

# purpose codes for derived RNG streams
_SEED_SELECT = 10
_SEED_PROXY = 11
_SEED_PARTITION = 12
_SEED_INIT = 13
_SEED_BATCH = 14
_SEED_FISHER = 15


@dataclass(frozen=True)
class AlgorithmVariant:
    kind: str
    alpha: float = 0.0
    beta: float = 0.0

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ConfigError(f"unknown variant {self.kind!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not (0 <= self.beta < 1):
            raise ConfigError(f"beta must be in [0, 1), got {self.beta}")

    @property
    def uses_fisher(self):
        return self.kind in ("fedcl", "fedcl-te")

    @property
    def uses_ensemble(self):
        return self.kind.endswith("-te")


@dataclass(frozen=True)
class FedConfig:
    clients: int
    ratio: float  # fraction of clients selected per round
    epochs: int
    batch_size: int
    rounds: int
    lr: float
    lr_decay: float
    seed: int
    variant: AlgorithmVariant
    gamma: float = 1.0
    prior: Optional[np.ndarray] = None
    proxy_fraction: float = 0.01
    fisher_samples: int = 1024
    model_stride: int = 0  # store global params every N rounds (0 = never)

    def __post_init__(self):
        if not (0 < self.ratio <= 1):
            raise ConfigError(f"selection ratio must be in (0, 1], got {self.ratio}")
        if self.epochs < 1 or self.batch_size < 1 or self.rounds < 1:
            raise ConfigError("epochs, batch_size and rounds must all be >= 1")


@dataclass
class RoundRecord:
    round: int
    selected: list
    test_accuracy: float
    test_loss: float
    lr: float
    params: Optional[np.ndarray] = None


def select_clients(clients, ratio, round_idx, seed):
    """Uniform sample of max(floor(ratio*clients), 1) ids, without replacement."""
    if clients < 1 or not (0 < ratio <= 1):
        raise ConfigError(f"invalid selection parameters K={clients} C={ratio}")
    m = max(int(np.floor(ratio * clients)), 1)
    rng = np.random.default_rng((seed, _SEED_SELECT, round_idx))
    return sorted(int(c) for c in rng.choice(clients, size=m, replace=False))


def aggregate(models, counts):
    """Data-count-weighted average, accumulated in float64."""
    if not models:
        raise ConfigError("nothing to aggregate")
    if len(models) != len(counts) or any(c <= 0 for c in counts):
        raise ConfigError("counts must be positive and match models")
    acc = np.zeros(models[0].shape, dtype=np.float64)
    for m, c in zip(models, counts):
        acc += float(c) * m.astype(np.float64)
    return (acc / float(sum(counts))).astype(models[0].dtype)


def local_train(net, global_params, ds, shard, penalty, epochs, batch_size, lr,
                seed, round_idx=None, client_id=None):
    """E epochs of mini-batch SGD from a copy of the global model.

    Returns (trained parameters, shard example count).
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be > 0, got {lr}")
    params = global_params.copy()
    step = 0
    for epoch in range(epochs):
        for batch in iterate_batches(ds, shard, batch_size, seed=(*seed, epoch)):
            loss, grad = net.loss_and_grad(params, batch, penalty)
            if not np.isfinite(loss):
                raise DivergenceError(round_idx, client_id, step, loss)
            params = sgd_step(params, grad, lr)
            step += 1
    return params, int(np.asarray(shard.indices).size)


def evaluate(net, params, ds, batch_size=256):
    """(accuracy, mean cross-entropy) over a dataset."""
    correct = 0
    loss_sum = 0.0
    n = len(ds)
    for start in range(0, n, batch_size):
        x = ds.images[start:start + batch_size]
        y = ds.labels[start:start + batch_size]
        logits = net.forward(params, x)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        loss_sum += float(-logp[np.arange(len(y)), y].sum())
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / n, loss_sum / n


def run_experiment(cfg, train, test, net=None, fisher_fn=None, on_round=None):
    """Run the full federated loop; returns one RoundRecord per round.

    `fisher_fn(net, params, proxy, max_samples, seed)` may be overridden for
    testing; `on_round` is called with each RoundRecord as it is produced.
    """
    if net is None:
        net = Network(baseline_cnn(train.input_shape))
    if fisher_fn is None:
        fisher_fn = penalties.fisher_diag
    variant = cfg.variant

    # the proxy split happens for every variant so that paired runs of
    # different algorithms train on identical shards
    train_main, proxy = split_proxy(
        train, cfg.proxy_fraction, seed=(cfg.seed, _SEED_PROXY)
    )
    shards = dirichlet_partition(
        train_main,
        PartitionConfig(cfg.clients, cfg.gamma, cfg.prior, seed=(cfg.seed, _SEED_PARTITION)),
    )
    global_params = net.init_params((cfg.seed, _SEED_INIT))
    tracker = TargetTracker(variant.beta) if variant.uses_ensemble else None
    target = global_params  # round-1 constraint target is the initial model

    records = []
    for t in range(1, cfg.rounds + 1):
        lr = lr_at_round(t, cfg.lr, cfg.lr_decay)
        selected = select_clients(cfg.clients, cfg.ratio, t, cfg.seed)

        if variant.kind == "fedavg":
            penalty = None
        elif variant.uses_fisher:
            fisher = fisher_fn(
                net, target, proxy, cfg.fisher_samples, (cfg.seed, _SEED_FISHER, t)
            )
            penalty = penalties.FisherDiag(variant.alpha, target, fisher)
        else:
            penalty = penalties.Prox(variant.alpha, target)

        models, counts = [], []
        for k in selected:
            local_params, n_k = local_train(
                net, global_params, train_main, shards[k], penalty,
                cfg.epochs, cfg.batch_size, lr,
                seed=(cfg.seed, _SEED_BATCH, t, k), round_idx=t, client_id=k,
            )
            models.append(local_params)
            counts.append(n_k)
        global_params = aggregate(models, counts)
        target = tracker.update(global_params) if tracker else global_params

        accuracy, loss = evaluate(net, global_params, test)
        keep_model = cfg.model_stride > 0 and (
            (t - 1) % cfg.model_stride == 0 or t == cfg.rounds
        )
        record = RoundRecord(
            t, selected, accuracy, loss, lr,
            global_params.copy() if keep_model else None,
        )
        records.append(record)
        if on_round is not None:
            on_round(record)
    return records
