"""Federated round engine: FedAvg and fairness-aware (FairFed) aggregation.

One FairFed round runs three secure sums:

1. each client evaluates the current global model on its rows and submits
   its additive share of the global fairness metric together with its
   size-weighted accuracy; the server learns the global metric and the
   global accuracy;
2. each client submits its metric gap; the server learns the mean gap;
3. each client moves its aggregation weight against its centered gap,
   trains locally and submits ``weight * params`` and ``weight``; the
   server divides the two sums to get the next global model.

FedAvg runs only step 3 with fixed size-proportional weights. Aggregation
weights live on the clients; the server only ever sees sums.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._rng import derive_rng, derive_seed
from ._validation import check_rows
from .data import TabularDataset
from .debias import DebiasAssignment, DebiasState, apply_strategy, global_reweigh_table
from .linear_model import (
    DEFAULT_EPOCHS, ModelParams, TrainConfig, TrainingDivergedError, local_train,
)
from .linear_model import loss as model_loss
from .linear_model import predict as model_predict
from .linear_model import predict_proba as model_predict_proba
from .metrics import (
    METRICS, DatasetStats, DegenerateStatsError, GroupCensus, LocalMetrics, accuracy,
    census, eod, fairness, local_metrics, spd, std_acc,
)
from .partition import ClientPartition, dirichlet_partition
from .secagg import FixedPointCodec, SecureAggregator, Transcript

logger = logging.getLogger(__name__)

AGGREGATIONS = ("fedavg", "fairfed")

# round-tag phases; tag = round << 3 | phase
PHASE_STATS, PHASE_METRICS, PHASE_GAPS, PHASE_MODEL, PHASE_FALLBACK, PHASE_REWEIGH = range(6)


def round_tag(t: int, phase: int) -> int:
    return (t << 3) | phase


@dataclass
class ServerState:
    theta: ModelParams
    round: int = 0
    metric: str = "eod"
    beta: float = 1.0
    eta: float = 1.0
    stats: Optional[DatasetStats] = None
    aggregation: str = "fairfed"

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"aggregation must be one of {AGGREGATIONS}")


@dataclass
class ClientState:
    client_id: int
    X: np.ndarray
    y: np.ndarray
    sensitive: np.ndarray
    debias: DebiasState = field(default_factory=DebiasState)
    weight: float = 0.0
    stats: Optional[DatasetStats] = None
    last_metrics: Optional[LocalMetrics] = field(default=None, repr=False)
    last_census: Optional[GroupCensus] = field(default=None, repr=False)
    local_params: Optional[ModelParams] = field(default=None, repr=False)
    fallback: bool = False
    fallback_rounds: int = 0

    def __post_init__(self):
        self.X, self.y, self.sensitive = check_rows(self.X, self.y, self.sensitive)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    def cell_counts(self) -> np.ndarray:
        cells = np.zeros((2, 2), dtype=np.int64)
        np.add.at(cells, (self.sensitive, self.y), 1)
        return cells

    def evaluate(self, theta: ModelParams) -> GroupCensus:
        return census(theta, self.X, self.y, self.sensitive)


# ---------------------------------------------------------------------------
# Protocol steps
# ---------------------------------------------------------------------------


def bootstrap_stats(clients, kind: str, aggregator: SecureAggregator) -> DatasetStats:
    """Securely pool the dataset statistics and hand them to every client.

    Also initializes each client's aggregation weight to ``n_k / n``.
    """
    vectors = {}
    for c in clients:
        cells = c.cell_counts()
        if kind == "eod":
            vectors[c.client_id] = [c.n, cells[0, 1], cells[1, 1]]
        else:
            vectors[c.client_id] = [c.n, cells[0].sum(), cells[1].sum()]
    total = np.rint(aggregator.sum(vectors, round_tag(0, PHASE_STATS)))
    n, count0, count1 = total
    if count0 <= 0 or count1 <= 0:
        raise DegenerateStatsError(
            f"pooled {kind} denominators are ({count0:g}, {count1:g}); "
            "both sensitive groups need rows in the conditioning event"
        )
    stats = DatasetStats.from_counts(kind, count0, count1, n)
    for c in clients:
        c.stats = stats
        c.weight = c.n / stats.n
    return stats


def broadcast_global_reweigh(clients, aggregator: SecureAggregator) -> np.ndarray:
    """Pool (A, Y) counts securely and give every client the shared table."""
    ids = [c.client_id for c in clients]

    def pooled_sum(vectors):
        return aggregator.sum(dict(zip(ids, vectors)), round_tag(0, PHASE_REWEIGH))

    table = global_reweigh_table([c.cell_counts() for c in clients], pooled_sum)
    for c in clients:
        c.debias.global_table = table
    return table


def client_local_metrics(client: ClientState, theta: ModelParams, stats=None):
    """``(m_global_k, Acc_k * n_k / n)`` for the global model on local rows."""
    stats = stats or client.stats
    client.last_census = client.evaluate(theta)
    client.last_metrics = local_metrics(client.last_census, stats)
    return client.last_metrics.m_global, client.last_metrics.accuracy_share


def metric_gap(local_fairness, local_acc: float, global_fairness: float,
               global_acc: float, eta: float = 1.0) -> float:
    """Gap between a client's local view and the global one.

    Blends the fairness gap and the accuracy gap with ``eta``; falls back to
    the accuracy gap alone when the local metric is undefined.
    """
    acc_gap = abs(local_acc - global_acc)
    if local_fairness is None:
        return acc_gap
    return eta * abs(global_fairness - local_fairness) + (1.0 - eta) * acc_gap


def client_metric_gap(client: ClientState, global_fairness: float, global_acc: float,
                      eta: float = 1.0, round_index: Optional[int] = None) -> float:
    m = client.last_metrics
    if m is None:
        raise RuntimeError("client_local_metrics must run before client_metric_gap")
    client.fallback = not m.defined
    if client.fallback:
        client.fallback_rounds += 1
        logger.info("round %s client %d: local %s undefined, using accuracy gap",
                    round_index, client.client_id, client.stats.kind)
    return metric_gap(m.fairness, m.accuracy, global_fairness, global_acc, eta)


def update_weight(client: ClientState, delta: float, mean_delta: float, beta: float) -> float:
    """Move the weight against the centered gap, clamped at zero."""
    client.weight = max(client.weight - beta * (delta - mean_delta), 0.0)
    return client.weight


def client_weighted_update(client: ClientState, theta: ModelParams, cfg: TrainConfig,
                           round_index: int, weight: Optional[float] = None) -> np.ndarray:
    """Train locally from ``theta`` and return ``[weight * params, weight]``."""
    weight = client.weight if weight is None else weight
    metric = client.stats.kind if client.stats else "eod"
    census_now = client.evaluate(theta) if client.debias.strategy == "fairbatch" else None
    sample_weight = apply_strategy(client.debias, client.y, client.sensitive, census_now, metric)
    try:
        client.local_params = local_train(
            theta, client.X, client.y, sample_weight,
            cfg.with_seed(derive_seed(cfg.seed, "train", round_index, client.client_id)),
        )
    except TrainingDivergedError as exc:
        exc.round, exc.client = round_index, client.client_id
        raise
    return np.append(weight * client.local_params.to_vector(), weight)


# ---------------------------------------------------------------------------
# Reporting (trusted evaluator, outside the privacy boundary)
# ---------------------------------------------------------------------------


def _nullable(x):
    return None if x is None else float(x)


def evaluation_row(t: int, theta: ModelParams, clients, metric: str,
                   test: Optional[TabularDataset] = None) -> dict:
    per_client = []
    pooled = GroupCensus.empty()
    accs = []
    loss_num = 0.0
    n_total = 0
    for c in clients:
        cen = c.evaluate(theta)
        pooled = pooled + cen
        acc = accuracy(cen)
        accs.append(acc)
        loss_num += model_loss(theta, c.X, c.y) * c.n
        n_total += c.n
        per_client.append({"k": c.client_id, "n_k": c.n, "acc": acc,
                           "F_k": _nullable(fairness(cen, metric))})
    row = {
        "round": t,
        "acc_global": accuracy(pooled),
        "eod": _nullable(eod(pooled)),
        "spd": _nullable(spd(pooled)),
        "std_acc": std_acc(accs),
        "loss": loss_num / n_total,
        "per_client": per_client,
    }
    if test is not None:
        tc = census(theta, test.features, test.labels, test.sensitive)
        row["test"] = {"acc": accuracy(tc), "eod": _nullable(eod(tc)), "spd": _nullable(spd(tc))}
    return row


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


class Federation:
    """A server and its clients, advanced one round at a time.

    Parameters
    ----------
    clients : list of ClientState
    aggregation : {"fairfed", "fedavg"}
    metric : {"eod", "spd"}
        Fairness metric tracked by the aggregation weights.
    beta : float
        Fairness budget; 0 leaves the size-proportional weights untouched.
    eta : float
        Weight of the fairness gap against the accuracy gap (1 = fairness only).
    train : TrainConfig
        Local training settings; ``train.seed`` roots every training stream.
    seed : int
        Roots the secure-aggregation masks and client sampling.
    participation : float
        Fraction of clients sampled per round (1.0 = everyone).
    test : TabularDataset, optional
        Held-out rows for the report.
    transcript : Transcript, optional
        Records the server's view of every secure sum.
    """

    def __init__(self, clients, *, aggregation="fairfed", metric="eod", beta=1.0, eta=1.0,
                 train: TrainConfig = TrainConfig(), seed: int = 0, participation: float = 1.0,
                 test: Optional[TabularDataset] = None, transcript: Optional[Transcript] = None,
                 codec: FixedPointCodec = FixedPointCodec(), theta0: Optional[ModelParams] = None):
        if not clients:
            raise ValueError("need at least one client")
        ids = [c.client_id for c in clients]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids must be unique")
        if not 0.0 < participation <= 1.0:
            raise ValueError("participation must lie in (0, 1]")
        self.clients = list(clients)
        d = self.clients[0].X.shape[1]
        self.server = ServerState(theta0 or ModelParams.zeros(d), 0, metric, beta, eta,
                                  None, aggregation)
        self.train = train
        self.seed = seed
        self.participation = participation
        self.test = test
        self.aggregator = SecureAggregator(derive_seed(seed, "secagg"), codec, transcript)
        self.history = []

    @property
    def theta(self) -> ModelParams:
        return self.server.theta

    def bootstrap(self) -> DatasetStats:
        self.server.stats = bootstrap_stats(self.clients, self.server.metric, self.aggregator)
        if any(c.debias.strategy == "global-reweigh" for c in self.clients):
            broadcast_global_reweigh(self.clients, self.aggregator)
        return self.server.stats

    def _participants(self, t: int):
        if self.participation >= 1.0:
            return self.clients
        m = max(1, int(np.floor(self.participation * len(self.clients) + 0.5)))
        picked = np.sort(derive_rng(self.seed, "participation", t).choice(
            len(self.clients), m, replace=False))
        return [self.clients[i] for i in picked]

    def run_round(self) -> dict:
        if self.server.stats is None:
            raise RuntimeError("call bootstrap() before running rounds")
        srv = self.server
        t = srv.round + 1
        theta = srv.theta
        active = self._participants(t)

        if srv.aggregation == "fairfed":
            shares = {c.client_id: client_local_metrics(c, theta) for c in active}
            f_global, acc_bar = self.aggregator.sum(shares, round_tag(t, PHASE_METRICS))
            gaps = {c.client_id: [client_metric_gap(c, f_global, acc_bar, srv.eta, t)]
                    for c in active}
            mean_gap = self.aggregator.sum(gaps, round_tag(t, PHASE_GAPS))[0] / len(active)
            for c in active:
                update_weight(c, gaps[c.client_id][0], mean_gap, srv.beta)

        updates = {c.client_id: client_weighted_update(c, theta, self.train, t) for c in active}
        total = self.aggregator.sum(updates, round_tag(t, PHASE_MODEL))
        if not total[-1] > 0:
            logger.warning("round %d: every aggregation weight is zero; "
                           "falling back to size-proportional weights", t)
            updates = {c.client_id: np.append(c.local_params.to_vector() * (c.n / srv.stats.n),
                                               c.n / srv.stats.n) for c in active}
            total = self.aggregator.sum(updates, round_tag(t, PHASE_FALLBACK))
        srv.theta = ModelParams.from_vector(total[:-1] / total[-1])
        srv.round = t
        row = evaluation_row(t, srv.theta, self.clients, srv.metric, self.test)
        self.history.append(row)
        return row

    def run(self, rounds: int) -> list:
        if self.server.stats is None:
            self.bootstrap()
        for _ in range(rounds):
            self.run_round()
        return self.history

    def normalized_weights(self) -> np.ndarray:
        w = np.array([c.weight for c in self.clients])
        return w / w.sum()


def make_clients(ds: TabularDataset, partition: ClientPartition,
                 assignment: Optional[DebiasAssignment] = None) -> list:
    if partition.assignment.shape[0] != ds.n_rows:
        raise ValueError("partition and dataset have different row counts")
    assignment = assignment or DebiasAssignment.uniform("none", partition.n_clients)
    states = assignment.states()
    clients = []
    for k in range(partition.n_clients):
        rows = partition.client_rows(k)
        clients.append(ClientState(k, ds.features[rows], ds.labels[rows], ds.sensitive[rows],
                                   states[k]))
    return clients


class FairFedClassifier(ClassifierMixin, BaseEstimator):
    """Logistic regression trained by simulated federated learning.

    Rows are spread over clients either by ``client_ids`` passed to
    :meth:`fit` or by a Dirichlet partition over the sensitive attribute.

    Parameters
    ----------
    aggregation : {"fairfed", "fedavg"}, default="fairfed"
    metric : {"eod", "spd"}, default="eod"
    beta : float, default=1.0
    eta : float, default=1.0
    n_rounds : int, default=30
    learning_rate : float, default=0.01
    local_epochs : int, default=5
    batch_size : int, default=64
    debias : str, list or dict, default="none"
        Per-client mitigation; see :meth:`DebiasAssignment.from_spec`.
    n_clients : int, default=5
    alpha : float, default=0.5
        Dirichlet heterogeneity used when ``client_ids`` is not given.
    random_state : int, default=0
    """

    def __init__(self, aggregation="fairfed", metric="eod", beta=1.0, eta=1.0, n_rounds=30,
                 learning_rate=0.01, local_epochs=DEFAULT_EPOCHS, batch_size=64, debias="none",
                 n_clients=5, alpha=0.5, random_state=0):
        self.aggregation = aggregation
        self.metric = metric
        self.beta = beta
        self.eta = eta
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.debias = debias
        self.n_clients = n_clients
        self.alpha = alpha
        self.random_state = random_state

    def fit(self, X, y, sensitive_features, client_ids=None):
        X, y, a = check_rows(X, y, sensitive_features)
        ds = TabularDataset(X, y, a)
        if client_ids is None:
            part = dirichlet_partition(ds, self.n_clients, self.alpha, "sensitive",
                                       derive_seed(self.random_state, "partition"))
        else:
            ids = np.asarray(client_ids)
            _, assignment = np.unique(ids, return_inverse=True)
            part = ClientPartition(int(assignment.max()) + 1, assignment, float("nan"),
                                   self.random_state, "given", min_rows=1)
        assignment = DebiasAssignment.from_spec(self.debias, part.n_clients,
                                                derive_seed(self.random_state, "debias"))
        fed = Federation(
            make_clients(ds, part, assignment), aggregation=self.aggregation,
            metric=self.metric, beta=self.beta, eta=self.eta,
            train=TrainConfig(self.learning_rate, self.local_epochs, self.batch_size,
                              self.random_state),
            seed=self.random_state,
        )
        self.history_ = fed.run(self.n_rounds)
        self.params_ = fed.theta
        self.client_weights_ = fed.normalized_weights()
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = X.shape[1]
        return self

    @property
    def coef_(self):
        check_is_fitted(self, "params_")
        return self.params_.weights[None, :]

    @property
    def intercept_(self):
        check_is_fitted(self, "params_")
        return np.array([self.params_.bias])

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        p = model_predict_proba(self.params_, check_array(X, dtype=np.float64))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        check_is_fitted(self, "params_")
        return model_predict(self.params_, check_array(X, dtype=np.float64))
