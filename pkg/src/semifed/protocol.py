"""Federated round state machine, ablation modes and communication accounting."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from .distill import collaborative_distill, helper_weights, init_distill, supervised_train
from .errors import (ConfigError, InvariantError, ModeViolationError, ProtocolError,
                     SemiFedError, UndefinedRatioError)
from .nn import Network, mlp
from .pruning import CHANNEL, WEIGHT, channel_prune, magnitude_prune, mask_of, param_count, zero_fill_embed
from .semi import CONFIDENCE, EVIDENTIAL, fine_tune, pseudo_label, select_confident

MODES = ("full", "AS1", "AS2", "AS3", "AS4")
DEFAULT_SCHEDULE = (1, 5, 9, 13)

# stream tags for seeded generators
_DATA, _TEACHER, _STUDENT, _INIT, _SAMPLE, _LOCAL, _SERVER = range(7)


def rng_for(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


@dataclass
class ExperimentConfig:
    K: int
    rounds: int
    num_classes: int
    B: int | None = None
    gamma: float = 0.3
    delta: float | None = None
    temperature: float = 1.0
    local_epochs: int = 2
    local_lr: float = 0.01
    local_batch: int = 32
    server_epochs: int = 2
    server_lr: float = 0.01
    server_batch: int = 32
    compression_schedule: list[int] | None = None
    max_compressions: int = 4
    uncertainty: str = EVIDENTIAL
    prune: str = CHANNEL
    mode: str = "full"
    seed: int = 0
    partition: str = "dirichlet"
    alpha_dir: float = 0.3
    shards_per_client: int = 2
    # synthetic data
    dim: int = 16
    samples_per_client: int = 1000
    n_server: int = 100
    test_size: int = 2000
    spread: float = 1.2
    clusters_per_class: int = 2
    # networks and server-side initialisation
    hidden: list[int] = field(default_factory=lambda: [96, 96])
    teacher_hidden: list[int] = field(default_factory=lambda: [256, 256, 256])
    teacher_epochs: int = 100
    teacher_lr: float = 0.02
    init_epochs: int = 100
    init_lr: float = 0.02
    # loss coefficients
    ce_weight: float = 1.0
    helper_weight: float = 1.0
    teacher_weight: float = 1.0
    reverse_kl: bool = False
    momentum: float = 0.0
    # sparsity training ahead of channel pruning
    slim_epochs: int = 2
    slim_l1: float = 1e-2
    eval_scope: str = "client"
    workers: int = 1

    def __post_init__(self):
        if self.B is None:
            self.B = max(1, self.K // 10)
        if self.delta is None:
            self.delta = 0.5 if self.uncertainty == EVIDENTIAL else 0.3
        if self.compression_schedule is None:
            self.compression_schedule = [r for r in DEFAULT_SCHEDULE if r <= self.rounds]
        self.compression_schedule = [int(r) for r in self.compression_schedule]
        self.hidden = [int(h) for h in self.hidden]
        self.teacher_hidden = [int(h) for h in self.teacher_hidden]
        self.validate()

    def validate(self):
        def need(ok, key, message):
            if not ok:
                raise ConfigError(key, message)

        need(self.K >= 1, "K", "must be >= 1")
        need(1 <= self.B <= self.K, "B", f"must lie in [1, K={self.K}]")
        need(self.rounds >= 0, "rounds", "must be >= 0")
        need(self.num_classes >= 2, "num_classes", "must be >= 2")
        need(0.0 <= self.gamma < 1.0, "gamma", "must lie in [0, 1)")
        need(0.0 <= self.delta <= 1.0, "delta", "must lie in [0, 1]")
        need(self.temperature > 0, "temperature", "must be positive")
        need(all(1 <= r <= self.rounds for r in self.compression_schedule), "compression_schedule",
             f"entries must lie in [1, rounds={self.rounds}]")
        need(self.max_compressions >= 0, "max_compressions", "must be >= 0")
        need(self.uncertainty in (EVIDENTIAL, CONFIDENCE), "uncertainty",
             f"must be {EVIDENTIAL!r} or {CONFIDENCE!r}")
        need(self.prune in (CHANNEL, "magnitude"), "prune", "must be 'channel' or 'magnitude'")
        need(self.mode in MODES, "mode", f"must be one of {', '.join(MODES)}")
        need(self.partition in ("iid", "dirichlet", "shards"), "partition",
             "must be 'iid', 'dirichlet' or 'shards'")
        need(self.alpha_dir > 0, "alpha_dir", "must be positive")
        need(self.shards_per_client >= 1, "shards_per_client", "must be >= 1")
        need(self.eval_scope in ("client", "global"), "eval_scope", "must be 'client' or 'global'")
        need(0.0 <= self.momentum < 1.0, "momentum", "must lie in [0, 1)")
        need(self.workers >= 1, "workers", "must be >= 1")
        need(self.samples_per_client >= 1, "samples_per_client", "must be >= 1")
        need(len(self.hidden) >= 1 and min(self.hidden) >= 1, "hidden", "needs at least one layer")
        for key in ("local_lr", "server_lr", "teacher_lr", "init_lr"):
            need(getattr(self, key) > 0, key, "must be positive")
        for key in ("local_batch", "server_batch"):
            need(getattr(self, key) >= 2, key, "must be >= 2")

    @property
    def mask_kind(self):
        return CHANNEL if self.prune == CHANNEL else WEIGHT

    @property
    def uses_teacher(self):
        return self.mode in ("full", "AS4")

    @property
    def compresses(self):
        return self.mode not in ("AS1", "AS4")

    def to_dict(self):
        return asdict(self)


# ------------------------------------------------------------------ state


@dataclass
class ExperimentData:
    server: data_mod.LabeledDataset
    clients: list
    test: data_mod.LabeledDataset

    @property
    def num_classes(self):
        return self.server.num_classes


def build_data(config):
    """Synthetic blobs split into server labels, K unlabeled clients and a test set."""
    total = config.K * config.samples_per_client + config.n_server + config.test_size
    per_class = math.ceil(total / config.num_classes)
    ds = data_mod.make_blobs(config.num_classes, config.dim, per_class, config.spread,
                             rng_for(config.seed, _DATA).integers(2**63), config.clusters_per_class)
    server, pool, test = data_mod.split_server_client(
        ds, config.n_server, config.test_size / ds.size, int(rng_for(config.seed, _DATA, 1).integers(2**63)))
    spec = data_mod.PartitionSpec(config.partition, config.K, int(rng_for(config.seed, _DATA, 2).integers(2**63)),
                                  config.alpha_dir, config.shards_per_client)
    return ExperimentData(server, data_mod.partition(pool, spec, config.num_classes), test)


@dataclass
class ClientState:
    id: int
    data: data_mod.UnlabeledSet
    compressions: int = 0
    descriptor: object = None


@dataclass
class ClientUpdate:
    client_id: int
    model: Network
    mask: object
    upload_params: int
    compressed: bool = False
    selected: int = 0


@dataclass
class ServerState:
    teacher: Network | None
    reference: Network
    labeled: data_mod.LabeledDataset
    models: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    round_index: int = 0

    def model_for(self, client_id):
        """The stored personalised model, or the initial global model if never served."""
        return self.models.get(client_id, self.reference)


@dataclass
class LedgerEntry:
    round: int
    client_id: int
    download: int
    upload: int
    conventional_download: int
    conventional_upload: int


@dataclass
class CommLedger:
    entries: list = field(default_factory=list)

    def record(self, entry):
        self.entries.append(entry)

    def total(self, key):
        return sum(getattr(e, key) for e in self.entries)

    def per_round(self, rounds):
        rows = []
        for r in range(1, rounds + 1):
            es = [e for e in self.entries if e.round == r]
            rows.append({"round": r,
                         "total_upload": sum(e.upload for e in es),
                         "total_download": sum(e.download for e in es),
                         "conventional_upload": sum(e.conventional_upload for e in es),
                         "conventional_download": sum(e.conventional_download for e in es)})
        return rows


def comm_saving_ratio(ledger, direction="upload"):
    """Percentage of traffic saved against the uncompressed baseline."""
    actual = ledger.total(direction)
    conventional = ledger.total("conventional_" + direction)
    if conventional == 0:
        raise UndefinedRatioError("conventional traffic total is zero")
    return (1.0 - actual / conventional) * 100.0


# --------------------------------------------------------------- evaluation


def client_accuracy(model, test, label_dist=None):
    """Accuracy on the test set, or its expectation under a client's label distribution."""
    pred = np.argmax(model.forward(test.features, "eval"), axis=1)
    correct = pred == test.labels
    if label_dist is None:
        return float(correct.mean())
    per_class = np.array([correct[test.labels == c].mean() if np.any(test.labels == c) else 0.0
                          for c in range(test.num_classes)])
    return float(np.dot(label_dist, per_class))


def evaluate(models, test, label_dists=None):
    """Per-client accuracies (dict) and their mean.

    ``label_dists`` maps client id to its class distribution for
    client-conditional evaluation; ``None`` evaluates everyone on the full set.
    """
    per_client = {k: client_accuracy(m, test, None if label_dists is None else label_dists[k])
                  for k, m in models.items()}
    mean = float(np.mean(list(per_client.values()))) if per_client else float("nan")
    return per_client, mean


# ------------------------------------------------------------ local update


def local_update(client, downloaded, config, round_index, rng):
    """Pseudo-label, optionally compress, gate by uncertainty and fine-tune."""
    if config.mode in ("full", "AS3", "AS4") and client.descriptor != downloaded.descriptor:
        raise ModeViolationError(f"client {client.id}: downloaded architecture differs from its own")
    x = client.data.features
    pseudo = pseudo_label(downloaded, x, config.uncertainty)
    model = downloaded
    compressed = (config.compresses and round_index in config.compression_schedule
                  and client.compressions < config.max_compressions)
    if compressed:
        if config.prune == CHANNEL:
            slim = fine_tune(model, pseudo, config.slim_epochs, config.local_lr, config.local_batch,
                             rng, config.momentum, bn_l1=config.slim_l1)
            model, _, _ = channel_prune(slim, config.gamma)
        else:
            model, _ = magnitude_prune(model, config.gamma)
        client.compressions += 1
    selected = select_confident(pseudo, config.delta)
    model = fine_tune(model, selected, config.local_epochs, config.local_lr, config.local_batch,
                      rng, config.momentum)
    client.descriptor = model.descriptor
    return ClientUpdate(client.id, model, mask_of(model, config.mask_kind), param_count(model),
                        compressed, len(selected))


# ----------------------------------------------------------- server update


def _same_shapes(models):
    shapes = [[p.shape for p in m.parameters()] for m in models]
    return all(s == shapes[0] for s in shapes)


def average_models(models, weights=None):
    """Elementwise (weighted) average of same-shape networks, running statistics included."""
    if not _same_shapes(models):
        raise ModeViolationError("cannot average networks of different shapes")
    w = np.full(len(models), 1.0 / len(models)) if weights is None else np.asarray(weights, float)
    w = w / w.sum()
    out = models[0].copy()
    out._velocity = None
    out.descriptor = None
    for i, layer in enumerate(out.layers):
        for name in ("weights", "biases", "scale", "shift", "running_mean", "running_var"):
            if hasattr(layer, name):
                setattr(layer, name, sum(wk * getattr(m.layers[i], name) for wk, m in zip(w, models)))
        if hasattr(layer, "live"):
            layer.live = None
    return out


def _distill_one(k, updates, state, config, round_index):
    leader = updates[k]
    others = [u for j, u in enumerate(updates) if j != k]
    beta = helper_weights(leader.mask, [u.mask for u in others])
    teacher = state.teacher if config.uses_teacher else None
    rng = rng_for(config.seed, _SERVER, round_index, leader.client_id)
    return collaborative_distill(leader.model, [u.model for u in others], beta, teacher, state.labeled,
                                 config.server_epochs, config.server_lr, config.server_batch,
                                 config.temperature, rng, config.ce_weight, config.helper_weight,
                                 config.teacher_weight, config.reverse_kl, config.momentum)


def server_update(state, updates, config, round_index, clients=None, workers=None):
    """Fuse the uploaded models into per-client (or global) server models."""
    if not updates:
        raise ValueError("server update needs at least one client upload")
    mode = config.mode
    if mode in ("AS1", "AS4") and not _same_shapes([u.model for u in updates]):
        raise ModeViolationError(f"{mode} requires homogeneous client architectures")

    if mode in ("full", "AS3", "AS4"):
        workers = config.workers if workers is None else workers
        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(lambda k: _distill_one(k, updates, state, config, round_index),
                                        range(len(updates))))
        else:
            results = [_distill_one(k, updates, state, config, round_index) for k in range(len(updates))]
        for u, model in zip(updates, results):
            state.models[u.client_id] = model
            state.masks[u.client_id] = mask_of(model, config.mask_kind)
        return state

    if mode == "AS1":
        sizes = [len(clients[u.client_id].data) for u in updates] if clients is not None else None
        merged = average_models([u.model for u in updates], sizes)
        rng = rng_for(config.seed, _SERVER, round_index, 0)
        merged = supervised_train(merged, state.labeled, config.server_epochs, config.server_lr,
                                  config.server_batch, rng, config.momentum)
    else:  # AS2
        merged = average_models([zero_fill_embed(u.model, state.reference) for u in updates])
    merged.descriptor = None
    for k in range(config.K):
        state.models[k] = merged
        state.masks[k] = mask_of(merged, config.mask_kind)
    return state


# ------------------------------------------------------------------ driver


@dataclass
class RoundRecord:
    round: int
    sampled: list
    mean_accuracy: float
    accuracy: dict
    upload_params: dict
    download_params: dict
    compressed: dict
    selected: dict
    retained_units: dict
    wall_time: float


@dataclass
class RunReport:
    config: dict
    init: dict
    rounds: list
    final: dict
    ledger: CommLedger

    def to_dict(self):
        return {"config": self.config, "init": self.init,
                "rounds": [asdict(r) for r in self.rounds], "final": self.final,
                "traffic": self.ledger.per_round(len(self.rounds))}


def initialize(config, data):
    """Step 0: pre-train the teacher and distil the initial lightweight model."""
    d, c = data.server.features.shape[1], data.num_classes
    teacher = None
    if config.uses_teacher:
        teacher = supervised_train(mlp(d, config.teacher_hidden, c, rng_for(config.seed, _TEACHER)),
                                   data.server, config.teacher_epochs, config.teacher_lr,
                                   config.server_batch, rng_for(config.seed, _TEACHER, 1))
    student = mlp(d, config.hidden, c, rng_for(config.seed, _STUDENT))
    reference = init_distill(student, teacher, data.server, config.init_epochs, config.init_lr,
                             config.server_batch, config.temperature, rng_for(config.seed, _INIT),
                             kl_weight=config.teacher_weight, ce_weight=config.ce_weight,
                             reverse_kl=config.reverse_kl)
    return ServerState(teacher, reference, data.server)


def sample_clients(config, round_index):
    rng = rng_for(config.seed, _SAMPLE, round_index)
    return sorted(int(k) for k in rng.choice(config.K, size=config.B, replace=False))


def run_round(state, clients, config, data, ledger, label_dists):
    r = state.round_index + 1
    start = time.perf_counter()
    sampled = sample_clients(config, r)
    conventional = param_count(state.reference)
    downloads = {k: state.model_for(k).copy() for k in sampled}

    def local(k):
        try:
            return local_update(clients[k], downloads[k], config, r, rng_for(config.seed, _LOCAL, r, k))
        except SemiFedError as exc:
            raise ProtocolError(r, k, exc) from exc

    if config.workers > 1:
        with ThreadPoolExecutor(config.workers) as pool:
            updates = list(pool.map(local, sampled))
    else:
        updates = [local(k) for k in sampled]
    for k, u in zip(sampled, updates):
        ledger.record(LedgerEntry(r, k, param_count(downloads[k]), u.upload_params,
                                  conventional, conventional))
    try:
        server_update(state, updates, config, r, clients)
    except SemiFedError as exc:
        raise ProtocolError(r, None, exc) from exc
    state.round_index = r

    models = {k: state.model_for(k) for k in sampled}
    acc, mean = evaluate(models, data.test, label_dists)
    return RoundRecord(
        round=r, sampled=sampled, mean_accuracy=mean, accuracy=acc,
        upload_params={u.client_id: u.upload_params for u in updates},
        download_params={k: param_count(downloads[k]) for k in sampled},
        compressed={u.client_id: u.compressed for u in updates},
        selected={u.client_id: u.selected for u in updates},
        retained_units={u.client_id: u.mask.retained_count for u in updates},
        wall_time=time.perf_counter() - start)


def run_experiment(config, data=None):
    """Initialise, run ``config.rounds`` federated rounds and evaluate every client."""
    data = build_data(config) if data is None else data
    if len(data.clients) != config.K:
        raise ConfigError("K", f"data holds {len(data.clients)} clients, config expects {config.K}")
    c = data.num_classes
    label_dists = None
    if config.eval_scope == "client":
        label_dists = {k: data_mod.label_distribution(cd, c) for k, cd in enumerate(data.clients)}
    state = initialize(config, data)
    clients = [ClientState(k, cd) for k, cd in enumerate(data.clients)]
    ledger = CommLedger()

    init = {"reference_params": param_count(state.reference),
            "reference_accuracy": client_accuracy(state.reference, data.test),
            "teacher_accuracy": None if state.teacher is None else client_accuracy(state.teacher, data.test),
            "teacher_params": None if state.teacher is None else param_count(state.teacher),
            "server_labeled": data.server.size,
            "client_sizes": [len(cd) for cd in data.clients]}
    records = [run_round(state, clients, config, data, ledger, label_dists) for _ in range(config.rounds)]

    final_models = {k: state.model_for(k) for k in range(config.K)}
    per_client, mean = evaluate(final_models, data.test, label_dists)
    final = {
        "final_mean_accuracy": mean,
        "per_client_accuracy": per_client,
        "per_client_params": {k: param_count(m) for k, m in final_models.items()},
        "per_client_retained": {k: mask_of(m, config.mask_kind).retained_count
                                for k, m in final_models.items()},
        "total_upload": ledger.total("upload"),
        "total_download": ledger.total("download"),
        "conventional_upload": ledger.total("conventional_upload"),
        "conventional_download": ledger.total("conventional_download"),
        "saving_ratio": comm_saving_ratio(ledger) if ledger.entries else 0.0,
        "download_saving_ratio": comm_saving_ratio(ledger, "download") if ledger.entries else 0.0,
        "compression_events": sum(cl.compressions for cl in clients),
        "eval_scope": config.eval_scope,
    }
    report = RunReport(config.to_dict(), init, records, final, ledger)
    report.state = state
    check_invariants(report, config)
    return report


def check_invariants(report, config):
    if len(report.rounds) != config.rounds:
        raise InvariantError("round record count differs from configured rounds")
    entries = report.ledger.entries
    for rec in report.rounds:
        es = [e for e in entries if e.round == rec.round]
        if sorted(e.client_id for e in es) != rec.sampled:
            raise InvariantError(f"round {rec.round}: ledger clients differ from sampled clients")
        for e in es:
            if e.upload != rec.upload_params[e.client_id] or e.download != rec.download_params[e.client_id]:
                raise InvariantError(f"round {rec.round}: ledger entry disagrees for client {e.client_id}")
    if entries:
        recomputed = (1 - sum(e.upload for e in entries) / sum(e.conventional_upload for e in entries)) * 100
        if abs(recomputed - report.final["saving_ratio"]) > 1e-9:
            raise InvariantError("saving ratio does not match ledger totals")
    if report.final["compression_events"] > config.K * config.max_compressions:
        raise InvariantError("compression budget exceeded")
