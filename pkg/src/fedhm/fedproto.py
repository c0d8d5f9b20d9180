"""Federated protocol: server loop, local training, aggregation rules.

Three methods share one round loop:

* ``fedhm`` - the server factorizes the global model once per rank ratio
  present in the round, clients train their factorized copies with
  Frobenius decay, and the server recovers full-rank weights and averages
  them with softmax(ratio / tau) weights.
* ``fedavg`` - every client trains the full model; data-size weighted mean.
* ``heterofl-channel`` - clients train leading-channel slices of the global
  model; each coordinate is averaged over the clients that hold it. Static
  batch norm and masked cross-entropy are not included, so this is a lower
  bound on the original baseline.

The server side only ever handles :class:`~fedhm.modelspec.Model` objects and
sample counts. Client data stays behind :class:`Client`.
"""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import accounting
from . import modelspec as ms
from .data import Dataset
from .metrics import RoundRecord, evaluate_top1
from .network import Network
from .tensor_nn import SgdState, sgd_step, softmax_cross_entropy

log = logging.getLogger(__name__)

METHODS = ("fedhm", "fedavg", "heterofl-channel")


class RoundError(RuntimeError):
    """A client failed; the simulation stops."""


# ---------------------------------------------------------------------------
# clients


@dataclass(frozen=True)
class ClientProfile:
    client_id: int
    level: int


class Client:
    """Holds one client's private data; only ``train`` touches it."""

    def __init__(self, client_id: int, dataset: Dataset):
        if len(dataset) == 0:
            raise ValueError(f"client {client_id} has no data")
        self.client_id = client_id
        self._data = dataset

    @property
    def num_samples(self) -> int:
        return len(self._data)

    def train(self, model: ms.Model, epochs: int, sgd: SgdState, batch_size: int, seed) -> ms.Model:
        rng = np.random.default_rng(seed)
        return local_update(model, self._data, epochs, sgd, batch_size=batch_size, rng=rng)


def local_update(
    model: ms.Model,
    dataset: Dataset,
    epochs: int,
    sgd: SgdState,
    batch_size: int = 64,
    rng: np.random.Generator | None = None,
    losses: list | None = None,
) -> ms.Model:
    """E epochs of mini-batch SGD on a private copy of ``model``.

    Samples are reshuffled each epoch when ``rng`` is given. Mean epoch losses
    are appended to ``losses`` if provided.
    """
    if len(dataset) == 0:
        raise ValueError("empty client dataset")
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    model = model.copy()
    net = Network(model.spec)
    dtype = model.dtype
    N = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(N) if rng is not None else np.arange(N)
        total = 0.0
        for start in range(0, N, batch_size):
            idx = order[start : start + batch_size]
            x = dataset.features[idx].astype(dtype, copy=False)
            logits = net.forward(model, x, train=True)
            loss, dlogits = softmax_cross_entropy(logits, dataset.labels[idx])
            grads, _ = net.backward(dlogits.astype(dtype, copy=False))
            sgd_step(model.params, grads, sgd)
            total += loss * len(idx)
        if losses is not None:
            losses.append(total / N)
    return model


# ---------------------------------------------------------------------------
# capability schedules


@dataclass(frozen=True)
class CapabilitySchedule:
    """Levels are 1-based indices into the configured ratio list."""

    mode: str  # "fixed" | "dynamic"
    num_levels: int
    assignment: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "dynamic"):
            raise ValueError(f"schedule mode must be fixed or dynamic, got {self.mode!r}")
        if self.num_levels < 1:
            raise ValueError("need at least one capability level")
        if self.assignment is not None and any(not 1 <= a <= self.num_levels for a in self.assignment):
            raise ValueError(f"assignment levels must be in [1, {self.num_levels}]")


def resolve_capabilities(schedule: CapabilitySchedule, round_idx: int, num_clients: int) -> np.ndarray:
    if schedule.mode == "fixed":
        if schedule.assignment is not None:
            if len(schedule.assignment) != num_clients:
                raise ValueError(f"assignment lists {len(schedule.assignment)} clients, expected {num_clients}")
            return np.asarray(schedule.assignment, dtype=np.int64)
        return np.arange(num_clients) % schedule.num_levels + 1
    rng = np.random.default_rng([schedule.seed, round_idx, 0xCA9])
    return rng.integers(1, schedule.num_levels + 1, size=num_clients)


def sample_participants(num_clients: int, fraction: float, seed: int, round_idx: int) -> np.ndarray:
    k = max(1, int(round(fraction * num_clients)))
    rng = np.random.default_rng([seed, round_idx])
    return np.sort(rng.choice(num_clients, size=k, replace=False))


# ---------------------------------------------------------------------------
# aggregation


def _check_same_spec(models):
    if not models:
        raise ValueError("nothing to aggregate")
    spec = models[0].spec
    for m in models[1:]:
        if m.spec != spec:
            raise ms.SpecError("cannot aggregate models with different specs")


def weighted_average(models: list[ms.Model], weights=None) -> ms.Model:
    """Parameter-wise sum over models in the given order.

    ``weights=None`` is the plain mean (sum, then divide by the count).
    """
    _check_same_spec(models)
    first = models[0]
    out = ms.Model(first.spec, {}, {})
    for group in ("params", "buffers"):
        dst = getattr(out, group)
        for key, base in getattr(first, group).items():
            if weights is None:
                acc = base.copy()
                for m in models[1:]:
                    acc += getattr(m, group)[key]
                acc /= len(models)
            else:
                acc = base * base.dtype.type(weights[0])
                for w, m in zip(weights[1:], models[1:]):
                    acc += base.dtype.type(w) * getattr(m, group)[key]
            dst[key] = acc
    return out


def aggregation_weights(ratios, tau: float) -> np.ndarray:
    """softmax(ratio / tau); uniform when tau is infinite."""
    g = np.asarray(ratios, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    if math.isinf(tau):
        return np.full(len(g), 1.0 / len(g))
    z = np.exp((g - g.max()) / tau)
    return z / z.sum()


def aggregate(models: list[ms.Model], ratios, tau: float) -> ms.Model:
    """Softmax-temperature weighted average of recovered full-rank models."""
    if len(models) != len(ratios):
        raise ValueError("one ratio per model required")
    if math.isinf(tau):
        return weighted_average(models)
    return weighted_average(models, aggregation_weights(ratios, tau))


def fedavg_round(models: list[ms.Model], sizes) -> ms.Model:
    """Data-size weighted mean; the plain mean when all sizes are equal."""
    sizes = [int(s) for s in sizes]
    if len(sizes) != len(models):
        raise ValueError("one size per model required")
    if len(set(sizes)) == 1:
        return weighted_average(models)
    total = sum(sizes)
    return weighted_average(models, [s / total for s in sizes])


def heterofl_aggregate(global_model: ms.Model, slim_models: list[ms.Model]) -> ms.Model:
    """Average each coordinate over the client models whose leading slice covers it.

    Coordinates no client covers keep their value from ``global_model``.
    """
    out = global_model.copy()
    for group in ("params", "buffers"):
        for key, g in getattr(out, group).items():
            total = np.zeros(g.shape, dtype=np.float64)
            count = np.zeros(g.shape, dtype=np.int64)
            for m in slim_models:
                t = getattr(m, group).get(key)
                if t is None or t.ndim != g.ndim or any(s > f for s, f in zip(t.shape, g.shape)):
                    raise ms.SpecError(f"{key}: client tensor is not a nested slice of {g.shape}")
                region = tuple(slice(0, s) for s in t.shape)
                total[region] += t
                count[region] += 1
            covered = count > 0
            g[covered] = (total[covered] / count[covered]).astype(g.dtype)
    return out


# ---------------------------------------------------------------------------
# methods


class _FedHM:
    def __init__(self, spec, ratios, rho, tau, factorize_stem=False, factorize_classifier=False):
        self.spec, self.ratios, self.rho, self.tau = spec, list(ratios), rho, tau
        self.stem, self.classifier = factorize_stem, factorize_classifier

    def plan(self, level):
        return ms.HybridPlan(self.rho, self.ratios[level - 1], self.stem, self.classifier)

    def level_spec(self, level):
        if self.ratios[level - 1] == 1.0:
            return self.spec
        return ms.make_hybrid(self.spec, self.plan(level))

    def level_model(self, global_model, level):
        if self.ratios[level - 1] == 1.0:
            return global_model.copy()
        return ms.factorize_model(global_model, self.plan(level))

    def combine(self, global_model, results, levels, sizes):
        recovered = [ms.recover_model(m) for m in results]
        return aggregate(recovered, [self.ratios[lv - 1] for lv in levels], self.tau)


class _FedAvg:
    def __init__(self, spec):
        self.spec, self.ratios = spec, [1.0]

    def level_spec(self, level):
        return self.spec

    def level_model(self, global_model, level):
        return global_model.copy()

    def combine(self, global_model, results, levels, sizes):
        return fedavg_round(results, sizes)


class _HeteroFLChannel:
    def __init__(self, spec, widths):
        self.spec, self.ratios = spec, list(widths)
        self._specs = {i + 1: ms.width_slim(spec, w) for i, w in enumerate(widths)}

    def level_spec(self, level):
        return self._specs[level]

    def level_model(self, global_model, level):
        return ms.slice_model(global_model, self._specs[level])

    def combine(self, global_model, results, levels, sizes):
        return heterofl_aggregate(global_model, results)


@dataclass
class FedConfig:
    method: str = "fedhm"
    rounds: int = 1
    fraction: float = 0.5
    local_epochs: int = 10
    batch_size: int = 64
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    frobenius_decay: float = 1e-4
    rank_ratios: list = field(default_factory=lambda: [0.5])
    width_ratios: list = field(default_factory=lambda: [1.0, 0.5])
    rho: int = 0
    factorize_stem: bool = False
    factorize_classifier: bool = False
    tau: float = math.inf
    schedule: str = "fixed"
    assignment: tuple | None = None
    seed_sample: int = 0
    seed_data: int = 0
    threads: int = 0
    timing: bool = False


@dataclass
class RunResult:
    model: ms.Model
    records: list[RoundRecord]
    participants: list[list[ClientProfile]]


def make_method(spec: ms.ModelSpec, cfg: FedConfig):
    if cfg.method == "fedhm":
        return _FedHM(spec, cfg.rank_ratios, cfg.rho, cfg.tau, cfg.factorize_stem, cfg.factorize_classifier)
    if cfg.method == "fedavg":
        return _FedAvg(spec)
    if cfg.method == "heterofl-channel":
        return _HeteroFLChannel(spec, cfg.width_ratios)
    raise ValueError(f"unknown method {cfg.method!r}")


def server_execute(
    init_model: ms.Model,
    clients: list[Client],
    cfg: FedConfig,
    test: Dataset | None = None,
) -> RunResult:
    """Run ``cfg.rounds`` rounds and return the final global model with per-round records."""
    method = make_method(init_model.spec, cfg)
    schedule = CapabilitySchedule(cfg.schedule, len(method.ratios), cfg.assignment, cfg.seed_sample)
    sgd_args = dict(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay, frobenius_decay=cfg.frobenius_decay)
    P = len(clients)
    levels_all = range(1, len(method.ratios) + 1)
    level_specs = {lv: method.level_spec(lv) for lv in levels_all}
    full_spec = init_model.spec
    sample_shape = full_spec.input_shape
    fwd_macs = {lv: accounting.count_macs(s, sample_shape) for lv, s in level_specs.items()}
    cum_macs = {lv: 0 for lv in levels_all}

    model = init_model
    records: list[RoundRecord] = []
    history: list[list[ClientProfile]] = []
    for t in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        caps = resolve_capabilities(schedule, t, P)
        chosen = sample_participants(P, cfg.fraction, cfg.seed_sample, t)
        profiles = [ClientProfile(int(c), int(caps[c])) for c in chosen]
        history.append(profiles)
        dispatch = {lv: method.level_model(model, lv) for lv in sorted({p.level for p in profiles})}

        def work(profile):
            client = clients[profile.client_id]
            try:
                return client.train(
                    dispatch[profile.level], cfg.local_epochs, SgdState(**sgd_args), cfg.batch_size,
                    (cfg.seed_data, t, profile.client_id),
                )
            except Exception as exc:
                raise RoundError(f"round {t}: client {profile.client_id} failed: {exc}") from exc

        if cfg.threads > 0 and len(profiles) > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
                trained = list(pool.map(work, profiles))
        else:
            trained = [work(p) for p in profiles]

        sizes = [clients[p.client_id].num_samples for p in profiles]
        model = method.combine(model, trained, [p.level for p in profiles], sizes)

        transfers = {lv: 0 for lv in levels_all}
        for p, n in zip(profiles, sizes):
            transfers[p.level] += 1
            cum_macs[p.level] += fwd_macs[p.level] * n * cfg.local_epochs
        seconds = time.perf_counter() - started if cfg.timing else 0.0

        round_records = []
        for lv in levels_all:
            nbytes = transfers[lv] * accounting.comm_bytes(level_specs[lv])
            acc = float("nan")
            if test is not None:
                acc = evaluate_top1(method.level_model(model, lv), test)
            round_records.append(
                RoundRecord(t, lv, accounting.count_params(level_specs[lv]), acc, nbytes, nbytes, cum_macs[lv], seconds,
                            ratio=method.ratios[lv - 1], transfers=transfers[lv])
            )
        g_acc = evaluate_top1(model, test) if test is not None else float("nan")
        records.append(
            RoundRecord(t, 0, accounting.count_params(full_spec), g_acc,
                        sum(r.bytes_up for r in round_records), sum(r.bytes_down for r in round_records),
                        sum(cum_macs.values()), seconds, ratio=1.0, transfers=len(profiles))
        )
        records.extend(round_records)
        log.info("round %d: global acc %.4f, participants %s", t, g_acc, [p.client_id for p in profiles])
    return RunResult(model, records, history)
