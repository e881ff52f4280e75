"""Server-side orchestration: client sampling, aggregation and the round loop."""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields

import numpy as np

from fedgg import data as data_mod
from fedgg.model import MlpSpec, ModelState, evaluate, init_params
from fedgg.params import DimensionError, norm, sub
from fedgg.strategies import ClientState, GlobalContext, LocalResult, TrainerConfig, local_train

METRICS_HEADER = ["round", "test_accuracy", "mean_train_loss", "global_update_norm", "mean_lambda", "wall_ms"]

# Tags that keep the independent random streams derived from one master seed apart.
_SEED_TAGS = {"data": 1, "split": 2, "partition": 3, "init": 4, "clients": 5, "select": 6}


class ClientTrainingError(RuntimeError):
    def __init__(self, client_id: int, cause: BaseException):
        super().__init__(f"client {client_id}: {type(cause).__name__}: {cause}")
        self.client_id = client_id


def derive_seed(master_seed: int, purpose: str) -> int:
    ss = np.random.SeedSequence([int(master_seed), _SEED_TAGS[purpose]])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(frozen=True)
class DatasetSource:
    kind: str = "blobs"
    num_classes: int = 4
    per_class: int = 500
    dim: int = 2
    separation: float = 4.0
    path: str | None = None
    eval_path: str | None = None
    test_fraction: float = 0.2
    seed: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSource = field(default_factory=DatasetSource)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    rounds: int = 100
    num_clients: int = 10
    participation: float = 1.0
    beta: float = 0.5
    partition_seed: int | None = None
    hidden: tuple[int, ...] = (32,)
    seed: int = 0
    record_timing: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.num_clients < 1:
            raise ValueError("rounds and num_clients must be >= 1")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must lie in (0, 1]")
        if not self.beta > 0:
            raise ValueError("beta must be > 0")

    def seed_for(self, purpose: str) -> int:
        explicit = {"data": self.dataset.seed, "partition": self.partition_seed}.get(purpose)
        return explicit if explicit is not None else derive_seed(self.seed, purpose)


@dataclass(frozen=True)
class RoundRecord:
    round: int
    test_accuracy: float
    mean_train_loss: float
    global_update_norm: float
    mean_lambda: float
    wall_ms: float


@dataclass
class ServerState:
    w_curr: np.ndarray
    w_prev: np.ndarray | None = None
    c: np.ndarray | None = None


def aggregate(models, sizes) -> np.ndarray:
    """Size-weighted model average, summed in the given (ascending id) order.

    The result is clipped to the coordinate-wise range of the inputs so that
    rounding can never push it outside the convex hull.
    """
    if len(models) == 0:
        raise ValueError("cannot aggregate an empty list of models")
    if len(models) != len(sizes):
        raise ValueError("models and sizes differ in length")
    if len({np.size(m) for m in models}) != 1:
        raise DimensionError("client models have different lengths")
    stack = np.array([np.asarray(m, dtype=np.float64).reshape(-1) for m in models])
    if any(s <= 0 for s in sizes):
        raise ValueError("client sizes must be positive")
    total = float(sum(sizes))
    out = np.zeros(stack.shape[1])
    for model, size in zip(stack, sizes):
        out += (size / total) * model
    return np.clip(out, stack.min(axis=0), stack.max(axis=0))


def select_clients(num_clients: int, fraction: float, round_idx: int, master_seed: int) -> list[int]:
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    # The small slack keeps e.g. 0.3 * 10 from rounding up to 4.
    k = min(num_clients, max(1, math.ceil(fraction * num_clients - 1e-9)))
    if k == num_clients:
        return list(range(num_clients))
    rng = np.random.default_rng([derive_seed(master_seed, "select"), round_idx])
    return sorted(int(i) for i in rng.choice(num_clients, size=k, replace=False))


# Worker-process globals, set once per pool by _init_worker.
_WORKER: dict = {}


def _init_worker(cfg, spec, dataset):
    _WORKER.update(cfg=cfg, spec=spec, dataset=dataset)


def _train_one(client: ClientState, ctx: GlobalContext) -> LocalResult:
    return local_train(client, ctx, _WORKER["cfg"], _WORKER["spec"], _WORKER["dataset"])


class ClientRunner:
    """Runs a round's local training serially or on a process pool.

    Results are always returned in participant order, so the downstream
    reduction does not depend on which worker finished first.
    """

    def __init__(self, cfg: TrainerConfig, spec: MlpSpec, dataset, jobs: int = 1):
        self.cfg, self.spec, self.dataset = cfg, spec, dataset
        self.jobs = max(1, int(jobs))
        self._pool = None
        if self.jobs > 1:
            self._pool = ProcessPoolExecutor(self.jobs, initializer=_init_worker,
                                             initargs=(cfg, spec, dataset))

    def run(self, tasks: list[tuple[ClientState, GlobalContext]]) -> list[LocalResult]:
        if self._pool is None:
            out = []
            for client, ctx in tasks:
                try:
                    out.append(local_train(client, ctx, self.cfg, self.spec, self.dataset))
                except Exception as exc:
                    raise ClientTrainingError(client.id, exc) from exc
            return out
        futures = [(client.id, self._pool.submit(_train_one, client, ctx)) for client, ctx in tasks]
        out = []
        for cid, fut in futures:
            try:
                out.append(fut.result())
            except Exception as exc:
                raise ClientTrainingError(cid, exc) from exc
        return out

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_round(r: int, state: ServerState, clients: list[ClientState], runner: ClientRunner,
              test_set, participants: list[int], record_timing: bool = False):
    """One communication round. Mutates ``clients`` and returns the new server state.

    Returns ``(new_state, record, results)`` where ``results`` maps client id to
    its :class:`LocalResult`.
    """
    t0 = time.perf_counter()
    tasks = []
    for cid in participants:
        client = clients[cid]
        # The guidance direction uses the model this client saw last time, so
        # it is captured before the current broadcast overwrites it.
        ctx = GlobalContext(round=r, w_curr=state.w_curr, w_prev=client.last_received_global, c=state.c)
        client.last_received_global = state.w_curr
        tasks.append((client, ctx))

    results = runner.run(tasks)

    w_next = aggregate([res.params for res in results], [clients[cid].indices.size for cid in participants])
    c_next = state.c
    if runner.cfg.variant == "scaffold":
        delta = np.zeros_like(state.w_curr)
        for cid, res in zip(participants, results):
            clients[cid].control_variate = res.control_variate
            delta += res.delta_c
        c_next = (state.c if state.c is not None else np.zeros_like(delta)) + delta / len(clients)

    new_state = ServerState(w_curr=w_next, w_prev=state.w_curr, c=c_next)
    acc = evaluate(ModelState(runner.spec, w_next), test_set)
    mean_loss = math.fsum(res.stats.mean_loss for res in results) / len(results)
    mean_lam = math.fsum(res.stats.mean_lambda for res in results) / len(results)
    wall = (time.perf_counter() - t0) * 1000.0
    record = RoundRecord(
        round=r,
        test_accuracy=acc,
        mean_train_loss=mean_loss,
        global_update_norm=norm(sub(w_next, state.w_curr)),
        mean_lambda=mean_lam,
        wall_ms=wall if record_timing else 0.0,
    )
    return new_state, record, dict(zip(participants, results))


def build_data(config: ExperimentConfig):
    """Return ``(train_set, test_set)`` for a config."""
    src = config.dataset
    if src.kind == "blobs":
        full = data_mod.generate_blobs(src.num_classes, src.per_class, src.dim, src.separation,
                                       np.random.default_rng(config.seed_for("data")))
    elif src.kind == "csv":
        full = data_mod.load_csv(src.path)
    else:
        raise ValueError(f"unknown dataset kind {src.kind!r}")
    if src.eval_path:
        test = data_mod.load_csv(src.eval_path)
        if test.dim != full.dim or test.num_classes > full.num_classes:
            raise data_mod.DataError("eval dataset does not match the training dataset")
        return full, test
    return data_mod.train_test_split(full, src.test_fraction,
                                     np.random.default_rng(config.seed_for("split")))


def run_experiment(config: ExperimentConfig, jobs: int = 1, observer=None) -> list[RoundRecord]:
    """Run every round of ``config`` and return one record per round.

    ``observer(round, record, results, state)`` is called after each round
    if given; ``results`` maps participant id to :class:`LocalResult`.
    """
    train, test = build_data(config)
    plan = data_mod.dirichlet_partition(train, config.num_clients, config.beta,
                                        np.random.default_rng(config.seed_for("partition")))
    spec = MlpSpec((train.dim, *config.hidden, train.num_classes))
    w0 = init_params(spec, np.random.default_rng(config.seed_for("init"))).params
    client_seed = config.seed_for("clients")
    clients = [ClientState(id=i, indices=ix, seed=client_seed) for i, ix in enumerate(plan.client_indices)]
    state = ServerState(w_curr=w0, c=np.zeros_like(w0) if config.trainer.variant == "scaffold" else None)
    if config.trainer.variant == "scaffold":
        for client in clients:
            client.control_variate = np.zeros_like(w0)

    records = []
    with ClientRunner(config.trainer, spec, train, jobs) as runner:
        for r in range(config.rounds):
            participants = select_clients(config.num_clients, config.participation, r, config.seed)
            state, record, results = run_round(r, state, clients, runner, test, participants,
                                               config.record_timing)
            records.append(record)
            if observer is not None:
                observer(r, record, results, state)
    return records


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    return f"{value:.17g}"


def write_metrics_csv(records: list[RoundRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for rec in records:
            w.writerow([_fmt(getattr(rec, name)) for name in METRICS_HEADER])


def read_metrics_csv(path) -> list[RoundRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        types = {f.name: f.type for f in fields(RoundRecord)}
        out = []
        for row in reader:
            out.append(RoundRecord(**{k: (int(v) if types[k] in (int, "int") else float(v))
                                      for k, v in row.items()}))
    return out
