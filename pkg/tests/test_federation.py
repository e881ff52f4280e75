import dataclasses
import math

import numpy as np
import pytest

from fedgg.data import generate_blobs
from fedgg.federation import (
    METRICS_HEADER,
    ClientRunner,
    ClientTrainingError,
    DatasetSource,
    ExperimentConfig,
    ServerState,
    aggregate,
    derive_seed,
    read_metrics_csv,
    run_experiment,
    run_round,
    select_clients,
    write_metrics_csv,
)
from fedgg.model import MlpSpec, init_params
from fedgg.params import DimensionError, norm
from fedgg.strategies import ClientState, GlobalContext, TrainerConfig, local_train_fedavg

TINY = DatasetSource(num_classes=3, per_class=40, dim=2, separation=4.0)


def tiny(variant="fedavg", rounds=3, **kw):
    trainer = kw.pop("trainer", {})
    return ExperimentConfig(
        dataset=TINY, rounds=rounds, num_clients=kw.pop("num_clients", 4), hidden=(6,),
        trainer=TrainerConfig(variant=variant, batch_size=16, local_epochs=2, lr=0.05, **trainer), **kw)


# --- aggregate -----------------------------------------------------------------

def test_aggregate_hand_example():
    np.testing.assert_array_equal(aggregate([[0.0, 0.0], [3.0, 3.0]], [1, 2]), [2.0, 2.0])


def test_aggregate_three_clients_hand_values():
    models = [[1.0, -2.0, 0.5], [4.0, 0.0, 0.25], [-1.0, 6.0, 1.0]]
    # weights 0.2, 0.3, 0.5
    expected = [0.2 * 1 + 0.3 * 4 + 0.5 * -1, 0.2 * -2 + 0.3 * 0 + 0.5 * 6, 0.2 * 0.5 + 0.3 * 0.25 + 0.5 * 1]
    np.testing.assert_allclose(aggregate(models, [2, 3, 5]), expected, rtol=0, atol=1e-15)


def test_aggregate_fixed_point():
    w = np.random.default_rng(0).standard_normal(101)
    assert aggregate([w, w.copy(), w.copy()], [7, 1, 300]).tobytes() == w.tobytes()


def test_aggregate_weights_sum_to_one():
    sizes = [13, 7, 101, 1, 58]
    assert abs(math.fsum(s / sum(sizes) for s in sizes) - 1.0) <= 1e-15
    ones = [np.ones(4)] * len(sizes)
    np.testing.assert_array_equal(aggregate(ones, sizes), np.ones(4))


def test_aggregate_convexity():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        k, d = rng.integers(1, 8), rng.integers(1, 20)
        models = rng.standard_normal((k, d)) * 10.0 ** rng.integers(-3, 4)
        out = aggregate(list(models), list(rng.integers(1, 500, k)))
        assert np.all(out >= models.min(axis=0)) and np.all(out <= models.max(axis=0))


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([], [])
    with pytest.raises(DimensionError):
        aggregate([[1.0], [1.0, 2.0]], [1, 1])
    with pytest.raises(ValueError):
        aggregate([[1.0]], [0])


# --- client selection ------------------------------------------------------------

def test_select_all_and_deterministic():
    assert select_clients(7, 1.0, 3, 0) == list(range(7))
    assert select_clients(10, 0.3, 5, 9) == select_clients(10, 0.3, 5, 9)
    assert len(select_clients(10, 0.3, 5, 9)) == 3
    assert len(select_clients(10, 0.01, 0, 0)) == 1


def test_selection_frequency_concentrates():
    # Binomial(2000, 0.5) has sd ~22, so +-100 is about 4.5 sd.
    counts = np.zeros(10, dtype=int)
    for r in range(2000):
        counts[select_clients(10, 0.5, r, 123)] += 1
    assert np.all(np.abs(counts - 1000) <= 100)


def test_derived_seeds_differ_by_purpose():
    seeds = {derive_seed(0, p) for p in ("data", "split", "partition", "init", "clients", "select")}
    assert len(seeds) == 6


# --- rounds ---------------------------------------------------------------------

def round_fixture(cfg, num_clients=3):
    ds = generate_blobs(3, 30, 2, 4.0, np.random.default_rng(0))
    spec = MlpSpec((2, 5, 3))
    parts = np.array_split(np.arange(len(ds)), num_clients)
    clients = [ClientState(i, ix, seed=4) for i, ix in enumerate(parts)]
    w0 = init_params(spec, np.random.default_rng(1)).params
    return ds, spec, clients, w0


def test_round_with_zero_lr_keeps_model():
    cfg = TrainerConfig(lr=0.0, batch_size=8, local_epochs=1)
    ds, spec, clients, w0 = round_fixture(cfg)
    with ClientRunner(cfg, spec, ds) as runner:
        state, rec, _ = run_round(0, ServerState(w0), clients, runner, ds, [0, 1, 2])
    np.testing.assert_array_equal(state.w_curr, w0)
    assert rec.global_update_norm == 0.0


def test_single_client_round_is_that_clients_model():
    cfg = TrainerConfig(batch_size=8, local_epochs=1)
    ds, spec, clients, w0 = round_fixture(cfg, num_clients=1)
    expected = local_train_fedavg(clients[0], GlobalContext(0, w0), cfg, spec, ds).params
    with ClientRunner(cfg, spec, ds) as runner:
        state, _, _ = run_round(0, ServerState(w0), clients, runner, ds, [0])
    assert state.w_curr.tobytes() == expected.tobytes()


def test_scaffold_server_control_is_mean_of_client_controls():
    cfg = TrainerConfig(variant="scaffold", batch_size=8, local_epochs=1, lr=0.05)
    ds, spec, clients, w0 = round_fixture(cfg)
    for c in clients:
        c.control_variate = np.zeros_like(w0)
    state = ServerState(w0, c=np.zeros_like(w0))
    with ClientRunner(cfg, spec, ds) as runner:
        for r in range(2):
            state, _, _ = run_round(r, state, clients, runner, ds, [0, 1, 2])
            mean_ci = sum(c.control_variate for c in clients) / 3
            np.testing.assert_allclose(state.c, mean_ci, rtol=0, atol=1e-15)
    assert norm(state.c) > 0


def test_client_failures_name_the_client():
    cfg = TrainerConfig(batch_size=8, local_epochs=1)
    ds, spec, clients, w0 = round_fixture(cfg)
    clients[1].indices = np.array([10_000])
    with ClientRunner(cfg, spec, ds) as runner, pytest.raises(ClientTrainingError, match="client 1"):
        run_round(0, ServerState(w0), clients, runner, ds, [0, 1, 2])


def test_guidance_direction_is_last_global_update():
    states, seen = [], []

    def observer(r, record, results, state):
        seen.append((r, {cid: res.stats.direction_norm for cid, res in results.items()}))
        states.append(state)

    run_experiment(tiny("fedgg", rounds=4, trainer={"mu": 0.5}), observer=observer)
    assert all(v is None for v in seen[0][1].values())
    for r in range(1, 4):
        # The state after round r-1 holds w^r (current) and w^{r-1} (previous).
        expected = norm(states[r - 1].w_curr - states[r - 1].w_prev)
        for value in seen[r][1].values():
            assert value == expected


def test_partial_participation_direction_spans_absence():
    cfg = tiny("fedgg", rounds=6, trainer={"mu": 0.5}, participation=0.5)
    history, seen = [], []

    def observer(r, record, results, state):
        history.append(state.w_prev)  # w^r for round r
        seen.append({cid: res.stats.direction_norm for cid, res in results.items()})

    run_experiment(cfg, observer=observer)
    last_round = {}
    for r, directions in enumerate(seen):
        for cid, value in directions.items():
            if cid not in last_round:
                assert value is None
            else:
                assert value == norm(history[r] - history[last_round[cid]])
            last_round[cid] = r


# --- experiments ----------------------------------------------------------------

def test_single_round_experiment():
    recs = run_experiment(tiny(rounds=1))
    assert len(recs) == 1 and recs[0].round == 0
    assert all(math.isfinite(getattr(recs[0], f)) for f in METRICS_HEADER)


def test_experiment_csv_is_deterministic(tmp_path):
    for name in ("a.csv", "b.csv"):
        write_metrics_csv(run_experiment(tiny("fedgg", trainer={"mu": 0.3})), tmp_path / name)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_fedgg_mu_zero_experiment_equals_fedavg():
    avg = run_experiment(tiny("fedavg"))
    gg = run_experiment(tiny("fedgg", trainer={"mu": 0.0}))
    assert avg == gg


def test_single_client_learns_separated_blobs():
    cfg = dataclasses.replace(tiny(rounds=30, num_clients=1),
                              dataset=DatasetSource(num_classes=4, per_class=200, separation=6.0))
    assert run_experiment(cfg)[-1].test_accuracy > 0.9


def test_metrics_round_trip(tmp_path):
    recs = run_experiment(tiny("scaffold"))
    write_metrics_csv(recs, tmp_path / "m.csv")
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(METRICS_HEADER)
    assert read_metrics_csv(tmp_path / "m.csv") == recs


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig(beta=-1)
    with pytest.raises(ValueError):
        ExperimentConfig(participation=0)
