import math
from dataclasses import replace

import numpy as np
import pytest

from fedtrip.errors import ConfigError
from fedtrip.federation import (
    ClientState,
    Federation,
    FederationConfig,
    aggregate,
    aggregation_weights,
    epoch_orders,
    load_checkpoint,
    local_train,
    metrics_csv,
    read_metrics_csv,
    run_federation,
    save_checkpoint,
    select_clients,
    xi_value,
)
from fedtrip.nn import Dataset, MlpSpec, ParamVector, SgdmState, init_params, loss_and_grad, sgdm_step
from fedtrip.partition import PartitionSpec, partition

V = ParamVector.flat


def small_cfg(**kw):
    base = dict(n_clients=6, clients_per_round=3, rounds=5, batch_size=20, seed=3)
    base.update(kw)
    return FederationConfig(**base)


@pytest.fixture
def setup(blobs):
    train, test = blobs
    part = partition(train.labels, 6, PartitionSpec("dirichlet", alpha=0.3, samples_per_client=100, seed=1))
    spec = MlpSpec(train.dim, (16,), 10)
    return part, train, test, spec


def test_select_all_when_k_equals_n():
    assert select_clients(7, 7, seed=1, round=3) == list(range(7))


def test_select_is_deterministic_and_sized():
    a = select_clients(10, 4, seed=9, round=5)
    assert a == select_clients(10, 4, seed=9, round=5)
    assert len(set(a)) == 4 and all(0 <= i < 10 for i in a)


def test_select_k_greater_than_n():
    with pytest.raises(ConfigError):
        select_clients(3, 4, 0, 1)


def test_selection_frequency_monte_carlo():
    counts = np.zeros(10)
    for r in range(100_000):
        counts[select_clients(10, 4, seed=0, round=r)] += 1
    np.testing.assert_allclose(counts / 100_000, 0.4, atol=0.005)


def test_xi_value_examples():
    assert xi_value(5, 4) == 1.0
    assert xi_value(9, 5) == 0.25
    assert xi_value(9, 5, "constant", 0.3) == 0.3
    with pytest.raises(ValueError):
        xi_value(4, 4)


def test_xi_mean_under_bernoulli_participation():
    rng = np.random.default_rng(11)
    p = 0.4
    xs = []
    last = None
    for t in range(100_000):
        if rng.random() < p:
            if last is not None and t >= 100:
                xs.append(xi_value(t, last))
            last = t
    expected = p * math.log(p) / (p - 1)
    assert expected == pytest.approx(0.6109, abs=1e-4)
    assert abs(np.mean(xs) - expected) / expected < 0.02


def test_config_validation():
    with pytest.raises(ConfigError):
        FederationConfig(n_clients=3, clients_per_round=4)
    with pytest.raises(ConfigError):
        FederationConfig(xi_mode="interval")
    with pytest.raises(ConfigError):
        FederationConfig.from_dict({"n_clients": 10, "learning_rate": 0.1})
    cfg = FederationConfig()
    assert (cfg.rounds, cfg.batch_size, cfg.local_epochs, cfg.clients_per_round, cfg.n_clients) == (100, 50, 1, 4, 10)
    assert (cfg.lr, cfg.momentum) == (0.01, 0.9)
    assert FederationConfig.from_dict(cfg.to_dict()) == cfg


def test_local_train_mu_zero_fedtrip_equals_fedavg(setup):
    part, train, _, spec = setup
    w0 = init_params(spec, np.random.default_rng(0))
    hist = init_params(spec, np.random.default_rng(1))
    client = ClientState(2, part.shards[2], hist_model=hist, last_round=1)
    a, la = local_train(client, w0, small_cfg(method="fedtrip", mu=0.0), 3, spec, train)
    b, lb = local_train(client, w0, small_cfg(method="fedavg", mu=0.0), 3, spec, train)
    assert a.values.tobytes() == b.values.tobytes() and la == lb


def test_local_train_zero_epochs_returns_global(setup):
    part, train, _, spec = setup
    w0 = init_params(spec, np.random.default_rng(0))
    w, loss = local_train(ClientState(0, part.shards[0]), w0, small_cfg(local_epochs=0), 1, spec, train)
    assert w.values.tobytes() == w0.values.tobytes()
    assert math.isnan(loss)


def test_local_train_empty_shard(setup):
    _, train, _, spec = setup
    with pytest.raises(ConfigError):
        local_train(ClientState(0, np.array([], dtype=int)), init_params(spec, np.random.default_rng(0)),
                    small_cfg(), 1, spec, train)


def test_local_train_single_full_batch_step_closed_form():
    # Softmax regression on one sample x = 1, label 0, from zero weights:
    # p = (1/2, 1/2), dL/dW = dL/db = (-1/2, 1/2).
    spec = MlpSpec(1, (), 2)
    data = Dataset(np.array([[1.0]]), np.array([0]), 2)
    wg = ParamVector.zeros(spec.layout)
    wh = ParamVector(np.array([0.2, -0.4, 1.0, 0.0]), spec.layout)
    mu, xi, lr = 0.5, 0.5, 0.1  # client last seen 2 rounds ago -> xi = 1/2
    cfg = FederationConfig(n_clients=1, clients_per_round=1, batch_size=1, lr=lr, momentum=0.9,
                           method="fedtrip", mu=mu)
    client = ClientState(0, np.array([0]), hist_model=wh, last_round=3)
    w, loss = local_train(client, wg, cfg, 5, spec, data)
    g = np.array([-0.5, 0.5, -0.5, 0.5])
    h = g + mu * xi * (wh.values - wg.values)  # w_local == w_global on the first step
    np.testing.assert_allclose(w.values, wg.values - lr * h, rtol=1e-15, atol=1e-17)
    assert loss == pytest.approx(math.log(2), rel=1e-15)


def test_aggregate_examples():
    m = V([1.0, -2.0])
    np.testing.assert_array_equal(aggregate([m, m, m], [0.2, 0.3, 0.5]).values, m.values)
    assert aggregate([V([0.0]), V([2.0])], [0.5, 0.5]).values[0] == 1.0
    with pytest.raises(ConfigError):
        aggregate([V([0.0]), V([2.0])], [0.5, 0.6])
    with pytest.raises(ConfigError):
        aggregate([V([0.0]), V([2.0])], [1.5, -0.5])


def test_data_size_weights_with_equal_shards_are_uniform():
    assert aggregation_weights([600] * 4, "data_size") == [0.25] * 4
    assert aggregation_weights([100, 300], "data_size") == [0.25, 0.75]
    assert aggregation_weights([100, 300], "uniform") == [0.5, 0.5]


def test_single_client_fedavg_is_centralized_sgdm(setup):
    _, train, test, spec = setup
    shard = np.arange(0, 3000, 7)
    from fedtrip.partition import PartitionResult

    part = PartitionResult([shard], np.zeros((1, 10)))
    cfg = FederationConfig(n_clients=1, clients_per_round=1, rounds=1, local_epochs=3,
                           batch_size=32, method="fedavg", mu=0.0, seed=4)
    fed = Federation(cfg, part, train, test, spec)
    w = fed.global_model
    fed.run()
    state = SgdmState.fresh(w, cfg.lr, cfg.momentum)
    for order in epoch_orders(shard, cfg, 0, 1):
        for s in range(0, order.size, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            _, g = loss_and_grad(spec, w, train.features[idx], train.labels[idx])
            w, state = sgdm_step(w, g, state)
    assert fed.global_model.values.tobytes() == w.values.tobytes()


def test_run_is_deterministic(setup):
    part, train, test, spec = setup
    cfg = small_cfg(method="fedtrip", mu=1.0)
    a = run_federation(cfg, part, train, test, spec)
    b = run_federation(cfg, part, train, test, spec)
    assert metrics_csv(a) == metrics_csv(b)


def test_threaded_clients_give_identical_results(setup):
    part, train, test, spec = setup
    cfg = small_cfg(method="fedtrip", mu=1.0)
    a = Federation(cfg, part, train, test, spec)
    b = Federation(cfg, part, train, test, spec, workers=3)
    a.run()
    b.run()
    assert a.global_model.values.tobytes() == b.global_model.values.tobytes()


def test_history_freshness_xi_bounds_and_aggregation_identity(setup):
    part, train, test, spec = setup
    cfg = small_cfg(method="fedtrip", mu=1.0, rounds=12)
    fed = Federation(cfg, part, train, test, spec)
    for t in range(1, cfg.rounds + 1):
        before = list(fed.clients)
        rec = fed.step()
        assert rec.round == t
        for k, c in enumerate(fed.clients):
            if k in rec.selected:
                assert c.last_round == t
                assert c.hist_model is fed.last_local_models[k]
            else:
                assert c is before[k]
        for k, xi in fed.last_xis.items():
            assert xi is None or 0 < xi <= 1
        ordered = [fed.last_local_models[k] for k in rec.selected]
        w = aggregate(ordered, aggregation_weights([100] * 3, "data_size"))
        assert np.linalg.norm(fed.global_model.values - w.values) == 0


def test_round_records_invariants(setup):
    part, train, test, spec = setup
    recs = run_federation(small_cfg(rounds=6), part, train, test, spec)
    assert [r.round for r in recs] == list(range(1, 7))
    assert all(0 <= r.test_accuracy <= 1 for r in recs)
    for a, b in zip(recs, recs[1:]):
        assert b.cum_flops >= a.cum_flops and b.cum_comm_bytes >= a.cum_comm_bytes


def test_degenerate_methods_share_trajectory(setup):
    part, train, test, spec = setup
    runs = {}
    for m in ("fedavg", "fedprox", "fedtrip"):
        fed = Federation(small_cfg(method=m, mu=0.0, rounds=6), part, train, test, spec)
        runs[m] = []
        for _ in range(6):
            fed.step()
            runs[m].append(fed.global_model.values.tobytes())
    assert runs["fedavg"] == runs["fedprox"] == runs["fedtrip"]


def test_fedtrip_differs_from_fedprox_once_history_exists(setup):
    part, train, test, spec = setup
    a = Federation(small_cfg(method="fedtrip", mu=1.0, rounds=8), part, train, test, spec)
    b = Federation(small_cfg(method="fedprox", mu=1.0, rounds=8), part, train, test, spec)
    a.run()
    b.run()
    assert not np.array_equal(a.global_model.values, b.global_model.values)


def test_partition_size_mismatch(setup):
    part, train, test, spec = setup
    with pytest.raises(ConfigError):
        Federation(small_cfg(n_clients=5), part, train, test, spec)


def test_metrics_csv_schema_and_roundtrip(setup):
    part, train, test, spec = setup
    recs = run_federation(small_cfg(rounds=3), part, train, test, spec)
    text = metrics_csv(recs)
    lines = text.split("\n")
    assert lines[0] == "round,test_accuracy,mean_train_loss,cum_flops,cum_comm_bytes,selected_ids"
    assert "\r" not in text and text.endswith("\n")
    assert lines[1].split(",")[-1] == ";".join(map(str, recs[0].selected))
    assert read_metrics_csv(text) == recs


def test_checkpoint_roundtrip(tmp_path, setup):
    *_, spec = setup
    w = init_params(spec, np.random.default_rng(8))
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, w)
    back = load_checkpoint(path)
    assert back.layout == w.layout
    assert back.values.tobytes() == w.values.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == b"FTCK"
    assert raw[-8 * w.values.size :] == w.values.astype("<f8").tobytes()
