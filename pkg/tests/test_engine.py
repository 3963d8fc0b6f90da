import numpy as np
import pytest

from pflsim import models
from pflsim.data import SynthSpec, generate_synthetic, planted_truth
from pflsim.datamodel import ClientDataset, FederatedDataset
from pflsim.engine import (EngineConfig, aggregate, client_update, latest_checkpoint, run_fedavg, training_data,
                           with_rounds)
from pflsim.models import ArchDescriptor

from conftest import small_synthetic


def _rng():
    return np.random.default_rng(0)


def test_client_update_one_full_batch_step():
    arch = ArchDescriptor("softmax_classifier", 3, 2)
    start = models.random_params(arch, 1)
    X, y = _rng().standard_normal((6, 3)), np.array([0, 1, 1, 0, 1, 0])
    delta, w = client_update(start, (X, y), 1, None, 0.3, _rng())
    # the pass visits a shuffled copy of the batch, so only summation order differs
    np.testing.assert_allclose(delta, -0.3 * models.gradient(start, (X, y)), rtol=0, atol=1e-15)
    assert w == 6.0


def test_client_update_zero_lr_and_determinism():
    arch = ArchDescriptor("linear_regression", 2)
    start = models.random_params(arch, 0)
    X, y = _rng().standard_normal((9, 2)), _rng().standard_normal(9)
    d0, _ = client_update(start, (X, y), 2, 3, 0.0, _rng())
    assert not d0.any()
    a, _ = client_update(start, (X, y), 2, 3, 0.1, np.random.default_rng(5))
    b, _ = client_update(start, (X, y), 2, 3, 0.1, np.random.default_rng(5))
    assert np.array_equal(a, b)
    assert client_update(start, (X, y), 1, 3, 0.1, _rng(), "uniform")[1] == 1.0
    with pytest.raises(ValueError):
        client_update(start, (np.zeros((0, 2)), np.zeros(0)), 1, 3, 0.1, _rng())


def test_aggregate_examples():
    np.testing.assert_array_equal(aggregate([np.array([2.0, 0]), np.array([0, 2.0])], [1, 1]), [1, 1])
    np.testing.assert_array_equal(aggregate([np.array([4.0]), np.array([0.0])], [0.25, 0.75]), [1.0])
    np.testing.assert_array_equal(aggregate([np.array([3.0, -1.0])], [7]), [3.0, -1.0])
    with pytest.raises(ValueError):
        aggregate([np.array([1.0])], [0.0])
    with pytest.raises(ValueError):
        aggregate([np.array([1.0]), np.array([1.0, 2.0])], [1, 1])


def test_zero_rounds_returns_init(device_ds):
    arch = ArchDescriptor("softmax_classifier", 4, 3)
    res = run_fedavg(device_ds, arch, EngineConfig(total_rounds=0))
    assert res.params == models.init_params(arch, 0) and res.traces == []


def centralized_gd(arch, train, rounds, lr, weighting):
    """Gradient descent on sum_k p_k F_k, written against the pooled data."""
    w = models.init_params(arch, 0)
    sizes = np.array([len(y) for _, y in train.values()], dtype=float)
    p = sizes / sizes.sum() if weighting == "by_example_count" else np.full(len(sizes), 1 / len(sizes))
    for _ in range(rounds):
        g = sum(pk * models.gradient(w, batch) for pk, batch in zip(p, train.values()))
        w = w.with_values(w.values - lr * g)
    return w


@pytest.mark.parametrize("weighting", ["by_example_count", "uniform"])
def test_fedavg_full_batch_equals_centralized_gd(weighting):
    ds = small_synthetic(seed=2)
    arch = ArchDescriptor("softmax_classifier", 4, 3, l2_reg=0.01)
    train = training_data(ds)
    cfg = EngineConfig(total_rounds=20, clients_per_round=len(train), client_lr=0.2, train_batch_size=None,
                       weighting=weighting)
    got = run_fedavg(ds, arch, cfg).params
    want = centralized_gd(arch, train, 20, 0.2, weighting)
    np.testing.assert_allclose(got.values, want.values, rtol=0, atol=1e-12)


def test_global_model_below_cluster_oracle():
    spec = SynthSpec(num_clients=30, examples_per_client=(60, 0), heterogeneity=4.0, seed=1)
    ds, truth = generate_synthetic(spec), planted_truth(spec)
    arch = ArchDescriptor("softmax_classifier", spec.feature_dim, spec.num_classes)
    g = run_fedavg(ds, arch, EngineConfig(total_rounds=40, clients_per_round=10, client_lr=0.1)).params
    glob = np.mean([models.metric(g, c.subset()) for c in ds.clients])
    oracle = np.mean([np.mean(truth.predict(truth.assignment[c.client_id], c.X) == c.y) for c in ds.clients])
    assert glob < oracle


@pytest.mark.parametrize("opt", [{"kind": "avg", "lr": 1.0}, {"kind": "adam", "lr": 0.05},
                                 {"kind": "fedavgm", "lr": 0.5}])
def test_worker_count_does_not_change_results(opt):
    ds = small_synthetic(seed=4)
    arch = ArchDescriptor("mlp_classifier", 4, 3, hidden_dim=5)
    cfg = EngineConfig(total_rounds=6, clients_per_round=5, client_lr=0.1, train_batch_size=4, server_opt=opt)
    a = run_fedavg(ds, arch, cfg, workers=1)
    b = run_fedavg(ds, arch, cfg, workers=4)
    assert a.params == b.params and a.traces == b.traces


def test_checkpoint_resume_is_bitwise(tmp_path):
    ds = small_synthetic(seed=6)
    arch = ArchDescriptor("softmax_classifier", 4, 3)
    cfg = EngineConfig(total_rounds=10, clients_per_round=4, client_lr=0.1, train_batch_size=5,
                       server_opt={"kind": "adam", "lr": 0.05}, rounds_per_checkpoint=4)
    full = run_fedavg(ds, arch, cfg)
    run_fedavg(ds, arch, with_rounds(cfg, 4), checkpoint_dir=tmp_path)
    ck = latest_checkpoint(tmp_path)
    assert ck.name == "round_000004.json"
    resumed = run_fedavg(ds, arch, cfg, resume_from=ck)
    assert resumed.params == full.params and resumed.traces == full.traces
    assert resumed.states[0].to_dict() == full.states[0].to_dict()


def test_checkpoint_seed_mismatch(tmp_path):
    ds = small_synthetic()
    arch = ArchDescriptor("softmax_classifier", 4, 3)
    cfg = EngineConfig(total_rounds=2, clients_per_round=2, rounds_per_checkpoint=1)
    run_fedavg(ds, arch, cfg, checkpoint_dir=tmp_path)
    with pytest.raises(ValueError, match="seed"):
        run_fedavg(ds, arch, with_rounds(cfg, 3, seed=9), resume_from=latest_checkpoint(tmp_path))


def test_trace_accounting(device_ds):
    arch = ArchDescriptor("softmax_classifier", 4, 3)
    res = run_fedavg(device_ds, arch, EngineConfig(total_rounds=3, clients_per_round=4))
    for t in res.traces:
        assert t.params_broadcast == 4 * arch.num_params and len(t.sampled_client_ids) == 4
        assert t.cluster_assignments is None


def test_evaluation_hook_fires(device_ds):
    arch = ArchDescriptor("softmax_classifier", 4, 3)
    calls = []

    def hook(current, rnd):
        calls.append(rnd)
        return {"x": float(rnd)}

    res = run_fedavg(device_ds, arch, EngineConfig(total_rounds=6, clients_per_round=2, rounds_per_evaluation=2),
                     evaluate=hook)
    assert calls == [2, 4, 6] and [h["round"] for h in res.history] == [2, 4, 6]


def test_too_many_clients_per_round(device_ds):
    with pytest.raises(ValueError, match="exceeds"):
        run_fedavg(device_ds, ArchDescriptor("softmax_classifier", 4, 3), EngineConfig(clients_per_round=100))


def test_training_data_by_regime(device_ds, silo_ds):
    dev = training_data(device_ds)
    assert sorted(dev) == sorted(c.client_id for c in device_ds.by_role("train"))
    silo = training_data(silo_ds)
    for cid, (X, y) in silo.items():
        assert len(y) == silo_ds.client(cid).count("train")


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(total_rounds=-1)
    with pytest.raises(ValueError):
        EngineConfig(weighting="sqrt")
    assert EngineConfig(server_opt={"kind": "adam", "lr": 0.1}).server_opt.kind == "adam"
