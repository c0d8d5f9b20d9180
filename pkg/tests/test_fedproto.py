import inspect
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedhm import data
from fedhm import fedproto as fp
from fedhm import modelspec as ms
from fedhm.network import Network
from fedhm.tensor_nn import SgdState, softmax_cross_entropy


def _const_model(spec, value, dtype=np.float64):
    m = ms.materialize(spec, 0, dtype)
    for group in (m.params, m.buffers):
        for k in group:
            group[k] = np.full_like(group[k], value)
    return m


@pytest.fixture
def mlp():
    return ms.build_mlp(3, 4, 2)


@pytest.fixture(scope="module")
def task():
    train = data.synth_blobs(3, 24, (1, 6, 6), 0.3, seed=4)
    test = data.synth_blobs(3, 10, (1, 6, 6), 0.3, seed=4, split="test")
    train, test = data.normalize(train, test)
    spec = ms.build_tiny_cnn(1, 3, 6, widths=(4, 8, 8))
    return spec, train, test


def _clients(train, P, seed=0):
    part = data.partition_iid(len(train), P, seed)
    return [fp.Client(i, train.subset(idx)) for i, idx in enumerate(part.indices)]


# --- aggregation weights -----------------------------------------------------------------


def test_weights_hand_example():
    a = fp.aggregation_weights([1.0, 0.5], 5.0)
    np.testing.assert_allclose(a, [0.52498, 0.47502], atol=1e-4)


def test_weights_infinite_tau_uniform():
    assert fp.aggregation_weights([1.0, 0.25, 0.5], math.inf).tolist() == [1 / 3] * 3


def test_weights_reject_bad_tau():
    with pytest.raises(ValueError):
        fp.aggregation_weights([1.0], 0.0)


@given(st.lists(st.floats(0.01, 1.0), min_size=1, max_size=20), st.floats(0.05, 100.0))
def test_weights_normalized_and_monotone(ratios, tau):
    a = fp.aggregation_weights(ratios, tau)
    assert abs(a.sum() - 1.0) <= 1e-12
    assert np.all(a > 0) and np.all(a <= 1)
    g = np.asarray(ratios)
    for i in range(len(g)):
        for j in range(len(g)):
            if g[i] > g[j] and (g[i] - g[j]) / tau > 1e-12:
                assert a[i] > a[j]


# --- aggregate / fedavg ---------------------------------------------------------------------


def test_aggregate_scalar_examples(mlp):
    m1, m3 = _const_model(mlp, 1.0), _const_model(mlp, 3.0)
    out = fp.aggregate([m1, m3], [1.0, 0.5], 5.0)
    for t in out.tensors().values():
        np.testing.assert_allclose(t, 1.95005, atol=1e-4)
    for ratios, tau in (([0.5, 0.5], 5.0), ([1.0, 0.5], math.inf)):
        out = fp.aggregate([m1, m3], ratios, tau)
        assert all(np.all(t == 2.0) for t in out.tensors().values())


def test_aggregate_single_participant_identity(mlp):
    m = ms.materialize(mlp, 3, np.float64)
    for tau in (5.0, math.inf):
        out = fp.aggregate([m], [0.25], tau)
        assert all(np.array_equal(out.tensors()[k], v) for k, v in m.tensors().items())


def test_aggregate_spec_mismatch(mlp):
    other = ms.build_mlp(3, 5, 2)
    with pytest.raises(ms.SpecError):
        fp.aggregate([ms.materialize(mlp, 0), ms.materialize(other, 0)], [1, 1], math.inf)


def test_infinite_tau_equals_fedavg_exactly(mlp, rng):
    models = [ms.materialize(mlp, s) for s in range(5)]
    a = fp.aggregate(models, rng.uniform(0.1, 1, 5), math.inf)
    b = fp.fedavg_round(models, [7] * 5)
    for k, v in a.tensors().items():
        assert v.tobytes() == b.tensors()[k].tobytes()


def test_fedavg_examples(mlp):
    m0, m4 = _const_model(mlp, 0.0), _const_model(mlp, 4.0)
    out = fp.fedavg_round([m0, m4], [1, 3])
    assert all(np.allclose(t, 3.0) for t in out.tensors().values())
    same = fp.fedavg_round([m4, m4, m4], [2, 9, 4])
    assert all(np.allclose(t, 4.0) for t in same.tensors().values())


def test_fedavg_equals_centralized_step():
    spec = ms.build_mlp(5, 6, 3)
    ds = data.synth_blobs(3, 8, (5,), 0.5, seed=1)  # 24 samples
    model = ms.materialize(spec, 2, np.float64)
    P = 4
    part = data.partition_iid(len(ds), P, 0)
    sgd = dict(lr=0.1, momentum=0.9, weight_decay=1e-3)
    locals_ = [fp.local_update(model, ds.subset(idx), 1, SgdState(**sgd), batch_size=len(idx)) for idx in part.indices]
    agg = fp.fedavg_round(locals_, [len(i) for i in part.indices])

    net = Network(spec)
    _, dlog = softmax_cross_entropy(net.forward(model, ds.features, train=True), ds.labels)
    grads, _ = net.backward(dlog)
    for key, w in model.params.items():
        decay = sgd["weight_decay"] * w if key.endswith(".W") else 0.0
        expect = w - sgd["lr"] * (grads[key] + decay)
        np.testing.assert_allclose(agg.params[key], expect, rtol=0, atol=1e-10)


# --- heterofl ------------------------------------------------------------------------------


def _heterofl_oracle(global_model, slim_models):
    out = global_model.copy()
    for key, g in out.tensors().items():
        for idx in np.ndindex(g.shape):
            vals = [m.tensors()[key][idx] for m in slim_models
                    if all(i < s for i, s in zip(idx, m.tensors()[key].shape))]
            if vals:
                g[idx] = sum(vals) / len(vals)
    return out


def test_heterofl_coverage_example():
    spec = ms.build_mlp(2, 4, 2)
    full = _const_model(spec, 0.0)
    a = _const_model(spec, 2.0)
    b = ms.slice_model(_const_model(spec, 6.0), ms.width_slim(spec, 0.5))
    out = fp.heterofl_aggregate(full, [a, b])
    W = out.params["fc1.W"]  # hidden layer, out channels 4
    assert W.shape[1] == 4
    np.testing.assert_array_equal(W[:, :2], 4.0)
    np.testing.assert_array_equal(W[:, 2:], 2.0)


def test_heterofl_all_full_is_mean(mlp):
    models = [ms.materialize(mlp, s, np.float64) for s in range(3)]
    out = fp.heterofl_aggregate(models[0], models)
    mean = fp.weighted_average(models)
    for k, v in out.tensors().items():
        np.testing.assert_allclose(v, mean.tensors()[k], rtol=1e-15)


@pytest.mark.parametrize("seed", range(3))
def test_heterofl_matches_brute_force(seed):
    spec = ms.build_tiny_cnn(1, 3, 4, widths=(4, 6, 4))
    rng = np.random.default_rng(seed)
    glob = ms.materialize(spec, seed, np.float64)
    widths = rng.choice([1.0, 0.75, 0.5, 0.25], size=4)
    slims = [ms.slice_model(ms.materialize(spec, 100 + i, np.float64), ms.width_slim(spec, w)) for i, w in enumerate(widths)]
    out = fp.heterofl_aggregate(glob, slims)
    oracle = _heterofl_oracle(glob, slims)
    for k, v in out.tensors().items():
        np.testing.assert_allclose(v, oracle.tensors()[k], rtol=1e-14, atol=0)


def test_heterofl_uncovered_keeps_global():
    spec = ms.build_tiny_cnn(1, 3, 4, widths=(4, 6, 4))
    glob = ms.materialize(spec, 0)
    slim = ms.slice_model(ms.materialize(spec, 1), ms.width_slim(spec, 0.5))
    out = fp.heterofl_aggregate(glob, [slim])
    np.testing.assert_array_equal(out.params["conv2.W"][3:], glob.params["conv2.W"][3:])


def test_heterofl_rejects_non_nested():
    spec = ms.build_mlp(2, 4, 2)
    bigger = ms.materialize(ms.build_mlp(2, 6, 2), 0)
    with pytest.raises(ms.SpecError):
        fp.heterofl_aggregate(ms.materialize(spec, 0), [bigger])


# --- schedules ----------------------------------------------------------------------------------


def test_fixed_schedule_constant():
    s = fp.CapabilitySchedule("fixed", 4)
    assert fp.resolve_capabilities(s, 1, 10).tolist() == fp.resolve_capabilities(s, 50, 10).tolist()
    assert fp.resolve_capabilities(s, 1, 6).tolist() == [1, 2, 3, 4, 1, 2]


def test_fixed_schedule_explicit_assignment():
    s = fp.CapabilitySchedule("fixed", 2, (2, 2, 1))
    assert fp.resolve_capabilities(s, 7, 3).tolist() == [2, 2, 1]
    with pytest.raises(ValueError):
        fp.resolve_capabilities(s, 7, 4)
    with pytest.raises(ValueError):
        fp.CapabilitySchedule("fixed", 2, (3,))


def test_dynamic_schedule_frequencies_and_determinism():
    s = fp.CapabilitySchedule("dynamic", 4, seed=3)
    draws = np.concatenate([fp.resolve_capabilities(s, t, 20) for t in range(1, 101)])
    assert len(draws) >= 2000
    freq = np.bincount(draws, minlength=5)[1:] / len(draws)
    assert np.all(np.abs(freq - 0.25) <= 0.05)
    again = np.concatenate([fp.resolve_capabilities(s, t, 20) for t in range(1, 101)])
    assert np.array_equal(draws, again)
    assert not np.array_equal(fp.resolve_capabilities(s, 1, 20), fp.resolve_capabilities(s, 2, 20))


def test_bad_schedule_mode():
    with pytest.raises(ValueError):
        fp.CapabilitySchedule("random", 2)


@pytest.mark.parametrize("P,C,k", [(20, 0.5, 10), (8, 0.5, 4), (3, 0.1, 1), (5, 1.0, 5)])
def test_sample_participants(P, C, k):
    chosen = fp.sample_participants(P, C, seed=1, round_idx=3)
    assert len(chosen) == k == len(set(chosen.tolist()))
    assert chosen.tolist() == sorted(chosen.tolist())
    assert np.array_equal(chosen, fp.sample_participants(P, C, seed=1, round_idx=3))


# --- local update ---------------------------------------------------------------------------------


def test_local_update_zero_lr_keeps_params(task):
    spec, train, _ = task
    model = ms.materialize(spec, 0)
    out = fp.local_update(model, train, 2, SgdState(lr=0.0), rng=np.random.default_rng(0))
    for k, v in model.params.items():
        assert np.array_equal(out.params[k], v)


def test_local_update_single_step_hand_computed():
    spec = ms.make_hybrid(ms.build_mlp(4, 5, 3), ms.HybridPlan(0, 0.5, factorize_classifier=True))
    ds = data.synth_blobs(3, 4, (4,), 0.5, seed=2)
    model = ms.materialize(spec, 1, np.float64)
    sgd = SgdState(lr=0.05, momentum=0.0, weight_decay=0.01, frobenius_decay=0.02)
    out = fp.local_update(model, ds, 1, sgd, batch_size=len(ds))

    net = Network(spec)
    _, dlog = softmax_cross_entropy(net.forward(model, ds.features, train=True), ds.labels)
    grads, _ = net.backward(dlog)
    p = model.params
    for l in spec.layers:
        if l.kind == ms.FDENSE:
            U, V = p[f"{l.name}.U"], p[f"{l.name}.V"]
            decay = {f"{l.name}.U": 0.02 * U @ (V.T @ V), f"{l.name}.V": 0.02 * V @ (U.T @ U)}
        elif l.kind == ms.DENSE:
            decay = {f"{l.name}.W": 0.01 * p[f"{l.name}.W"]}
        else:
            decay = {}
        for key in [k for k in p if k.startswith(l.name + ".")]:
            expect = p[key] - 0.05 * (grads[key] + decay.get(key, 0.0))
            np.testing.assert_allclose(out.params[key], expect, rtol=1e-12, atol=1e-14)


def test_local_update_does_not_mutate_input(task):
    spec, train, _ = task
    model = ms.materialize(spec, 0)
    before = {k: v.copy() for k, v in model.tensors().items()}
    fp.local_update(model, train, 1, SgdState(lr=0.1), rng=np.random.default_rng(0))
    assert all(np.array_equal(before[k], v) for k, v in model.tensors().items())


def test_local_update_loss_trend_on_separable_task():
    ds = data.normalize(data.synth_blobs(4, 30, (1, 8, 8), 0.0, seed=0))[0]
    spec = ms.make_hybrid(ms.build_tiny_cnn(1, 4, 8, widths=(4, 8, 8)), ms.HybridPlan(1, 0.5))
    losses = []
    fp.local_update(ms.materialize(spec, 0), ds, 10, SgdState(lr=0.05), batch_size=32,
                    rng=np.random.default_rng(0), losses=losses)
    violations = sum(b > a for a, b in zip(losses, losses[1:]))
    assert violations <= 0.1 * (len(losses) - 1)
    assert losses[-1] < losses[0]


def test_local_update_errors(task):
    spec, train, _ = task
    with pytest.raises(ValueError):
        fp.local_update(ms.materialize(spec, 0), train, 0, SgdState())
    with pytest.raises(ValueError):
        fp.Client(0, type("Empty", (), {"__len__": lambda self: 0})())


# --- privacy boundary ----------------------------------------------------------------------------


def test_server_side_interfaces_take_no_datasets():
    for fn in (fp.aggregate, fp.weighted_average, fp.fedavg_round, fp.heterofl_aggregate, fp.aggregation_weights):
        for p in inspect.signature(fn).parameters.values():
            assert "Dataset" not in str(p.annotation), (fn.__name__, p.name)


def test_client_exposes_no_data(task):
    _, train, _ = task
    c = fp.Client(0, train)
    public = {n: getattr(c, n) for n in dir(c) if not n.startswith("_")}
    assert not any(isinstance(v, (data.Dataset, np.ndarray)) for v in public.values())
    assert set(public) == {"client_id", "num_samples", "train"}


# --- server loop ----------------------------------------------------------------------------------


def _cfg(**kw):
    base = dict(method="fedhm", rounds=2, fraction=0.5, local_epochs=1, batch_size=16, lr=0.05,
                rank_ratios=[0.5, 0.25], seed_sample=1, seed_data=2)
    base.update(kw)
    return fp.FedConfig(**base)


def test_zero_rounds_returns_initial_model(task):
    spec, train, test = task
    model = ms.materialize(spec, 0)
    res = fp.server_execute(model, _clients(train, 4), _cfg(rounds=0), test)
    assert res.model is model and res.records == []


def test_round_records_layout(task):
    spec, train, test = task
    res = fp.server_execute(ms.materialize(spec, 0), _clients(train, 4), _cfg(), test)
    assert [(r.round, r.level) for r in res.records] == [(1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)]
    for t, profiles in enumerate(res.participants, start=1):
        assert len(profiles) == 2
        assert [p.level for p in profiles] == [p.client_id % 2 + 1 for p in profiles]
    assert res.model.spec == spec


@pytest.mark.parametrize("method", ["fedhm", "fedavg", "heterofl-channel"])
def test_threads_do_not_change_results(task, method):
    spec, train, test = task
    runs = []
    for threads in (0, 3):
        res = fp.server_execute(ms.materialize(spec, 0), _clients(train, 6), _cfg(method=method, threads=threads), test)
        runs.append(res)
    a, b = runs
    assert [r.row() for r in a.records] == [r.row() for r in b.records]
    for k, v in a.model.tensors().items():
        assert v.tobytes() == b.model.tensors()[k].tobytes()


def test_homogeneous_fedhm_is_fedavg(task):
    spec, train, test = task
    clients = _clients(train, 4)  # 72 samples, 18 each
    a = fp.server_execute(ms.materialize(spec, 0), clients, _cfg(method="fedhm", rank_ratios=[1.0], rounds=3), test)
    b = fp.server_execute(ms.materialize(spec, 0), clients, _cfg(method="fedavg", rounds=3), test)
    for k, v in a.model.tensors().items():
        assert v.tobytes() == b.model.tensors()[k].tobytes()
    assert [r.acc_top1 for r in a.records if r.level == 0] == [r.acc_top1 for r in b.records if r.level == 0]


def test_client_failure_raises_round_error(task):
    spec, train, test = task
    bad = data.Dataset(np.zeros((4, 2)), np.zeros(4), 3)  # wrong feature shape for the model
    clients = [fp.Client(i, bad) for i in range(2)]
    with pytest.raises(fp.RoundError, match="round 1"):
        fp.server_execute(ms.materialize(spec, 0), clients, _cfg(fraction=1.0), test)


def test_unknown_method(task):
    spec, train, _ = task
    with pytest.raises(ValueError):
        fp.server_execute(ms.materialize(spec, 0), _clients(train, 2), _cfg(method="fedprox"))
