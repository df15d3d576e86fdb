from dataclasses import replace

import numpy as np
import pytest

from conftest import SMALL_MODEL, small_config
from vagcil.data import SyntheticSpec, generate_synthetic, split_tasks
from vagcil.errors import ConfigError, ContractError, ProtocolError, ShapeError
from vagcil.harness import (
    LearnerConfig,
    ReplayBuffer,
    ReplayItem,
    ewc_penalty,
    new_state,
    predict_texts,
    prepare_model,
    run_joint,
    run_sequence,
    run_single,
    train_task,
    update_buffer,
)
from vagcil.tensor import Tensor


def items(n_classes, per_class, task=1):
    return [ReplayItem((4 + c, 5 + i), f"class {c}", task) for c in range(n_classes) for i in range(per_class)]


def test_buffer_is_class_balanced():
    buf = ReplayBuffer(0.05)
    assert update_buffer(buf, items(10, 20), 0.05, np.random.default_rng(0)) == 10
    counts = {}
    for it in buf.items:
        counts[it.label] = counts.get(it.label, 0) + 1
    assert sorted(counts.values()) == [1] * 10


def test_buffer_zero_fraction_and_growth():
    rng = np.random.default_rng(1)
    buf = ReplayBuffer(0.0)
    update_buffer(buf, items(4, 25), 0.0, rng)
    assert len(buf) == 0
    buf = ReplayBuffer(0.03)
    for t in range(1, 4):
        before = list(buf.items)
        update_buffer(buf, items(4, 25, task=t), 0.03, rng)
        assert buf.items[:len(before)] == before
    assert len(buf) == 9 and buf.seen == 300
    assert len(buf) <= 0.03 * buf.seen
    with pytest.raises(ContractError):
        update_buffer(buf, items(2, 2), 1.5, rng)


def test_buffer_remainder_is_random_but_bounded():
    buf = ReplayBuffer(0.1)
    update_buffer(buf, items(3, 30), 0.1, np.random.default_rng(2))
    counts = sorted(sum(it.label == f"class {c}" for it in buf.items) for c in range(3))
    assert counts == [3, 3, 3]
    buf = ReplayBuffer(0.1)
    update_buffer(buf, items(4, 10), 0.1, np.random.default_rng(3))
    counts = sorted(sum(it.label == f"class {c}" for it in buf.items) for c in range(4))
    assert counts == [1, 1, 1, 1]


def test_ewc_penalty_examples():
    theta = {"w": Tensor(np.array([5.0]))}
    anchor = {"w": np.array([2.0])}
    assert ewc_penalty(theta, anchor, {"w": np.array([2.0])}, 1.0).item() == 9.0
    assert ewc_penalty(theta, anchor, {"w": np.array([0.0])}, 5000.0).item() == 0.0
    assert ewc_penalty(theta, {"w": np.array([5.0])}, {"w": np.array([3.0])}, 5000.0).item() == 0.0
    with pytest.raises(ShapeError):
        ewc_penalty(theta, {"w": np.zeros(2)}, {"w": np.zeros(2)}, 1.0)


def test_ewc_penalty_gradient():
    rng = np.random.default_rng(4)
    theta, star, f = rng.normal(size=5), rng.normal(size=5), rng.random(5)
    from vagcil.tensor import Tape

    p = Tensor(theta.copy(), requires_grad=True)
    with Tape() as tape:
        loss = ewc_penalty({"w": p}, {"w": star}, {"w": f}, 3.0)
    tape.backward(loss)
    np.testing.assert_allclose(p.grad, 3.0 * f * (theta - star), atol=1e-12)


@pytest.mark.parametrize("kw", [
    dict(method="nope"),
    dict(method="vag", lambda_lpr=-1.0),
    dict(method="er", buffer_fraction=0.0),
    dict(method="vag", buffer_fraction=0.05),
    dict(method="vag", epochs=0),
    dict(method="vag", seeds=()),
])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        LearnerConfig(**kw).validate()


def test_tasks_must_arrive_in_order(small_stream):
    cfg = small_config("vanilla-G")
    state = new_state(prepare_model(small_stream, cfg, 0), cfg, None, np.random.default_rng(0))
    with pytest.raises(ProtocolError):
        train_task(state, small_stream.tasks[1])


@pytest.mark.parametrize("method", ["vanilla-classifier", "vag"])
def test_head_and_pool_grow_with_tasks(small_stream, method):
    cfg = small_config(method, epochs=1)
    state = new_state(prepare_model(small_stream, cfg, 0), cfg, None, np.random.default_rng(0))
    seen = []
    for task in small_stream:
        train_task(state, task)
        seen += task.labels
        if method == "vag":
            assert state.pool.labels == seen
            assert set(state.vocabs) == set(range(1, task.task_id + 1))
        else:
            assert state.head_w.shape[1] == len(seen) and state.head_labels == seen
        assert set(predict_texts(state, [r.text for r in task.test])) <= set(seen)


@pytest.mark.parametrize("method", ["vanilla-classifier", "vanilla-G", "ewc-G", "er", "vag", "vag+er"])
def test_every_method_runs(small_stream, method):
    kw = {"buffer_fraction": 0.1} if method in ("er", "vag+er") else {}
    report = run_single(small_stream, small_config(method, **kw), seed=0)
    acc = report.acc_matrix
    assert np.isnan(acc[np.triu_indices(3, 1)]).all()
    assert not np.isnan(acc[np.tril_indices(3)]).any()
    assert len(report.nc) == 4 and len(report.seen_accuracy) == 3
    assert report.confusion.sum(axis=1).tolist() == [6] * 6
    assert report.closed_world_violations == 0
    assert 0.0 <= report.final_accuracy <= 1.0


def test_run_is_deterministic(small_stream):
    cfg = small_config("vag+er", buffer_fraction=0.1)
    a, b = run_single(small_stream, cfg, 0), run_single(small_stream, cfg, 0)
    assert np.array_equal(a.acc_matrix, b.acc_matrix, equal_nan=True)
    assert a.nc == b.nc and a.events == b.events and np.array_equal(a.confusion, b.confusion)


def test_replay_event_logs(small_stream):
    report = run_single(small_stream, small_config("vag+er", buffer_fraction=0.1, lambda_lpr=0.5), 0)
    lpr = [e for e in report.events if e["kind"] == "lpr"]
    buf = [e for e in report.events if e["kind"] == "buffer"]
    assert lpr and all(e["n"] == e["expected"] == round(0.5 * 12 * 2 + 1e-9) for e in lpr)
    assert all(e["task"] > 1 for e in lpr)
    assert [e["size"] for e in buf] == [2, 4, 6]


def test_multi_seed_report(small_stream):
    multi = run_sequence(small_stream, small_config("vanilla-G", seeds=(0, 1)))
    assert [r.seed for r in multi.reports] == [0, 1]
    mean, std = multi.final_accuracy
    vals = [r.final_accuracy for r in multi.reports]
    assert mean == pytest.approx(np.mean(vals)) and std == pytest.approx(np.std(vals))


def test_joint_mode_uses_one_task(small_stream):
    report = run_joint(small_stream, small_config("vag+er", buffer_fraction=0.1), 0)
    assert report.acc_matrix.shape == (1, 1)
    assert report.method == "vag+er (joint)"


SEPARABLE = SyntheticSpec(n_classes=4, n_tasks=1, classes_per_task=4, noise_rate=0.0, shared_tokens=0)


@pytest.mark.slow
@pytest.mark.parametrize("method", ["vag", "vanilla-G"])
def test_single_task_is_learnable(method):
    stream = split_tasks(generate_synthetic(SEPARABLE), 1, 4)
    report = run_single(stream, LearnerConfig(method=method), seed=0)
    assert report.final_accuracy >= 0.95


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_joint_training_bounds_sequential_methods(benchmark, seed):
    joint = benchmark.get("vag", seed, joint=True)
    for method in ("vanilla-classifier", "vanilla-G", "vag", "vag+er"):
        assert joint.final_accuracy >= benchmark.get(method, seed).final_accuracy


@pytest.mark.slow
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_classifier_forgets_toward_latest_classes(benchmark, seed):
    report = benchmark.get("vanilla-classifier", seed)
    # a quarter of the test data belongs to the newest task; predictions pile up there
    assert report.last_task_bias > 0.8
    assert report.final_accuracy < 0.35
    assert np.nanmean(report.acc_matrix[-1, :-1]) < 0.2
