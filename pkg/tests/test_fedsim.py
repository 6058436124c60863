import numpy as np
import pydantic
import pytest

from tcs_fedsim.codec import block_size_for, payload_bit_length, quantize_values
from tcs_fedsim.compressors import SparseUpdate, s_top
from tcs_fedsim.config import QuantizerSpec, RuntimeConfig
from tcs_fedsim.exceptions import ConfigurationError, ContractViolationError, DivergedError, LayoutMismatchError
from tcs_fedsim.fedsim import (
    aggregate,
    build_experiment,
    client_local_update,
    lr_schedule,
    run_experiment,
    run_fedavg,
    run_tcs,
    run_tcs_momentum,
)
from tcs_fedsim.models import BatchSampler, gradient, init_model, synth_dataset
from tcs_fedsim.tensor import LayerLayout, ParamVector, masks_disjoint

TCS = dict(scheme="tcs", phi_global=0.2, phi_local=0.05)


def collect(runner, cfg, runtime):
    traces = []
    log = runner(cfg, runtime, on_round=traces.append)
    return log, traces


# Learning rate

@pytest.mark.unit
def test_lr_schedule_examples(make_config):
    cfg = make_config(
        num_clients=10, batch_size=64, reference_batch=128, warmup_epochs=5, milestones=[(150, 0.1), (225, 0.1)]
    )
    assert lr_schedule(0, cfg) == pytest.approx(0.1)
    assert lr_schedule(2.5, cfg) == pytest.approx(0.3)
    assert lr_schedule(5, cfg) == pytest.approx(0.5)
    assert lr_schedule(149.9, cfg) == pytest.approx(0.5)
    assert lr_schedule(160, cfg) == pytest.approx(0.05)
    assert lr_schedule(230, cfg) == pytest.approx(0.005)
    with pytest.raises(ContractViolationError):
        lr_schedule(-1, cfg)


@pytest.mark.unit
def test_lr_schedule_reference_point_is_flat(make_config):
    cfg = make_config(num_clients=1, batch_size=128, reference_batch=128, warmup_epochs=5)
    assert [lr_schedule(e, cfg) for e in (0, 1, 4.5, 9)] == pytest.approx([0.1] * 4)


# Local update and aggregation

@pytest.fixture
def shard():
    return synth_dataset(3, 5, 40, 0.5, seed=4)


@pytest.mark.unit
def test_single_local_step_is_scaled_gradient(shard):
    model = init_model("logreg", 3, 5, seed=1)
    delta = client_local_update(model, shard, 1, 0.3, 0.0, BatchSampler(40, 8, 1, 0))
    batch = shard.subset(BatchSampler(40, 8, 1, 0).next_batch())
    assert np.array_equal(delta.values, gradient(model, batch).values * -0.3)


@pytest.mark.unit
def test_zero_lr_gives_zero_update(shard):
    model = init_model("mlp", 3, 5, 4, seed=1)
    delta = client_local_update(model, shard, 3, 0.0, 1e-4, BatchSampler(40, 8, 1, 0))
    assert not np.any(delta.values)


@pytest.mark.unit
def test_local_steps_match_manual_loop(shard):
    model = init_model("mlp", 3, 5, 4, seed=1)
    before = model.params.values.copy()
    delta = client_local_update(model, shard, 4, 0.05, 1e-4, BatchSampler(40, 16, 2, 3))
    assert np.array_equal(model.params.values, before)

    sampler = BatchSampler(40, 16, 2, 3)
    expected = ParamVector.zeros(model.layout)
    for _ in range(4):
        current = model.with_params(model.params + expected)
        expected = expected + gradient(current, shard.subset(sampler.next_batch()), 1e-4) * -0.05
    assert np.array_equal(delta.values, expected.values)


@pytest.mark.unit
def test_aggregate_examples(rng):
    same = ParamVector([1.0, 2.0, 3.0])
    assert aggregate([same, same, same]).values.tolist() == [1.0, 2.0, 3.0]
    assert aggregate([ParamVector([2.0, 0.0]), ParamVector([0.0, 4.0])]).values.tolist() == [1.0, 2.0]

    layout = LayerLayout.single(4)
    sparse = [SparseUpdate(layout, [0], [2.0], [3], [6.0]), SparseUpdate(layout, [0], [4.0], [], [])]
    assert aggregate(sparse).values.tolist() == [3.0, 0.0, 0.0, 3.0]

    updates = [ParamVector(rng.standard_normal(50)) for _ in range(10)]
    naive = np.zeros(50)
    for u in updates:
        naive = naive + u.values
    assert np.array_equal(aggregate(updates).values, naive / 10)


@pytest.mark.unit
def test_aggregate_rejects_bad_input():
    with pytest.raises(ContractViolationError):
        aggregate([])
    with pytest.raises(LayoutMismatchError):
        aggregate([ParamVector([1.0, 2.0]), ParamVector([1.0, 2.0], LayerLayout((1, 1)))])


# Round loop

@pytest.mark.integration
def test_round_schedule_and_metrics_shape(make_config, runtime):
    log = run_fedavg(make_config(), runtime)
    assert len(log) == 9
    assert log.column("round") == list(range(9))
    assert log.last.epoch == pytest.approx(3.0)
    assert log.column("uplink_bits_total") == [4 * 32 * 18] * 9
    assert log.column("downlink_support_size") == [18] * 9
    assert all(w == 0.0 for w in log.column("wall_ms"))
    assert log.final_params is not None and log.final_params.d == 18


@pytest.mark.integration
def test_fedavg_learns_separable_blobs(make_config, runtime):
    log = run_fedavg(make_config(epochs=5, base_lr=0.5), runtime)
    assert log.records[-1].train_loss < log.records[0].train_loss
    assert log.last.test_accuracy >= 0.9


@pytest.mark.integration
@pytest.mark.parametrize("local_steps", [1, 4])
def test_full_global_mask_reproduces_fedavg(make_config, runtime, local_steps):
    dense = run_fedavg(make_config(local_steps=local_steps, epochs=20), runtime)
    tcs = run_tcs(
        make_config(local_steps=local_steps, epochs=20, scheme="tcs", phi_global=1.0, phi_local=0.0), runtime
    )
    assert np.array_equal(tcs.final_params.values, dense.final_params.values)
    assert tcs.column("train_loss") == dense.column("train_loss")


@pytest.mark.integration
def test_hand_traced_first_round(make_config, runtime):
    cfg = make_config(
        num_clients=1, num_classes=2, num_features=2, num_samples=40, scheme="tcs", phi_global=0.5, phi_local=1 / 6
    )
    _, traces = collect(run_tcs, cfg, runtime)
    first = traces[0]
    delta = first.updates[0].values
    sent = first.sent[0]

    assert first.global_mask.indices.tolist() == [0, 1, 2]
    local = 3 + int(np.argmax(np.abs(delta[3:])))
    assert sent.global_positions.tolist() == [0, 1, 2]
    assert sent.global_values.tolist() == delta[:3].tolist()
    assert sent.local_positions.tolist() == [local]
    assert sent.local_values.tolist() == [delta[local]]

    expected_residual = delta.copy()
    expected_residual[[0, 1, 2, local]] = 0.0
    assert np.array_equal(first.new_errors[0].residual.values, expected_residual)
    assert np.array_equal(first.broadcast.values, sent.to_dense().values)
    assert first.uplink_bits[0] == payload_bit_length(6, 3, 1, block_size_for(1 / 6, 6), QuantizerSpec())


@pytest.mark.integration
@pytest.mark.parametrize(
    "overrides",
    [
        dict(local_steps=2),
        dict(fairness="lf", phi_global=0.3, phi_local=0.1, phi_min_global=0.1, phi_min_local=0.05),
    ],
)
def test_round_invariants(make_config, runtime, overrides):
    cfg = make_config(**{**TCS, **overrides})
    comp = cfg.compressor_config()
    d = 18
    k_global, k_local = comp.k_global(d), comp.k_local(d)
    _, traces = collect(run_tcs, cfg, runtime)
    assert len(traces) == 9

    previous = ParamVector.zeros(traces[0].params.layout)
    for trace in traces:
        assert trace.compressed
        for theta in trace.client_params:
            assert np.array_equal(theta.values, trace.client_params[0].values)
        if cfg.fairness == "none":
            assert trace.global_mask == s_top(previous, k_global)
        assert trace.global_mask.popcount == k_global

        for update, sent, old, new in zip(trace.updates, trace.sent, trace.old_errors, trace.new_errors):
            assert sent.global_positions.tolist() == trace.global_mask.indices.tolist()
            assert sent.k_local == k_local
            assert masks_disjoint(sent.global_mask, sent.local_mask)
            assert np.array_equal((sent.to_dense() + new.residual).values, (update + old.residual).values)
            assert not np.any(new.residual.values[sent.mask.indices])

        assert trace.downlink_support_size <= k_global + cfg.num_clients * k_local
        assert trace.broadcast.support().size <= trace.downlink_support_size
        previous = trace.broadcast


@pytest.mark.integration
def test_uplink_bits_match_payload_size(make_config, runtime):
    cfg = make_config(**TCS, quantizer="fractional", quant_levels=4)
    log = run_tcs(cfg, runtime)
    per_client = payload_bit_length(18, 4, 1, block_size_for(0.05, 18), QuantizerSpec("fractional", 4))
    assert log.column("uplink_bits_total") == [4 * per_client] * 9
    assert log.last.uplink_bits_per_param_per_iter == pytest.approx(per_client / 18)


@pytest.mark.integration
def test_warmup_rounds_are_dense(make_config, runtime):
    cfg = make_config(**TCS, warmup_epochs=1)
    log, traces = collect(run_tcs, cfg, runtime)
    assert [t.compressed for t in traces] == [False] * 3 + [True] * 6
    assert log.column("uplink_bits_total")[:3] == [4 * 32 * 18] * 3
    assert log.column("downlink_support_size")[:3] == [18] * 3
    assert all(not e.residual.values.any() for e in traces[3].old_errors)


@pytest.mark.integration
@pytest.mark.parametrize(
    "overrides",
    [
        dict(scheme="topk", phi_global=0.2),
        dict(scheme="randk", phi_global=0.3),
        dict(scheme="randk", phi_global=0.3, quantizer="scaled_sign"),
        dict(**TCS, quantizer="scaled_sign"),
        dict(**TCS, fairness="plf", phi_min_global=0.1),
        dict(**TCS, model="mlp", hidden_units=4),
    ],
)
def test_compressed_variants_run(make_config, runtime, overrides):
    log = run_experiment(make_config(**overrides), runtime)
    assert len(log) == 9
    assert all(np.isfinite(log.column("train_loss")))
    assert all(bits > 0 for bits in log.column("uplink_bits_total"))


@pytest.mark.integration
def test_randk_mask_is_shared_by_clients(make_config, runtime):
    _, traces = collect(run_tcs, make_config(scheme="randk", phi_global=0.3), runtime)
    for trace in traces:
        positions = [s.global_positions.tolist() for s in trace.sent]
        assert all(p == positions[0] for p in positions)
        assert trace.downlink_support_size == len(positions[0])


@pytest.mark.integration
def test_quantization_error_stays_in_residual(make_config, runtime):
    spec = QuantizerSpec("fractional", 2)
    _, traces = collect(run_tcs, make_config(**TCS, quantizer="fractional", quant_levels=2), runtime)
    for trace in traces:
        for update, sent, old, new in zip(trace.updates, trace.sent, trace.old_errors, trace.new_errors):
            buffered = (update + old.residual).values
            positions = np.concatenate([sent.global_positions, sent.local_positions])
            assert np.array_equal(sent.wire_values(), buffered[positions])
            dequantized = quantize_values(sent.wire_values(), spec).dequantized
            assert np.array_equal(new.residual.values[positions], sent.wire_values() - dequantized)
            rest = np.setdiff1d(np.arange(buffered.size), positions)
            assert np.array_equal(new.residual.values[rest], buffered[rest])


@pytest.mark.integration
def test_runs_are_deterministic_across_thread_counts(make_config, runtime):
    cfg = make_config(**TCS, local_steps=2, quantizer="fractional", quant_levels=4)
    single = run_tcs(cfg, runtime)
    threaded = run_tcs(cfg, RuntimeConfig(threads=8, log_level="INFO", record_wall_time=False))
    assert [r.csv_row() for r in single.records] == [r.csv_row() for r in threaded.records]
    assert np.array_equal(single.final_params.values, threaded.final_params.values)


@pytest.mark.integration
def test_prebuilt_experiment_is_reused(make_config, runtime):
    cfg = make_config()
    exp = build_experiment(cfg)
    assert len(exp.shards) == 4 and len(exp.train) == 180 and len(exp.test) == 60
    a = run_fedavg(cfg, runtime, experiment=exp)
    b = run_fedavg(cfg, runtime)
    assert np.array_equal(a.final_params.values, b.final_params.values)


# Momentum

@pytest.mark.integration
def test_momentum_is_identical_across_clients(make_config, runtime):
    _, traces = collect(run_tcs_momentum, make_config(**TCS, momentum=0.9), runtime)
    for trace in traces:
        assert trace.momenta is not None and len(trace.momenta) == 4
        for w in trace.momenta:
            assert np.array_equal(w.values, trace.momenta[0].values)
        assert np.array_equal(trace.params.values, trace.client_params[0].values - trace.momenta[0].values * trace.lr)


@pytest.mark.integration
def test_zero_momentum_follows_plain_tcs(make_config, runtime):
    # the momentum path scales by lr after averaging, so agreement is up to rounding
    plain = run_tcs(make_config(**TCS), runtime)
    momentum = run_tcs_momentum(make_config(**TCS, momentum=0.0), runtime)
    np.testing.assert_allclose(momentum.final_params.values, plain.final_params.values, rtol=1e-9, atol=1e-12)


@pytest.mark.integration
def test_dense_momentum_baseline_runs(make_config, runtime):
    log = run_experiment(make_config(momentum=0.5), runtime)
    assert len(log) == 9 and np.isfinite(log.last.train_loss)


# Configuration errors

@pytest.mark.unit
def test_momentum_with_local_steps_is_rejected(make_config, runtime):
    with pytest.raises(pydantic.ValidationError):
        make_config(local_steps=2, momentum=0.9)
    with pytest.raises(ConfigurationError):
        run_tcs_momentum(make_config(local_steps=2), runtime)


@pytest.mark.unit
def test_entry_points_check_the_scheme(make_config, runtime):
    with pytest.raises(ConfigurationError):
        run_fedavg(make_config(**TCS), runtime)
    with pytest.raises(ConfigurationError):
        run_tcs(make_config(), runtime)


@pytest.mark.integration
def test_infeasible_layer_floors(make_config, runtime):
    with pytest.raises(ConfigurationError):
        run_tcs(make_config(**TCS, fairness="plf", phi_min_global=0.5), runtime)


@pytest.mark.integration
def test_too_many_clients(make_config, runtime):
    with pytest.raises(ConfigurationError):
        run_fedavg(make_config(num_clients=200), runtime)


@pytest.mark.integration
def test_exploding_run_raises_diverged(make_config, runtime):
    with pytest.raises(DivergedError) as exc_info:
        run_fedavg(make_config(base_lr=1e100, weight_decay=1.0), runtime)
    assert exc_info.value.round is not None


# Convergence at desk scale

CONVERGENCE = dict(
    num_classes=4, num_features=20, num_samples=4000, num_clients=10, batch_size=32, epochs=5, reference_batch=320
)


@pytest.mark.slow
@pytest.mark.integration
def test_tcs_accuracy_tracks_dense_baseline(make_config, runtime):
    dense = run_fedavg(make_config(**CONVERGENCE), runtime)
    tcs = run_tcs(make_config(**CONVERGENCE, scheme="tcs", phi_global=0.1, phi_local=0.01), runtime)
    assert dense.last.test_accuracy >= 0.9
    assert tcs.last.test_accuracy >= dense.last.test_accuracy - 0.02


@pytest.mark.slow
@pytest.mark.integration
def test_momentum_accuracy_at_least_plain_tcs(make_config, runtime):
    common = dict(CONVERGENCE, scheme="tcs", phi_global=0.1, phi_local=0.01, base_lr=0.05)
    plain = run_tcs(make_config(**common), runtime)
    momentum = run_tcs_momentum(make_config(**common, momentum=0.9), runtime)
    assert momentum.last.test_accuracy >= plain.last.test_accuracy - 0.01


@pytest.mark.slow
@pytest.mark.integration
def test_quantized_tcs_accuracy_tracks_dense_baseline(make_config, runtime):
    dense = run_fedavg(make_config(**CONVERGENCE), runtime)
    tcs = run_tcs(
        make_config(
            **CONVERGENCE, scheme="tcs", phi_global=0.1, phi_local=0.01, quantizer="fractional", quant_levels=16
        ),
        runtime,
    )
    assert tcs.last.test_accuracy >= dense.last.test_accuracy - 0.03


@pytest.mark.slow
@pytest.mark.integration
def test_fedsgd_separates_two_blobs(make_config, runtime):
    cfg = make_config(num_classes=2, num_features=2, num_samples=200, cluster_spread=0.5, epochs=50)
    log = run_fedavg(cfg, runtime)
    assert log.last.test_accuracy >= 0.95
