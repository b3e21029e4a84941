import numpy as np
import pytest

from mmdpose import fbi, generator, net, refiner
from mmdpose.skeleton import mpjpe
from mmdpose.synth import NUM_ACTIONS, SynthConfig, make_dataset
from mmdpose.loss import Normalizer
from mmdpose.training import TrainConfig

from oracles import mpjpe_loop

SMALL = dict(hidden_dim=48, num_residual_blocks=1)


@pytest.fixture(scope="module")
def trained(small_ds):
    cfg = TrainConfig(epochs=4, batch_size=64, seed=2)
    return {mode: refiner.train_refiner(small_ds, mode, refiner.LossPolicy(), cfg, SMALL) for mode in refiner.MODES}


def test_input_dimensions(topo):
    assert refiner.input_dim("base", topo) == 34
    assert refiner.input_dim("final", topo) == 93
    assert refiner.refiner_spec("final", topo).output_dim == 51


def test_mode_input_mismatch(trained, small_ds):
    base, final = trained["base"][0], trained["final"][0]
    s = small_ds[0]
    with pytest.raises(ValueError):
        refiner.refine(base, s.pose2d_noisy, s.coarse_z_noisy, s.fbi_noisy)
    with pytest.raises(ValueError):
        refiner.refine(final, s.pose2d_noisy)
    with pytest.raises(ValueError):
        refiner.RefinerModel(base.net, "final", base.norm_2d, base.norm_z, base.norm_3d)


def test_refine_contract(trained, small_ds):
    final = trained["final"][0]
    s = small_ds[3]
    a = refiner.refine(final, s.pose2d_noisy, s.coarse_z_noisy, s.fbi_noisy)
    b = refiner.refine(final, s.pose2d_noisy, s.coarse_z_noisy, s.fbi_noisy)
    assert a.shape == (17, 3) and np.array_equal(a, b)
    assert np.all(a[0] == 0.0)
    batch = refiner.predict_dataset(final, small_ds.subset(np.arange(3, 4)))
    assert np.allclose(batch[0], a, rtol=1e-10, atol=1e-9)


def test_final_inputs_layout(trained, small_ds):
    final = trained["final"][0]
    x = refiner.build_inputs(final, *refiner.channels(small_ds, "final"))
    assert x.shape == (len(small_ds), 93)
    assert np.array_equal(x[:, 51:].reshape(-1, 14, 3), fbi.one_hot(small_ds.fbi_noisy))


def test_metrics_and_alpha_trajectory(trained):
    for mode, (model, metrics) in trained.items():
        alphas = [m["alpha"] for m in metrics]
        assert all(0.01 <= a <= 0.99 for a in alphas)
        assert alphas[-1] > alphas[0]
        assert metrics[-1]["test_mpjpe"] < metrics[0]["test_mpjpe"]
        assert model.optim is not None and model.optim.step > 0


def test_same_seed_same_initialisation_procedure(small_ds):
    cfg = TrainConfig(epochs=0, seed=9)
    base, _ = refiner.train_refiner(small_ds, "base", refiner.LossPolicy(), cfg, SMALL)
    final, _ = refiner.train_refiner(small_ds, "final", refiner.LossPolicy(), cfg, SMALL)
    # same standard-normal draws, rescaled by each model's fan-in
    unit_final = final.net.params["stem.W"][:34] / np.sqrt(2.0 / 93)
    unit_base = base.net.params["stem.W"] / np.sqrt(2.0 / 34)
    assert np.allclose(unit_final, unit_base, rtol=1e-12)
    assert np.all(base.net.params["out.W"] == 0.0)


def test_training_deterministic(small_ds):
    cfg = TrainConfig(epochs=2, batch_size=64, seed=4)
    a = refiner.train_refiner(small_ds, "final", refiner.LossPolicy(), cfg, SMALL)
    b = refiner.train_refiner(small_ds, "final", refiner.LossPolicy(), cfg, SMALL)
    assert a[1] == b[1]
    assert all(np.array_equal(a[0].net.params[k], b[0].net.params[k]) for k in a[0].net.params)


def test_epsilon_zero_matches_dedicated_l2_path(small_ds):
    cfg = TrainConfig(epochs=2, batch_size=64, seed=4)
    a, ma = refiner.train_refiner(small_ds, "final", refiner.LossPolicy(epsilon=0.0), cfg, SMALL)
    b, mb = refiner.train_refiner(small_ds, "final", refiner.LossPolicy(l2_path=True), cfg, SMALL)
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)
    assert [m["test_mpjpe"] for m in ma] == [m["test_mpjpe"] for m in mb]


def test_gradient_clipping(small_ds):
    loose = TrainConfig(epochs=2, batch_size=64, seed=4, max_grad_norm=1e6)
    plain = TrainConfig(epochs=2, batch_size=64, seed=4)
    a, ma = refiner.train_refiner(small_ds, "base", refiner.LossPolicy(), loose, SMALL)
    b, mb = refiner.train_refiner(small_ds, "base", refiner.LossPolicy(), plain, SMALL)
    assert all(np.array_equal(a.net.params[k], b.net.params[k]) for k in a.net.params)
    assert [m["clipped_steps"] for m in ma] == [0, 0]
    tight = TrainConfig(epochs=2, batch_size=64, seed=4, max_grad_norm=1e-6)
    _, mt = refiner.train_refiner(small_ds, "base", refiner.LossPolicy(), tight, SMALL)
    n_batches = -(-len(small_ds.train) // 64)
    assert [m["clipped_steps"] for m in mt] == [n_batches, n_batches]
    with pytest.raises(ValueError):
        TrainConfig(max_grad_norm=0.0)


def test_fixed_alpha_policy(small_ds):
    _, metrics = refiner.train_refiner(small_ds, "base", refiner.LossPolicy(alpha_policy="fixed", alpha=0.3),
                                       TrainConfig(epochs=2, seed=1), SMALL)
    assert [m["alpha"] for m in metrics] == [0.3, 0.3]


def test_generator_fed_inputs(small_ds):
    g, _ = generator.train_generator(small_ds, generator.default_specs(hidden_dim=16, num_residual_blocks=1),
                                     TrainConfig(epochs=1, seed=0))
    model, _ = refiner.train_refiner(small_ds, "final", refiner.LossPolicy(), TrainConfig(epochs=1, seed=0),
                                     SMALL, input_source="generator", generator=g)
    assert model.input_source == "generator"
    assert refiner.predict_dataset(model, small_ds.test, g).shape == (len(small_ds.test), 17, 3)
    with pytest.raises(ValueError):
        refiner.predict_dataset(model, small_ds.test)


def test_evaluate_perfect_and_bruteforce(small_ds):
    test = small_ds.test
    table = refiner.evaluate(test.pose3d_gt, test)
    assert np.all(table.per_action == 0.0) and table.average == 0.0
    rng = np.random.default_rng(0)
    pred = test.pose3d_gt + rng.normal(0, 20, test.pose3d_gt.shape)
    table = refiner.evaluate(pred, test)
    brute = sum(mpjpe_loop(p.tolist(), g.tolist()) for p, g in zip(pred, test.pose3d_gt)) / len(test)
    assert table.average == pytest.approx(brute, rel=1e-12)
    weighted = np.sum(table.per_action * table.counts) / np.sum(table.counts)
    assert table.average == pytest.approx(weighted, rel=1e-12)
    assert len(table.row()) == NUM_ACTIONS + 1


def test_evaluate_shuffle_invariant_and_missing_bins(small_ds):
    test = small_ds.test
    pred = test.pose3d_gt + 5.0 * np.sign(test.pose3d_gt)
    perm = np.random.default_rng(1).permutation(len(test))
    a = refiner.evaluate(pred, test)
    b = refiner.evaluate(pred[perm], test.subset(perm))
    assert np.allclose(a.per_action, b.per_action, rtol=1e-12) and a.average == pytest.approx(b.average, rel=1e-12)
    sub = test.subset(test.action != 4)
    t = refiner.evaluate(sub.pose3d_gt, sub)
    assert t.missing == [4] and np.isnan(t.per_action[4]) and t.average == 0.0


def test_one_sample_overfit():
    # normalisers come from a larger split so the single sample is not the mean
    ref = make_dataset(SynthConfig.default(seed=3, count=500)).train
    n = len(ref)
    spec = dict(hidden_dim=64, num_residual_blocks=2, use_batch_stats_norm=False, dropout_rate=0.0)
    start = refiner.RefinerModel(refiner.new_refiner_net(refiner.refiner_spec("final", **spec), 0), "final",
                                 Normalizer.fit(ref.pose2d_noisy.reshape(n, -1)), Normalizer.fit(ref.coarse_z_gt),
                                 Normalizer.fit(ref.pose3d_gt.reshape(n, -1)))
    one = ref.subset([0])
    assert refiner.predict_dataset(start, one).std() > 0
    model, metrics = refiner.train_refiner(one, "final", refiner.LossPolicy(), TrainConfig(epochs=300, batch_size=1),
                                           model=start)
    assert metrics[0]["train_mpjpe"] > 50.0
    assert metrics[-1]["train_mpjpe"] < 1.0
    assert np.array_equal(start.net.params["out.W"], np.zeros_like(start.net.params["out.W"]))


def test_learning_rate_decay_schedule():
    cfg = TrainConfig(learning_rate=1e-3, lr_decay=0.5)
    assert [cfg.epoch_learning_rate(e) for e in (1, 2, 3)] == [1e-3, 5e-4, 2.5e-4]
    assert TrainConfig(learning_rate=1e-3).epoch_learning_rate(7) == 1e-3
    with pytest.raises(ValueError):
        TrainConfig(lr_decay=0.0)
