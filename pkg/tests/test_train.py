import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dtnet import model as M
from dtnet import train as tr
from dtnet.dataio import SynthSpec, generate_sample
from dtnet.gradcheck import gradcheck
from dtnet.tensor import Tape, Tensor

TINY = M.DtNetConfig(encoder_filters=(4, 4, 4, 8, 8), input_size=32, num_classes=3)


def synth(n, seed, classes=3, size=32):
    spec = SynthSpec(n, size, classes, seed)
    samples = [generate_sample(spec, i) for i in range(n)]
    return np.stack([s.image for s in samples]), np.stack([s.mask for s in samples])


@pytest.fixture(scope="module")
def data():
    return synth(8, 0), synth(4, 1)


# -- loss ---------------------------------------------------------------------


@pytest.mark.parametrize("c", [2, 5])
def test_uniform_logits_give_log_c(c):
    loss = tr.softmax_xent(np.zeros((2, c, 3, 3)), np.zeros((2, 3, 3), int))
    assert float(loss.data) == pytest.approx(math.log(c))


def test_peaked_logits_give_tiny_loss(rng):
    labels = rng.integers(0, 4, size=(1, 3, 3))
    logits = np.zeros((1, 4, 3, 3))
    np.put_along_axis(logits, labels[:, None], 50.0, axis=1)
    assert float(tr.softmax_xent(logits, labels).data) < 1e-6


def test_loss_is_stable_for_large_logits():
    loss = tr.softmax_xent(np.array([[[[1000.0]], [[0.0]]]]), np.array([[[1]]]))
    assert float(loss.data) == pytest.approx(1000.0)


def test_loss_gradient_matches_finite_differences(rng):
    labels = rng.integers(0, 3, size=(1, 2, 2))
    z = Tensor(rng.normal(size=(1, 3, 2, 2)))
    assert gradcheck(lambda t: tr.softmax_xent(t, labels), [z]).passed
    with Tape() as tape:
        tape.watch(z)
        loss = tr.softmax_xent(z, labels)
    (g,) = tape.gradient(loss, [z])
    p = np.exp(z.data) / np.exp(z.data).sum(axis=1, keepdims=True)
    onehot = np.eye(3)[labels].transpose(0, 3, 1, 2)
    np.testing.assert_allclose(g, (p - onehot) / 4, atol=1e-15)


def test_loss_errors():
    with pytest.raises(ValueError):
        tr.softmax_xent(np.zeros((1, 2, 2, 2)), np.full((1, 2, 2), 2))
    with pytest.raises(ValueError):
        tr.softmax_xent(np.zeros((1, 2, 2, 2)), np.zeros((1, 3, 3), int))


# -- optimizer ----------------------------------------------------------------


def test_adam_first_step_hand_value():
    p = Tensor(np.zeros(1))
    state = tr.AdamState.zeros_like([p])
    tr.adam_step([p], [np.ones(1)], state)
    assert state.t == 1
    assert p.data[0] == pytest.approx(-0.001 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_gradient_is_a_no_op():
    p = Tensor(np.array([1.0, -2.0]))
    state = tr.AdamState.zeros_like([p])
    tr.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    np.testing.assert_array_equal(state.m[0], 0)
    np.testing.assert_array_equal(state.v[0], 0)


def test_adam_rejects_non_finite_gradient():
    p = Tensor(np.zeros(2))
    state = tr.AdamState.zeros_like([p])
    with pytest.raises(FloatingPointError, match="enc1/w"):
        tr.adam_step([p], [np.array([0.0, np.nan])], state, ["enc1/w"])
    assert state.t == 0


@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1e-6, 1e3))
def test_adam_step_size_bound(seed, scale):
    rng = np.random.default_rng(seed)
    p = Tensor(np.zeros(16))
    state = tr.AdamState.zeros_like([p], lr=1e-3)
    for _ in range(30):
        before = p.data.copy()
        tr.adam_step([p], [scale * rng.standard_cauchy(16)], state)
        assert np.abs(p.data - before).max() <= 10 * state.lr


# -- loop -----------------------------------------------------------------------


def test_one_epoch_contract(data):
    (x, y), _ = data
    run = tr.train(M.build(TINY), (x[:4], y[:4]), (x[4:], y[4:]), epochs=1)
    assert len(run.records) == 1
    assert np.isfinite(run.records[0].train_loss)
    assert run.wall_time > 0


def test_identical_seeds_identical_runs(data):
    train_set, test_set = data
    a = tr.train(M.build(TINY, 3), train_set, test_set, 2, seed=3)
    b = tr.train(M.build(TINY, 3), train_set, test_set, 2, seed=3)
    assert a.records == b.records
    assert a.params_digest == b.params_digest
    c = tr.train(M.build(TINY, 3), train_set, test_set, 2, seed=4)
    assert c.params_digest != a.params_digest


def test_training_checks_data_shapes(data):
    train_set, test_set = data
    with pytest.raises(ValueError):
        tr.train(M.build(M.DtNetConfig(encoder_filters=(4, 4, 4, 8, 8), input_size=64)), train_set, test_set, 1)
    with pytest.raises(ValueError):
        tr.train(M.build(TINY), train_set, test_set, 0)


def test_evaluation_leaves_parameters_alone(data):
    model = M.build(TINY)
    before = model.store.digest()
    res = tr.evaluate(model, data[1])
    assert res.mode == "infer"
    assert model.store.digest() == before


def test_checkpoints_written(tmp_path, data):
    model = M.build(TINY)
    tr.train(model, *data, epochs=2, out_dir=tmp_path, checkpoint_every=1)
    assert M.load(tmp_path / "checkpoints" / "epoch_002").store.digest() == model.store.digest()
    assert (tmp_path / "checkpoints" / "epoch_001" / "config.txt").exists()


def test_loss_decreases_on_two_class_toy():
    train_set, test_set = synth(8, 10, classes=2), synth(4, 11, classes=2)
    cfg = M.DtNetConfig(encoder_filters=(4, 4, 4, 8, 8), input_size=32, num_classes=2)
    run = tr.train(M.build(cfg, 0), train_set, test_set, 10, seed=0)
    losses = np.array([r.train_loss for r in run.records])
    smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
    assert losses[-1] < losses[0]
    assert (np.diff(smooth) < 0).all()


# -- reports and harnesses ----------------------------------------------------------


def test_curves_and_kv_roundtrip(tmp_path, data):
    run = tr.train(M.build(TINY), *data, epochs=2)
    tr.write_curves(run, tmp_path / "c.csv")
    rows = tr.read_curves(tmp_path / "c.csv")
    assert [(r["epoch"], r["split"]) for r in rows] == [(1, "train"), (1, "test"), (2, "train"), (2, "test")]
    assert rows[3]["mean_dice"] == pytest.approx(run.records[1].test_dice, abs=1e-8)
    tr.write_kv(tmp_path / "kv.txt", tr.run_manifest_pairs(run))
    kv = tr.read_kv(tmp_path / "kv.txt")
    assert kv["seed"] == "0"
    assert kv["config_digest"] == TINY.digest()
    assert kv["config.num_classes"] == "3"


def test_threshold_sweep_files(tmp_path, data):
    entries = tr.threshold_sweep(TINY, [None, 0.1, 0.3, 0.5], *data, epochs=1, out_dir=tmp_path)
    assert [e.label for e in entries] == ["off", "T0.1-epsilon", "T0.3-epsilon", "T0.5-epsilon"]
    curve_files = sorted(tmp_path.glob("curves_*.csv"))
    assert len(curve_files) == 4
    for f in curve_files:
        rows = tr.read_curves(f)
        assert sum(r["split"] == "test" for r in rows) == 1
        assert sum(r["split"] == "train" for r in rows) == 1
    assert entries[0].config.effective_threshold is None
    table = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(table) == 5


def test_single_threshold_sweep_equals_plain_training(data):
    (entry,) = tr.threshold_sweep(TINY, [0.1], *data, epochs=1, seed=2)
    run = tr.train(M.build(TINY, 2), *data, 1, seed=2)
    assert entry.run.records == run.records


def test_sweep_variants():
    entries = tr.threshold_sweep(TINY, [0.3], synth(4, 0), synth(2, 1), 1, variants=("hard", "epsilon"))
    assert [e.config.threshold.variant for e in entries] == ["hard", "epsilon"]


def test_variant_configs():
    counts = {n: M.count_config_params(tr.variant_config(TINY, n)).total for n in tr.ABLATIONS}
    assert counts["DT-Net-no-2"] == counts["DT-Net"] == counts["DT-Net-no-3"] == counts["DT-Net-*"]
    assert counts["DT-Net-no-1"] != counts["DT-Net"]
    assert counts["DT-Net-no-1-2"] == counts["DT-Net-no-1"]
    assert tr.variant_config(TINY, "DT-Net-*").threshold.variant == "hard"
    assert tr.variant_config(TINY, "DT-Net-no-1-2").effective_threshold is None


def test_ablation_suite_rows(tmp_path):
    entries = tr.ablation_suite(TINY, synth(4, 0), synth(2, 1), 1, out_dir=tmp_path)
    assert len(entries) == 6
    lines = (tmp_path / "ablation.csv").read_text().splitlines()
    assert len(lines) == 7
    assert lines[0].startswith("variant,params,threshold")
