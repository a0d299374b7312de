import numpy as np
import pytest

from dtnet import ops
from dtnet.tensor import Tape, Tensor, active_tape


def test_integer_input_is_promoted_to_float64():
    assert Tensor([1, 2, 3]).dtype == np.float64
    assert Tensor(np.ones(2, np.float32)).dtype == np.float32


def test_zero_extent_rejected():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_ops_outside_tape_record_nothing():
    x = Tensor([1.0, -2.0])
    y = ops.relu(x)
    assert active_tape() is None
    np.testing.assert_array_equal(y.data, [1.0, 0.0])


def test_unwatched_inputs_are_not_recorded():
    with Tape() as tape:
        ops.relu(Tensor([1.0]))
    assert tape.nodes == []


def test_gradient_accumulates_over_fan_out():
    x = Tensor(np.array([1.0, 2.0, 3.0]))
    with Tape() as tape:
        tape.watch(x)
        y = ops.sum(ops.add(ops.mul(x, x), x))
    (gx,) = tape.gradient(y, [x])
    np.testing.assert_allclose(gx, 2 * x.data + 1)


def test_gradient_wrt_intermediate_is_kept():
    x = Tensor(np.array([1.0, -1.0]))
    with Tape() as tape:
        tape.watch(x)
        h = ops.mul(x, Tensor([3.0, 3.0]))
        y = ops.sum(ops.relu(h))
    gh, gx = tape.gradient(y, [h, x])
    np.testing.assert_array_equal(gh, [1.0, 0.0])
    np.testing.assert_array_equal(gx, [3.0, 0.0])


def test_unreached_source_gets_zeros_of_its_dtype():
    x = Tensor(np.ones(3, np.float32))
    z = Tensor(np.ones(2, np.float32))
    with Tape() as tape:
        tape.watch(x, z)
        y = ops.sum(x)
    gx, gz = tape.gradient(y, [x, z])
    assert gz.dtype == np.float32
    np.testing.assert_array_equal(gz, 0)


def test_second_backward_pass_raises():
    x = Tensor([1.0])
    with Tape() as tape:
        tape.watch(x)
        y = ops.sum(x)
    tape.gradient(y, [x])
    with pytest.raises(RuntimeError):
        tape.gradient(y, [x])


def test_nested_tapes_use_innermost():
    with Tape() as outer:
        with Tape() as inner:
            assert active_tape() is inner
        assert active_tape() is outer
    assert active_tape() is None
