import numpy as np
import pytest

from warpgrad import tensor as T
from warpgrad.checkpoint import load_tensors, save_tensors
from warpgrad.errors import ContractError, DimensionError, NumericError, TapeError
from warpgrad.gradcheck import gradcheck, relative_error
from warpgrad.tensor import Parameter, Tape, Tensor


def test_tensor_is_float64_and_read_only():
    t = Tensor([1, 2, 3])
    assert t.data.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_non_finite_input_rejected():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])


def test_debug_mode_screens_op_outputs():
    T.set_debug(True)
    try:
        with pytest.raises(NumericError):
            with np.errstate(divide="ignore"):
                T.log(Tensor([0.0]))
    finally:
        T.set_debug(False)


def test_simple_chain_rule():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        y = T.sum(T.mul(x, x) + 3.0 * x)
    g = tape.backward(y)
    np.testing.assert_allclose(g[x], 2 * x.data + 3.0)


def test_fan_out_accumulates():
    x = Tensor(2.0, requires_grad=True)
    with Tape() as tape:
        y = x * x * x + x
    assert tape.backward(y)[x] == pytest.approx(3 * 4.0 + 1.0)


def test_broadcast_gradient_reduces_to_operand_shape():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.ones(4), requires_grad=True)
    with Tape() as tape:
        y = T.sum(a * b)
    g = tape.backward(y)
    assert g[b].shape == (4,)
    np.testing.assert_allclose(g[b], 3.0)


def test_tape_is_single_use():
    x = Tensor(1.0, requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    tape.backward(y)
    with pytest.raises(TapeError):
        tape.backward(y)
    with pytest.raises(TapeError):
        with tape:
            pass


def test_backward_needs_scalar_and_own_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError):
        tape.backward(y)
    with Tape() as other:
        z = T.sum(x)
    with pytest.raises(TapeError):
        tape.backward(z)
    assert other.backward(z)[x].shape == (3,)


def test_no_tape_records_nothing():
    x = Tensor(1.0, requires_grad=True)
    y = x * 3.0
    assert y.node_id is None


def test_unreached_leaf_gets_zero():
    a = Tensor(1.0, requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        y = a * 2.0
    np.testing.assert_array_equal(tape.backward(y)[b], np.zeros(2))


def test_shape_errors():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones(3)), Tensor(np.ones(4)))
    with pytest.raises(DimensionError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_softmax_rows_sum_to_one():
    x = Tensor(np.random.default_rng(0).normal(size=(4, 5)) * 50)
    s = T.softmax(x, axis=1).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0)


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    out = T.conv2d(Tensor(x), Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for i in range(5):
            for j in range(5):
                ref[0, o, i, j] = (xp[0, :, i:i + 3, j:j + 3] * w[o]).sum()
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_conv1d_dilation_matches_direct_loop():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 10))
    w = rng.normal(size=(1, 2, 3))
    out = T.conv1d(Tensor(x), Tensor(w), padding=2, dilation=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (2, 2)))
    ref = np.array([(xp[0, :, t:t + 5:2] * w[0]).sum() for t in range(10)])
    np.testing.assert_allclose(out[0, 0], ref, atol=1e-12)


def test_inv_gradient():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(3, 3)) + 3 * np.eye(3)
    r = rng.normal(size=(3, 3))
    rep = gradcheck(lambda x: T.sum(T.mul(T.inv(x), r)), [a])
    assert rep.passed, str(rep)


def test_gradcheck_detects_a_wrong_backward():
    def bad_square(a):
        a = T.as_tensor(a)
        return T.op("bad", a.data ** 2, (a,), lambda g: (g * a.data,))  # missing factor 2

    rep = gradcheck(lambda x: T.sum(bad_square(x)), [np.array([1.0, 2.0])])
    assert not rep.passed
    assert rep.max_rel_err > 0.4


def test_relative_error_floor():
    rel = relative_error(np.array([1.0, 1e-12]), np.array([1.0, 0.0]))
    assert rel.max() < 1e-8


def test_parameter_assign_checks_shape():
    p = Parameter("w", Tensor(np.zeros(3)))
    p.assign(np.ones(3))
    assert p.value.requires_grad
    with pytest.raises(DimensionError):
        p.assign(np.ones(4))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"a": rng.normal(size=(2, 3)), "b": np.array(np.pi), "c": rng.normal(size=(0, 4))}
    save_tensors(tmp_path / "x.bin", arrays, {"k": 1})
    back, meta = load_tensors(tmp_path / "x.bin")
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_rejects_truncation(tmp_path):
    save_tensors(tmp_path / "x.bin", {"a": np.ones(10)})
    raw = (tmp_path / "x.bin").read_bytes()
    (tmp_path / "x.bin").write_bytes(raw[:-8])
    with pytest.raises(ContractError):
        load_tensors(tmp_path / "x.bin")
