"""Gradient and contract tests for the autodiff core.

Every primitive's analytic gradient is compared against central finite
differences (eps = 1e-5, float64) over repeated random draws.
"""

import zlib

import numpy as np
import pytest

from kgrec import autodiff as ad
from kgrec.autodiff import (AdamState, GruParams, NumericError, ParamRegistry,
                            ShapeError, Tensor, finite_difference_check,
                            gru_cell, gru_run, load_checkpoint,
                            read_checkpoint_meta, save_checkpoint)

N_DRAWS = 50


def _registry_with(rng, shapes):
    reg = ParamRegistry()
    for name, shape in shapes.items():
        reg.register(name, rng.uniform(-1.0, 1.0, size=shape))
    return reg


def _check(build, shapes, rng, tol=1e-6, nudge=None):
    reg = _registry_with(rng, shapes)
    if nudge:
        nudge(reg)
    weight = ad.constant(rng.uniform(-1.0, 1.0, size=build(reg).shape))
    err = finite_difference_check(lambda: ad.sum_all(ad.mul(build(reg), weight)),
                                  reg, eps=1e-5, max_coords=12, rng=rng)
    assert err < tol, f"max relative error {err}"


@pytest.mark.parametrize("name,builder,shapes", [
    ("add", lambda r: ad.add(r["a"], r["b"]), {"a": (3, 4), "b": (3, 4)}),
    ("add_broadcast", lambda r: ad.add(r["a"], r["b"]), {"a": (3, 4), "b": (1, 4)}),
    ("sub", lambda r: ad.sub(r["a"], r["b"]), {"a": (2, 5), "b": (2, 5)}),
    ("mul", lambda r: ad.mul(r["a"], r["b"]), {"a": (3, 4), "b": (3, 4)}),
    ("mul_broadcast", lambda r: ad.mul(r["a"], r["b"]), {"a": (4, 3), "b": (4, 1)}),
    ("square", lambda r: ad.square(r["a"]), {"a": (2, 3)}),
    ("matmul", lambda r: ad.matmul(r["a"], r["b"]), {"a": (3, 4), "b": (4, 2)}),
    ("transpose", lambda r: ad.transpose(r["a"]), {"a": (3, 2)}),
    ("hstack", lambda r: ad.hstack(r["a"], r["b"]), {"a": (3, 2), "b": (3, 4)}),
    ("slice_cols", lambda r: ad.slice_cols(r["a"], 1, 4), {"a": (3, 5)}),
    ("gather_dup", lambda r: ad.gather_rows(r["a"], [0, 2, 0, 1, 0]), {"a": (3, 4)}),
    ("repeat_rows", lambda r: ad.repeat_rows(r["a"], 3), {"a": (2, 4)}),
    ("sum_row_groups", lambda r: ad.sum_row_groups(r["a"], 2), {"a": (6, 3)}),
    ("reshape", lambda r: ad.reshape(r["a"], 6, 2), {"a": (3, 4)}),
    ("row_sums", lambda r: ad.row_sums(r["a"]), {"a": (4, 5)}),
    ("tanh", lambda r: ad.tanh(r["a"]), {"a": (3, 4)}),
    ("sigmoid", lambda r: ad.sigmoid(r["a"]), {"a": (3, 4)}),
    ("log_sigmoid", lambda r: ad.log_sigmoid(r["a"]), {"a": (3, 4)}),
    ("softmax_rows", lambda r: ad.softmax_rows(r["a"]), {"a": (4, 5)}),
    ("gate", lambda r: ad.elementwise_gate(ad.sigmoid(r["s"]), r["a"], r["b"]),
     {"s": (3, 4), "a": (3, 4), "b": (3, 4)}),
    ("gate_broadcast", lambda r: ad.elementwise_gate(ad.sigmoid(r["s"]), r["a"], r["b"]),
     {"s": (1, 4), "a": (3, 4), "b": (3, 4)}),
    ("dot", lambda r: ad.dot(r["a"], r["b"]), {"a": (1, 6), "b": (1, 6)}),
])
def test_primitive_gradients(name, builder, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(N_DRAWS):
        _check(builder, shapes, rng)


def test_relu_gradient_away_from_kink():
    rng = np.random.default_rng(5)
    for _ in range(N_DRAWS):
        reg = ParamRegistry()
        # keep inputs away from zero: central differences straddle the kink
        vals = rng.uniform(0.1, 1.0, size=(3, 4)) * rng.choice([-1.0, 1.0], size=(3, 4))
        reg.register("a", vals)
        err = finite_difference_check(lambda: ad.sum_all(ad.relu(reg["a"])), reg,
                                      eps=1e-5, max_coords=12, rng=rng)
        assert err < 1e-6


def test_affine_gradient_tight():
    rng = np.random.default_rng(7)
    for _ in range(N_DRAWS):
        reg = _registry_with(rng, {"x": (2, 3), "w": (3, 4), "b": (1, 4)})
        err = finite_difference_check(
            lambda: ad.sum_all(ad.affine(reg["x"], reg["w"], reg["b"])),
            reg, eps=1e-5, max_coords=12, rng=rng)
        assert err < 1e-6


def test_softmax_is_probability_vector():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        x = ad.constant(rng.normal(scale=5.0, size=(1, int(rng.integers(1, 9)))))
        y = ad.softmax_rows(x).data
        assert (y >= 0).all()
        assert abs(y.sum() - 1.0) <= 1e-12


def test_softmax_uniform_on_equal_inputs():
    y = ad.softmax_rows(ad.constant(np.zeros((1, 3)))).data
    np.testing.assert_allclose(y, np.full((1, 3), 1 / 3), atol=0)


def test_gate_output_between_inputs():
    rng = np.random.default_rng(13)
    for _ in range(200):
        s = ad.sigmoid(ad.constant(rng.normal(size=(2, 4))))
        a = ad.constant(rng.normal(size=(2, 4)))
        b = ad.constant(rng.normal(size=(2, 4)))
        out = ad.elementwise_gate(s, a, b).data
        lo = np.minimum(a.data, b.data)
        hi = np.maximum(a.data, b.data)
        assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_gate_saturation_returns_first_input():
    a = ad.constant([[1.0, -2.0]])
    b = ad.constant([[5.0, 7.0]])
    s = ad.sigmoid(ad.constant([[1e3, 1e3]]))  # saturates to exactly 1.0
    np.testing.assert_array_equal(ad.elementwise_gate(s, a, b).data, a.data)


def test_backward_simple_quadratic():
    reg = ParamRegistry()
    x = reg.register("x", [[1.0, -2.0, 3.0]])
    ad.dot(x, x).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data)


def test_backward_sums_over_reused_node():
    reg = ParamRegistry()
    x = reg.register("x", [[2.0]])
    # f = x*x + 3x -> df/dx = 2x + 3 = 7
    loss = ad.add(ad.mul(x, x), ad.mul(x, 3.0))
    loss.backward()
    assert x.grad[0, 0] == pytest.approx(7.0)


def test_backward_requires_scalar():
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    with pytest.raises(ShapeError):
        x.backward()


def test_shape_errors():
    a = ad.constant(np.ones((2, 3)))
    b = ad.constant(np.ones((4, 5)))
    with pytest.raises(ShapeError):
        ad.add(a, b)
    with pytest.raises(ShapeError):
        ad.matmul(a, b)
    with pytest.raises(ShapeError):
        ad.hstack(a, ad.constant(np.ones((3, 3))))
    with pytest.raises(ShapeError):
        ad.sum_row_groups(a, 4)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2, 2)))


def test_non_finite_output_aborts_with_op_name():
    big = ad.constant(np.full((1, 1), 1e200))
    with pytest.raises(NumericError, match="mul"):
        ad.mul(big, big)


def test_forward_is_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 3))
    a = ad.tanh(ad.matmul(ad.constant(x), ad.constant(x))).data
    b = ad.tanh(ad.matmul(ad.constant(x), ad.constant(x))).data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# GRU
# ---------------------------------------------------------------------------


def _gru_registry(rng, d):
    reg = ParamRegistry()
    names = ("gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br",
             "gru_wc", "gru_uc", "gru_bc")
    for name in names:
        shape = (1, d) if name.endswith(("bz", "br", "bc")) else (d, d)
        reg.register(name, rng.uniform(-0.8, 0.8, size=shape))
    return reg, GruParams(*(reg[n] for n in names))


def test_gru_zero_weights_zero_input_keeps_zero_state():
    reg = ParamRegistry()
    names = ("gru_wz", "gru_uz", "gru_bz", "gru_wr", "gru_ur", "gru_br",
             "gru_wc", "gru_uc", "gru_bc")
    for name in names:
        shape = (1, 3) if name.endswith(("bz", "br", "bc")) else (3, 3)
        reg.register(name, np.zeros(shape))
    p = GruParams(*(reg[n] for n in names))
    h = gru_cell(ad.constant(np.zeros((1, 3))), ad.constant(np.zeros((1, 3))), p)
    # update gate sits at 0.5 and the candidate at 0, so the state stays 0
    np.testing.assert_array_equal(h.data, np.zeros((1, 3)))


def test_gru_sequence_length_matters():
    rng = np.random.default_rng(17)
    reg, p = _gru_registry(rng, 4)
    x = ad.constant(rng.normal(size=(1, 4)))
    one = gru_run([x], p).data
    two = gru_run([x, x], p).data
    assert np.abs(one - two).max() > 1e-8


def test_gru_empty_sequence_is_zero():
    rng = np.random.default_rng(19)
    _, p = _gru_registry(rng, 4)
    np.testing.assert_array_equal(gru_run([], p).data, np.zeros((1, 4)))


def test_gru_gradient_matches_finite_differences():
    rng = np.random.default_rng(23)
    for _ in range(N_DRAWS):
        reg, p = _gru_registry(rng, 3)
        xs_data = rng.normal(size=(3, 1, 3))
        reg.register("x0", xs_data[0])
        reg.register("x1", xs_data[1])
        reg.register("x2", xs_data[2])

        def f():
            xs = [reg["x0"], reg["x1"], reg["x2"]]
            return ad.sum_all(gru_run(xs, p))

        err = finite_difference_check(f, reg, eps=1e-5, max_coords=4, rng=rng)
        assert err < 1e-4


# ---------------------------------------------------------------------------
# registry, Adam, checkpoints
# ---------------------------------------------------------------------------


def test_registry_rejects_duplicate_names():
    reg = ParamRegistry()
    reg.register("w", np.ones((1, 1)))
    with pytest.raises(ValueError):
        reg.register("w", np.ones((1, 1)))


def test_l2_penalty_value():
    reg = ParamRegistry()
    reg.register("a", [[1.0, 2.0]])
    reg.register("b", [[3.0]])
    assert reg.l2_penalty().item() == pytest.approx(14.0)


def test_adam_zero_gradient_leaves_parameter_unchanged():
    reg = ParamRegistry()
    p = reg.register("p", [[1.0, -2.0]])
    before = p.data.copy()
    AdamState(reg).step(reg, eta=0.1)
    np.testing.assert_array_equal(p.data, before)


def test_adam_first_step_magnitude_close_to_eta():
    reg = ParamRegistry()
    p = reg.register("p", [[0.0, 0.0]])
    p.grad[...] = np.array([[0.5, -2.0]])
    AdamState(reg).step(reg, eta=1e-2)
    # bias-corrected m/sqrt(v) is the gradient sign, up to the epsilon guard
    np.testing.assert_allclose(np.abs(p.data), 1e-2, rtol=1e-6)
    assert p.data[0, 0] < 0 < p.data[0, 1]
    assert (p.grad == 0).all(), "gradients must be zeroed after the step"


def test_adam_trajectories_are_reproducible():
    def run():
        rng = np.random.default_rng(29)
        reg = ParamRegistry()
        p = reg.register("p", rng.normal(size=(2, 2)))
        state = AdamState(reg)
        for _ in range(5):
            loss = ad.sum_all(ad.square(ad.sub(p, ad.constant(np.ones((2, 2))))))
            reg.zero_grads()
            loss.backward()
            state.step(reg, eta=0.05)
        return p.data.copy()

    np.testing.assert_array_equal(run(), run())


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(31)
    reg = _registry_with(rng, {"a": (2, 3), "b": (1, 4)})
    meta = {"dim": 4, "n_users": 2, "n_entities": 3, "n_relations": 5}
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, reg, meta)
    saved = reg.snapshot()
    for _, t in reg.trainable_items():
        t.data += 1.0
    got = load_checkpoint(path, reg)
    assert {k: got[k] for k in meta} == meta
    assert read_checkpoint_meta(path)["n_params"] == 2
    for name, arr in saved.items():
        np.testing.assert_array_equal(reg[name].data, arr)


def test_checkpoint_shape_validation(tmp_path):
    rng = np.random.default_rng(33)
    reg = _registry_with(rng, {"a": (2, 3)})
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, reg, {"dim": 1, "n_users": 1, "n_entities": 1,
                                "n_relations": 1})
    other = ParamRegistry()
    other.register("a", np.zeros((3, 2)))
    with pytest.raises(ValueError, match="shape"):
        load_checkpoint(path, other)
