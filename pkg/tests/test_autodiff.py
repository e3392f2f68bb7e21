import numpy as np
import pytest

from medsegdet import autodiff as ad
from medsegdet.autodiff import (
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    finite_difference_check,
    kernel_ops,
    reset_tape,
)


def test_matmul_identity():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    i2 = Tensor(np.eye(2))
    out = kernel_ops([i2, a], "matmul")
    assert np.array_equal(out.data, a.data)


def test_softmax_symmetry():
    out = kernel_ops(Tensor([0.0, 0.0, 0.0]), "softmax-over-last-axis")
    assert np.allclose(out.data, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)


def test_sigmoid_zero():
    out = kernel_ops(Tensor([0.0]), "sigmoid")
    assert out.data[0] == 0.5


def test_backward_quadratic():
    reset_tape()
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_backward_disconnected_leaf_gets_zero():
    reset_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = Tensor([5.0, 5.0], requires_grad=True)
    loss = (x * x).sum()
    backward(loss)
    assert np.array_equal(y.grad, np.zeros(2))


def test_backward_sigmoid_layer_matches_finite_differences():
    rng = np.random.default_rng(7)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

    def f():
        return ad.sigmoid(w @ x).mean()

    err = finite_difference_check(f, [w, x], step=1e-6)
    assert err < 1e-4


def test_backward_rejects_nonscalar_loss():
    reset_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    with pytest.raises(ShapeError):
        backward(y)


def test_backward_twice_is_deterministic():
    reset_tape()
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    loss = ad.sigmoid(x * x).sum()
    backward(loss)
    first = x.grad.copy()
    backward(loss)
    assert np.array_equal(first, x.grad)


def test_fd_check_exact_quadratic():
    x = Tensor([3.0], requires_grad=True)

    def f():
        return (x * x).sum()

    assert finite_difference_check(f, [x], step=1e-6) < 1e-8


def test_fd_check_constant_function():
    x = Tensor([1.0, 2.0], requires_grad=True)
    c = Tensor([4.0])

    def f():
        return (x * 0.0).sum() + c.sum()

    err = finite_difference_check(f, [x], step=1e-6)
    assert err == 0.0
    assert np.array_equal(x.grad, np.zeros(2))


def test_fd_check_reports_nonfinite():
    x = Tensor([1.0], requires_grad=True)

    def f():
        return ad.log(x - 2.0).sum()  # log of a negative number

    with pytest.raises(NonFiniteError):
        finite_difference_check(f, [x])


def _kernel_cases(rng):
    """One scalar-valued probe per kernel kind, on fresh random inputs."""
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    m = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    pos = Tensor(np.abs(rng.normal(size=(3, 4))) + 0.5, requires_grad=True)
    # keep relu inputs away from the kink where the derivative jumps
    away = rng.normal(size=(3, 4))
    away = away + np.sign(away) * 0.1
    r = Tensor(away, requires_grad=True)
    wconst = rng.normal(size=(3, 4))
    wmat = rng.normal(size=(3, 3))

    return {
        "matmul": ([a, m], lambda: (kernel_ops([a, m], "matmul") * wmat).sum()),
        "add": ([a, b], lambda: (kernel_ops([a, b], "add") * wconst).sum()),
        "mul": ([a, b], lambda: (kernel_ops([a, b], "mul") * wconst).sum()),
        "sigmoid": ([a], lambda: (kernel_ops([a], "sigmoid") * wconst).sum()),
        "softmax-over-last-axis": (
            [a],
            lambda: (kernel_ops([a], "softmax-over-last-axis") * wconst).sum(),
        ),
        "relu": ([r], lambda: (kernel_ops([r], "relu") * wconst).sum()),
        "concat-over-axis": (
            [a, b],
            lambda: (kernel_ops([a, b], "concat-over-axis", axis=0) * np.vstack([wconst, wconst])).sum(),
        ),
        "sum": ([a], lambda: (kernel_ops([a], "sum", axis=1) * np.ones(3)).sum()),
        "mean": ([a], lambda: (kernel_ops([a], "mean", axis=0) * np.ones(4)).sum()),
        "log": ([pos], lambda: (kernel_ops([pos], "log") * wconst).sum()),
        "exp": ([a], lambda: (kernel_ops([a], "exp") * wconst).sum()),
        "slice": ([a], lambda: (kernel_ops([a], "slice", key=(slice(0, 2), slice(1, 3))) * wconst[:2, 1:3]).sum()),
    }


def test_every_kernel_matches_finite_differences_on_100_inputs():
    rng = np.random.default_rng(42)
    kinds = None
    for trial in range(100):
        cases = _kernel_cases(rng)
        if kinds is None:
            kinds = set(cases)
        for kind, (params, f) in cases.items():
            err = finite_difference_check(f, params, step=1e-6, max_coords_per_param=4, seed=trial)
            assert err < 1e-4, f"{kind} failed at trial {trial}: {err}"


def test_softmax_simplex_invariant():
    rng = np.random.default_rng(3)
    for _ in range(50):
        x = Tensor(rng.normal(scale=5.0, size=(4, 6)))
        s = ad.softmax(x).data
        assert np.all(s >= 0)
        assert np.all(np.abs(s.sum(axis=-1) - 1.0) < 1e-12)


def test_shape_mismatch_diagnostic_names_op_and_shapes():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((4, 5)))
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(4, 5\)"):
        kernel_ops([a, b], "matmul")


def test_kernel_ops_rejects_nonfinite_input():
    a = Tensor([np.inf, 1.0])
    with pytest.raises(NonFiniteError):
        kernel_ops([a], "exp")


def test_tape_ids_are_unique_and_topological():
    tape = reset_tape()
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = ad.sigmoid(x)
    z = (y * x).sum()
    ids = [n.tensor._node_id for n in tape.nodes]
    assert ids == sorted(set(ids))
    for node in tape.nodes:
        if node.parent_ids:
            assert max(node.parent_ids) < node.tensor._node_id
    assert z.node_id == len(tape.nodes) - 1


def test_no_grad_suppresses_recording():
    tape = reset_tape()
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.sigmoid(x)
    assert not y.requires_grad
    assert len(tape.nodes) == 0


def test_embedding_lookup_gradient_accumulates_repeats():
    reset_tape()
    table = Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    out = ad.embedding_lookup(table, [0, 2, 0])
    loss = out.sum()
    backward(loss)
    assert np.array_equal(table.grad, [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_bilinear_upsample_gradient():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(4, 4)), requires_grad=True)
    w = rng.normal(size=(8, 8))

    def f():
        return (ad.bilinear_upsample(x, (8, 8)) * w).sum()

    assert finite_difference_check(f, [x], step=1e-6) < 1e-4


def test_bilinear_upsample_preserves_constant_grid():
    x = Tensor(np.full((4, 4), 2.5))
    out = ad.bilinear_upsample(x, (12, 12))
    assert np.allclose(out.data, 2.5, atol=1e-12)
