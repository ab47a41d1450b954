import numpy as np
import pytest

from sgunlearn import autodiff as ad
from sgunlearn.autodiff.gradcheck import gradient_check
from sgunlearn.autodiff.params import ParameterStore, adam_step
from sgunlearn.autodiff.second_order import conjugate_gradient_solve, hessian_vector_product
from sgunlearn.errors import DimensionMismatch, NaNEncountered, NoTrace, ShapeMismatch


def check_op(build, shapes, seed=0, tol=1e-4):
    """Gradient-check a scalar function of freshly drawn leaves."""
    rng = np.random.default_rng(seed)
    vals = [rng.normal(size=s) for s in shapes]
    sizes = [v.size for v in vals]
    theta0 = np.concatenate([v.ravel() for v in vals])

    def leaves(theta):
        out, pos = [], 0
        for s, k in zip(shapes, sizes):
            out.append(ad.Tensor(theta[pos : pos + k].reshape(s), requires_grad=True))
            pos += k
        return out

    def loss_fn(theta):
        with ad.no_trace():
            return build(*leaves(theta)).item()

    def grad_fn(theta):
        ls = leaves(theta)
        return np.concatenate([g.ravel() for g in ad.grad(build(*ls), ls)])

    rep = gradient_check(loss_fn, grad_fn, theta0, h=1e-5, tol=tol, n_coords=50)
    assert rep.passed, rep.max_rel_error


W_OUT = np.random.default_rng(99).normal(size=(2, 6, 6, 3))


def weighted(t):
    # a fixed random projection so every output element matters
    w = np.random.default_rng(t.data.size).normal(size=t.shape)
    return ad.sum_(ad.mul(t, w))


PRIMITIVES = {
    "add": (lambda a, b: weighted(ad.add(a, b)), [(3, 4), (4,)]),
    "sub": (lambda a, b: weighted(ad.sub(a, b)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: weighted(ad.mul(a, b)), [(3, 4), (3, 4)]),
    "scale": (lambda a: weighted(ad.scale(a, -2.5)), [(5,)]),
    "matmul": (lambda a, b: weighted(ad.matmul(a, b)), [(2, 3, 4), (4, 5)]),
    "relu": (lambda a: weighted(ad.relu(a)), [(20,)]),
    "leaky_relu": (lambda a: weighted(ad.leaky_relu(a, 0.2)), [(20,)]),
    "tanh": (lambda a: weighted(ad.tanh(a)), [(20,)]),
    "abs": (lambda a: weighted(ad.abs_(a)), [(20,)]),
    "concat": (lambda a, b: weighted(ad.concat([a, b], axis=1)), [(3, 2), (3, 4)]),
    "slice": (lambda a: weighted(ad.slice_(a, (slice(1, 3), slice(None, None, 2)))), [(4, 5)]),
    "reshape": (lambda a: weighted(ad.reshape(a, (6, 2))), [(3, 4)]),
    "gather": (lambda a: weighted(ad.gather_rows(a, np.array([0, 2, 2, 1]))), [(3, 4)]),
    "scatter": (lambda a: weighted(ad.scatter_add_rows(a, np.array([0, 2, 2, 1]), 5)), [(4, 3)]),
    "conv2d": (lambda x, w, b: weighted(ad.conv2d(x, w, b)), [(2, 5, 6, 3), (3, 3, 3, 4), (4,)]),
    "upsample2x": (lambda x: weighted(ad.upsample2x(x)), [(1, 3, 3, 2)]),
    "mean": (lambda a: ad.mean(ad.mul(a, a)), [(4, 5)]),
    "sum_axis": (lambda a: weighted(ad.sum_(a, axis=1)), [(4, 5)]),
    "mse_loss": (lambda a, b: ad.mse_loss(a, b), [(4, 5), (4, 5)]),
    "l1_loss": (lambda a, b: ad.l1_loss(a, b), [(4, 5), (4, 5)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    build, shapes = PRIMITIVES[name]
    check_op(build, shapes)


def test_two_layer_net_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 5))
    y = rng.normal(size=(8, 2))

    def net(w1, b1, w2):
        return ad.mse_loss(ad.matmul(ad.tanh(ad.add(ad.matmul(x, w1), b1)), w2), y)

    check_op(net, [(5, 7), (7,), (7, 2)], seed=1)


def test_forward_values():
    assert np.array_equal(ad.relu(ad.Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    x = ad.Tensor(np.arange(6.0))
    assert ad.mse_loss(x, x).item() == 0.0


def test_identity_kernel_conv():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 7, 9, 2))
    w = np.zeros((3, 3, 2, 2))
    w[1, 1] = np.eye(2)
    out = ad.conv2d(ad.Tensor(x), ad.Tensor(w)).data
    assert np.allclose(out[:, 1:-1, 1:-1], x[:, 1:-1, 1:-1])


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 5, 4, 2))
    w = rng.normal(size=(3, 3, 2, 3))
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    ref = np.zeros((1, 5, 4, 3))
    for i in range(5):
        for j in range(4):
            ref[0, i, j] = np.einsum("abc,abcd->d", xp[0, i : i + 3, j : j + 3], w)
    assert np.allclose(ad.conv2d(ad.Tensor(x), ad.Tensor(w)).data, ref)


def test_shape_mismatch_names_shapes():
    with pytest.raises(ShapeMismatch, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(ad.Tensor(np.zeros((2, 3))), ad.Tensor(np.zeros((4, 5))))
    with pytest.raises(ShapeMismatch):
        ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))


def test_sum_gradient_all_ones_and_untouched_zero():
    store = ParameterStore()
    a = store.add("encoder", "a", np.arange(4.0))
    b = store.add("grl", "b", np.ones(3))
    ga, gb = ad.grad(ad.sum_(a), [a, b])
    assert np.array_equal(ga, np.ones(4))
    assert np.array_equal(gb, np.zeros(3))


def test_backward_without_trace():
    with pytest.raises(NoTrace):
        ad.backward(ad.sum_(ad.Tensor(np.ones(3))))
    t = ad.Tensor(np.ones(3), requires_grad=True)
    with ad.no_trace():
        loss = ad.sum_(t)
    with pytest.raises(NoTrace):
        ad.backward(loss)


def test_gradient_check_quadratic_and_negative_control():
    theta = np.random.default_rng(0).normal(size=60)
    rep = gradient_check(lambda t: 0.5 * t @ t, lambda t: t.copy(), theta, tol=1e-6)
    assert rep.passed and len(rep.coords) >= 50
    bad = gradient_check(lambda t: 0.5 * t @ t, lambda t: 1.01 * t, theta, tol=1e-6)
    assert not bad.passed


def test_corrupted_backward_rule_detected(monkeypatch):
    import sgunlearn.autodiff.tensor as T

    orig = T.tanh

    def broken(a):
        t = np.tanh(a.data)
        return T._result(t, (a,), lambda g: (g * (1.0 - t),), "tanh")  # wrong derivative

    monkeypatch.setattr(T, "tanh", broken)
    x = np.random.default_rng(2).normal(size=20)

    def loss_fn(th):
        return float(np.sum(np.tanh(th)))

    def grad_fn(th):
        leaf = ad.Tensor(th, requires_grad=True)
        return ad.grad(ad.sum_(T.tanh(leaf)), [leaf])[0]

    assert not gradient_check(loss_fn, grad_fn, x, tol=1e-4).passed
    monkeypatch.setattr(T, "tanh", orig)
    assert gradient_check(loss_fn, grad_fn, x, tol=1e-4).passed


# second order -------------------------------------------------------------------


def test_hvp_diag_quadratic():
    a = np.diag([2.0, 4.0])
    hv = hessian_vector_product(lambda t: a @ t, np.array([0.3, -1.2]), np.array([1.0, 1.0]))
    assert np.allclose(hv, [2.0, 4.0], atol=1e-8, rtol=0)
    assert np.array_equal(hessian_vector_product(lambda t: a @ t, np.zeros(2), np.zeros(2)), np.zeros(2))
    with pytest.raises(DimensionMismatch):
        hessian_vector_product(lambda t: a @ t, np.zeros(2), np.zeros(3))


def test_hvp_least_squares():
    rng = np.random.default_rng(5)
    n, d = 40, 6
    x = rng.normal(size=(n, d))
    y = rng.normal(size=n)
    theta = rng.normal(size=d)
    v = rng.normal(size=d)
    grad_fn = lambda t: (2.0 / n) * x.T @ (x @ t - y)
    exact = (2.0 / n) * x.T @ (x @ v)
    hv = hessian_vector_product(grad_fn, theta, v)
    assert np.linalg.norm(hv - exact) / np.linalg.norm(exact) < 1e-5


def test_cg_identity_one_iteration():
    b = np.random.default_rng(6).normal(size=7)
    res = conjugate_gradient_solve(lambda v: v, b, damping=0.0, tol=1e-10)
    assert res.converged and res.iterations == 1 and np.allclose(res.x, b)


def test_cg_diag():
    res = conjugate_gradient_solve(lambda v: np.array([2.0, 4.0]) * v, np.array([2.0, 4.0]), damping=0.0, tol=1e-12)
    assert res.converged and np.allclose(res.x, [1.0, 1.0])


def test_cg_indefinite():
    h = np.diag([1.0, -0.5, 2.0])
    b = np.array([1.0, 1.0, 1.0])
    res = conjugate_gradient_solve(lambda v: h @ v, b, damping=0.0, tol=1e-10)
    assert res.not_converged
    first = conjugate_gradient_solve(lambda v: -v, b, damping=0.0)
    assert first.not_converged and first.iterations == 0
    assert np.allclose(first.x, b)  # steepest-descent fallback: |b|^2 / |b^T H b| = 1
    damped = conjugate_gradient_solve(lambda v: h @ v, b, damping=1.0, tol=1e-10)
    assert damped.converged
    assert np.allclose(damped.x, np.linalg.solve(h + np.eye(3), b))


def test_cg_nan_is_fatal():
    with pytest.raises(NaNEncountered):
        conjugate_gradient_solve(lambda v: v * np.nan, np.ones(3))


def test_cg_monotone_in_h_norm():
    rng = np.random.default_rng(7)
    m = rng.normal(size=(12, 12))
    h = m @ m.T + 0.1 * np.eye(12)
    b = rng.normal(size=12)
    exact = np.linalg.solve(h + 0.01 * np.eye(12), b)
    errs = []
    for k in range(1, 12):
        x = conjugate_gradient_solve(lambda v: h @ v, b, damping=0.01, tol=1e-14, max_iter=k).x
        e = x - exact
        errs.append(e @ (h + 0.01 * np.eye(12)) @ e)
    assert all(b_ <= a_ * (1 + 1e-9) + 1e-18 for a_, b_ in zip(errs, errs[1:]))


def test_cg_matches_dense_solve_on_quadratic_surrogate():
    rng = np.random.default_rng(8)
    m = rng.normal(size=(30, 30))
    a = m @ m.T / 30 + 0.05 * np.eye(30)
    grad_fn = lambda t: a @ t
    theta = rng.normal(size=30)
    g = rng.normal(size=30)
    res = conjugate_gradient_solve(lambda v: hessian_vector_product(grad_fn, theta, v), g, damping=0.01, tol=1e-12, max_iter=500)
    exact = np.linalg.solve(a + 0.01 * np.eye(30), g)
    assert np.linalg.norm(res.x - exact) / np.linalg.norm(exact) < 1e-4


# parameters ------------------------------------------------------------------


def make_store(seed=0):
    rng = np.random.default_rng(seed)
    s = ParameterStore()
    s.add("decoder", "z.w", rng.normal(size=(2, 3)))
    s.add("encoder", "b.w", rng.normal(size=(4,)))
    s.add("encoder", "a.w", rng.normal(size=(2, 2)))
    s.add("grl", "g", rng.normal(size=(3,)))
    s.add("layout", "l", rng.normal(size=(1,)))
    return s


def test_flatten_order_and_round_trip():
    s = make_store()
    assert s.names() == ["a.w", "b.w", "g", "l", "z.w"]
    v = s.flatten()
    assert v.size == s.size == 4 + 4 + 3 + 1 + 6
    assert np.array_equal(v[:4], s["a.w"].data.ravel())
    t = make_store(1)
    t.unflatten(v)
    assert t.equal(s)
    assert np.array_equal(s.flatten(["grl"]), s["g"].data)


def test_partition_masks_disjoint_and_covering():
    s = make_store()
    masks = [s.partition_mask([p]) for p in ad.PARTITIONS]
    total = np.sum(masks, axis=0)
    assert np.array_equal(total, np.ones(s.size))


def test_checkpoint_bit_exact(tmp_path):
    s = make_store()
    s.save(tmp_path / "p.ckpt")
    blob = (tmp_path / "p.ckpt").read_bytes()
    assert blob[:4] == b"SGCK"
    back = ParameterStore.load(tmp_path / "p.ckpt")
    assert back.equal(s) and back.to_bytes() == blob
    assert back.partition_of("g") == "grl"


def test_adam():
    s = make_store()
    before = s.flatten()
    adam_step(s, {n: np.zeros(s[n].shape) for n in s.names()}, lr=0.1)
    assert np.array_equal(s.flatten(), before)

    s = make_store()
    g = {n: np.full(s[n].shape, -3.0) for n in s.names()}
    adam_step(s, g, lr=0.01)
    assert np.allclose(s.flatten() - before, 0.01, atol=1e-8)

    a, b = make_store(), make_store()
    for st in (a, b):
        adam_step(st, {n: np.ones(st[n].shape) for n in st.names()}, lr=0.01)
    assert a.equal(b)
