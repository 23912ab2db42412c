import numpy as np
import pytest

from geost import autodiff as ad
from geost.autodiff import ParamStore, adam_step, load_checkpoint, save_checkpoint
from geost.errors import FormatError

from fdcheck import grad_rel_error, readout

SEEDS = range(20)
TOL = 1e-4


def away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-300) * gap + x, x)


PRIMITIVES = {
    "affine": lambda rng: ((rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)),
                           lambda t, v, T: readout(ad.affine(*v), T), (5, 3)),
    "affine_3d": lambda rng: ((rng.normal(size=(4, 3, 2)), rng.normal(size=(2, 5)), rng.normal(size=5)),
                              lambda t, v, T: readout(ad.affine(*v), T), (4, 3, 5)),
    "leaky_relu": lambda rng: ((away_from_zero(rng, (6, 4)),),
                               lambda t, v, T: readout(ad.leaky_relu(v[0], 0.2), T), (6, 4)),
    "gather_rows": lambda rng: ((rng.normal(size=(6, 3)),),
                                lambda t, v, T: readout(ad.gather_rows(v[0], GATHER), T), (6, 4, 3)),
    "take_rows": lambda rng: ((rng.normal(size=(6, 3)),),
                              lambda t, v, T: readout(ad.take_rows(v[0], np.array([4, 1, 4])), T), (3, 3)),
    "concat_last": lambda rng: ((rng.normal(size=(4, 2)), rng.normal(size=(4, 3))),
                                lambda t, v, T: readout(ad.concat_last(*v), T), (4, 5)),
    "mean_pool_neighbors": lambda rng: ((rng.normal(size=(5, 3, 4)),),
                                        lambda t, v, T: readout(ad.mean_pool_neighbors(v[0]), T), (5, 4)),
    "squared_l2_rows": lambda rng: ((rng.normal(size=(5, 3)),),
                                    lambda t, v, T: readout(ad.squared_l2_rows(v[0]), T), (5,)),
    "l2_rows": lambda rng: ((rng.normal(size=(5, 3)) + 0.5,),
                            lambda t, v, T: readout(ad.l2_rows(v[0]), T), (5,)),
    "chamfer": lambda rng: ((rng.normal(size=(7, 3)), rng.normal(size=(5, 3))),
                            lambda t, v, T: ad.chamfer(*v), None),
    "add_sub_scale": lambda rng: ((rng.normal(size=(3, 2)), rng.normal(size=(3, 2))),
                                  lambda t, v, T: readout(ad.scale(ad.sub(ad.add(v[0], v[1]), ad.scale(v[1], 3.0)), -1.7), T), (3, 2)),
    "add_n": lambda rng: ((rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 2))),
                          lambda t, v, T: readout(ad.add_n(v), T), (3, 2)),
    "mean_total": lambda rng: ((rng.normal(size=(4, 3)),),
                               lambda t, v, T: ad.add(ad.mean(ad.squared_l2_rows(v[0])), ad.scale(ad.total(v[0]), 0.3)), None),
    "reshape": lambda rng: ((rng.normal(size=(4, 6)),),
                            lambda t, v, T: readout(ad.reshape(v[0], (4, 2, 3)), T), (4, 2, 3)),
}
GATHER = np.array([[0, 1, 1, 5], [2, 2, 2, 2], [5, 4, 3, 0], [1, 0, 0, 0], [3, 3, 4, 4], [0, 5, 1, 2]])


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    worst = 0.0
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        inputs, fn, out_shape = PRIMITIVES[name](rng)
        target = rng.normal(size=out_shape) if out_shape else None
        worst = max(worst, grad_rel_error(lambda t, v: fn(t, v, target), list(inputs), rng))
    assert worst < TOL, f"{name}: relative error {worst:.2e}"


def test_chamfer_value_matches_exhaustive_pairing():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(9, 3)), rng.normal(size=(6, 3))
    d2 = np.array([[((p - q) ** 2).sum() for q in b] for p in a])
    expected = np.mean([row.min() for row in d2]) + np.mean([col.min() for col in d2.T])
    t = ad.Tape()
    assert float(ad.chamfer(t.param(a), b).value) == pytest.approx(expected, rel=1e-14)


def test_leaky_relu_subgradient_at_zero_is_one():
    t = ad.Tape()
    x = t.param(np.array([0.0, -1.0, 2.0]))
    t.backward(ad.total(ad.leaky_relu(x, 0.2)))
    np.testing.assert_array_equal(x.grad, [1.0, 0.2, 1.0])


def test_shared_input_accumulates_adjoints():
    t = ad.Tape()
    x = t.param(np.array([[1.0, 2.0]]))
    y = ad.add(x, x)
    t.backward(ad.total(ad.add(y, x)))
    np.testing.assert_array_equal(x.grad, [[3.0, 3.0]])


def test_constants_get_no_gradient():
    t = ad.Tape()
    c = t.constant(np.ones((2, 2)))
    p = t.param(np.ones((2, 2)))
    t.backward(ad.total(ad.add(c, p)))
    assert c.grad is None and p.grad is not None


def test_tape_errors():
    t1, t2 = ad.Tape(), ad.Tape()
    a, b = t1.param(np.ones(2)), t2.param(np.ones(2))
    with pytest.raises(ValueError):
        ad.add(a, b)
    with pytest.raises(ValueError):
        t1.backward(a)
    with pytest.raises(ValueError):
        t1.backward(ad.total(b))
    with pytest.raises(ValueError):
        ad.affine(t1.param(np.ones((2, 3))), np.ones((2, 3)), np.ones(3))
    with pytest.raises(IndexError):
        ad.gather_rows(t1.param(np.ones((2, 3))), np.array([[2]]))


def adam_reference(p, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar loop over the textbook Adam update with L2 decay folded into the gradient."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, 1):
        g = g + wd * p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_adam_matches_reference():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(10, 3))
    store = ParamStore({"w": np.array([0.5, -1.0, 2.0])})
    for i in range(10):
        adam_step(store, {"w": grads[i]}, lr=0.01, wd=0.1)
        for j in range(3):
            assert store.params["w"][j] == pytest.approx(adam_reference([0.5, -1.0, 2.0][j], grads[: i + 1, j], 0.01, 0.1)[-1],
                                                         rel=1e-12)
    assert store.step == 10


def test_adam_rejects_bad_gradients():
    store = ParamStore({"w": np.zeros(3)})
    with pytest.raises(KeyError):
        adam_step(store, {"x": np.zeros(3)}, 0.1)
    with pytest.raises(ValueError):
        adam_step(store, {"w": np.zeros(2)}, 0.1)


def test_adam_keeps_float32():
    store = ParamStore({"w": np.ones(4, dtype=np.float32)})
    adam_step(store, {"w": np.ones(4, dtype=np.float32)}, 1e-3, 1e-5)
    assert store.params["w"].dtype == np.float32 and store.m["w"].dtype == np.float32


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    store = ParamStore({"a.W": rng.normal(size=(3, 2)).astype(np.float32), "a.b": np.zeros(2)})
    adam_step(store, {"a.W": np.ones((3, 2), np.float32)}, 1e-2)
    save_checkpoint(tmp_path / "c.gst", store, {"kind": "test", "nested": {"x": [1, 2]}})
    back, meta = load_checkpoint(tmp_path / "c.gst")
    assert meta["kind"] == "test" and meta["nested"] == {"x": [1, 2]} and back.step == 1
    for name in store.params:
        for src, dst in ((store.params, back.params), (store.m, back.m), (store.v, back.v)):
            np.testing.assert_array_equal(src[name], dst[name])
            assert src[name].dtype == dst[name].dtype


def test_corrupt_checkpoint_is_rejected(tmp_path):
    store = ParamStore({"w": np.ones(3)})
    save_checkpoint(tmp_path / "c.gst", store, {})
    raw = (tmp_path / "c.gst").read_bytes()
    (tmp_path / "bad.gst").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "bad.gst")
    (tmp_path / "short.gst").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "short.gst")
