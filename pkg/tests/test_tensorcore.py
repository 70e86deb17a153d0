import numpy as np
import pytest

from attrikit import tensorcore as tc
from attrikit.tensorcore import Tensor

from gradcheck import check_grads

RNG = np.random.default_rng(0)


def t64(shape, rng, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


# -- forward identities -------------------------------------------------------


def test_cosine_of_self_is_one():
    for seed in range(20):
        u = Tensor(np.random.default_rng(seed).standard_normal(16), dtype=np.float64)
        c = tc.cosine(u, u)
        assert abs(float(c.data) - 1.0) < 1e-14


def test_softmax_of_constant_is_uniform():
    for k in (2, 5, 9):
        x = Tensor(np.full((k,), 3.7, dtype=np.float64))
        s = tc.softmax(x)
        assert np.allclose(s.data, 1.0 / k, atol=1e-15)


def test_softmax_guarded_against_large_logits():
    x = Tensor(np.array([1e4, -1e4, 0.0], dtype=np.float64))
    s = tc.softmax(x)
    assert np.all(np.isfinite(s.data))
    assert abs(float(s.data.sum()) - 1.0) < 1e-12


def test_restricted_broadcast_rejects_rank_promotion():
    a = Tensor(np.zeros((4, 3)))
    b = Tensor(np.zeros((4,)))
    with pytest.raises(tc.ShapeMismatch):
        _ = a + b  # (4,) is not a suffix of (4, 3)


def test_suffix_broadcast_bias_add():
    a = Tensor(np.ones((2, 5, 3)), requires_grad=True)
    b = Tensor(np.arange(3, dtype=np.float32), requires_grad=True)
    out = (a + b).sum()
    out.backward()
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, 10.0)


def test_log_of_nonpositive_raises():
    with pytest.raises(tc.NonFinite):
        Tensor(np.array([1.0, -1.0])).log()


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(tc.ShapeMismatch):
        (x * 2.0).backward()


def test_grad_accumulation_is_additive():
    x = Tensor(np.array([3.0], dtype=np.float64), requires_grad=True)
    y = (x * 2.0 + x * 5.0).sum()
    y.backward()
    assert np.allclose(x.grad, 7.0)


def test_backward_of_sum_equals_sum_of_backwards():
    rng = np.random.default_rng(7)
    x = t64((4, 3), rng)

    def run(fn):
        x.zero_grad()
        fn().backward()
        return x.grad.copy()

    ga = run(lambda: (x * x).sum())
    gb = run(lambda: x.sum() * 2.0)
    gboth = run(lambda: (x * x).sum() + x.sum() * 2.0)
    assert np.allclose(ga + gb, gboth, atol=1e-12)


def test_no_grad_blocks_graph():
    x = Tensor(np.ones(3), requires_grad=True)
    with tc.no_grad():
        y = (x * 2.0).sum()
    assert not y.requires_grad


# -- gradient checks per op ----------------------------------------------------


def _ops_under_test(rng):
    a = t64((3, 4), rng)
    b = t64((3, 4), rng)
    w = t64((4, 5), rng)
    gamma = Tensor(1.0 + 0.1 * rng.standard_normal(4), requires_grad=True, dtype=np.float64)
    beta = t64((4,), rng, scale=0.1)
    q = t64((2, 3, 4), rng)
    k = t64((2, 5, 4), rng)
    v = t64((2, 5, 4), rng)
    table = t64((6, 4), rng)
    ids = rng.integers(0, 6, size=(5,))
    u1 = t64((8,), rng)
    u2 = t64((8,), rng)
    return [
        ("add", lambda: ((a + b) * (a + b)).mean(), [a, b]),
        ("mul", lambda: ((a * b) + a).mean(), [a, b]),
        ("div", lambda: (a / (b * b + 2.0)).mean(), [a, b]),
        ("matmul", lambda: tc.matmul(a, w).mean(), [a, w]),
        ("layernorm", lambda: (tc.layernorm(a, gamma, beta) * b.data).mean(), [a, gamma, beta]),
        ("softmax", lambda: (tc.softmax(a) * b.data).sum(), [a]),
        ("gelu", lambda: tc.gelu(a).mean(), [a]),
        ("mean_reduce", lambda: (a.mean(axis=1) * b.data[:, 0]).sum(), [a]),
        ("concat", lambda: (tc.concat([a, b], axis=1).pow(2)).mean(), [a, b]),
        ("slice", lambda: (a[1:, :2] * 3.0).sum(), [a]),
        ("attention", lambda: tc.attention(q, k, v).mean(), [q, k, v]),
        ("embedding", lambda: tc.embedding(table, ids).mean(), [table]),
        ("cosine", lambda: tc.cosine(u1, u2), [u1, u2]),
        ("exp", lambda: (a * 0.3).exp().mean(), [a]),
        ("log", lambda: (a * a + 1.0).log().mean(), [a]),
        ("broadcast", lambda: (tc.broadcast_to(u1.reshape(1, 8), (3, 8)) * 2.0).mean(), [u1]),
        ("transpose_reshape", lambda: (a.transpose((1, 0)).reshape(2, 6) * b.data.T.reshape(2, 6)).mean(), [a]),
        ("sqrt", lambda: (a * a + 1.0).sqrt().mean(), [a]),
        ("tanh", lambda: a.tanh().mean(), [a]),
    ]


@pytest.mark.parametrize("seed", range(5))
def test_finite_difference_every_op(seed):
    rng = np.random.default_rng(seed)
    for name, fn, leaves in _ops_under_test(rng):
        err = check_grads(lambda _: fn(), leaves)
        assert err < 1e-4, f"op {name} grad error {err:.2e}"


def test_attention_masked_matches_dense_on_visible_keys():
    rng = np.random.default_rng(3)
    q = Tensor(rng.standard_normal((1, 2, 4)), dtype=np.float64)
    k = Tensor(rng.standard_normal((1, 5, 4)), dtype=np.float64)
    v = Tensor(rng.standard_normal((1, 5, 4)), dtype=np.float64)
    mask = np.zeros((1, 2, 5))
    mask[:, :, 3:] = -1e9
    got = tc.attention(q, k, v, mask=mask)
    ref = tc.attention(q, k[:, :3, :], v[:, :3, :])
    assert np.allclose(got.data, ref.data, atol=1e-12)


# -- optimizer -----------------------------------------------------------------


def test_adam_zero_grad_zero_decay_keeps_params():
    p = Tensor(np.array([1.0, -2.0], dtype=np.float64), requires_grad=True)
    state = tc.adam_init([p])
    before = p.data.copy()
    tc.adam_step([p], [np.zeros(2)], state, lr=0.1, weight_decay=0.0)
    assert np.array_equal(p.data, before)


def test_adam_descends_on_quadratic():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = tc.adam_init([p])
    tc.adam_step([p], [2.0 * p.data], state, lr=0.1, weight_decay=0.0)
    assert float(p.data[0]) < 1.0


def test_adam_converges_on_2d_quadratic():
    # convex oracle: unique minimizer of f(x) = x'Ax is the origin
    A = np.array([[3.0, 0.5], [0.5, 1.0]])
    p = Tensor(np.array([1.0, -1.5]), requires_grad=True, dtype=np.float64)
    state = tc.adam_init([p])
    for _ in range(200):
        g = 2.0 * A @ p.data
        tc.adam_step([p], [g], state, lr=0.1, weight_decay=0.0)
    assert float(np.linalg.norm(p.data)) < 1e-2


def test_adam_nonfinite_raises():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = tc.adam_init([p])
    with pytest.raises(tc.NonFinite):
        tc.adam_step([p], [np.array([np.nan])], state, lr=0.1)


# -- gradient clipping -----------------------------------------------------------


def test_clip_below_threshold_bitwise_unchanged():
    g = np.array([0.3, 0.4], dtype=np.float64)  # norm 0.5
    before = g.copy()
    norm = tc.clip_grad_norm([g], max_norm=1.0)
    assert norm == pytest.approx(0.5)
    assert np.array_equal(g, before)


def test_clip_scales_by_definition():
    g = np.array([4.0, 0.0], dtype=np.float64)  # norm 4.0
    tc.clip_grad_norm([g], max_norm=1.0)
    assert np.allclose(g, [1.0, 0.0])
    assert g[0] == pytest.approx(4.0 * 0.25)


def test_clip_property_post_norm_bounded():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        gs = [rng.standard_normal(rng.integers(1, 30)) * rng.uniform(0, 5) for _ in range(3)]
        tc.clip_grad_norm(gs, max_norm=1.0)
        post = np.sqrt(sum(float(np.dot(g, g)) for g in gs))
        assert post <= 1.0 + 1e-9


def test_clip_preserves_direction():
    rng = np.random.default_rng(5)
    g = rng.standard_normal(10) * 10.0
    unit = g / np.linalg.norm(g)
    tc.clip_grad_norm([g], max_norm=1.0)
    assert np.allclose(g / np.linalg.norm(g), unit, atol=1e-12)


# -- checkpoint format ------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {
        "enc.w": rng.standard_normal((3, 4)).astype(np.float32),
        "dec.b": rng.standard_normal((7,)).astype(np.float32),
        "meta.step": np.array([42.0], dtype=np.float32),
    }
    path = tmp_path / "model.atk"
    tc.save_tensors(path, arrays)
    back = tc.load_tensors(path)
    assert set(back) == set(arrays)
    for k in arrays:
        assert np.array_equal(back[k], arrays[k])


def test_checkpoint_magic(tmp_path):
    path = tmp_path / "model.atk"
    tc.save_tensors(path, {"w": np.zeros(3, dtype=np.float32)})
    assert path.read_bytes()[:4] == b"ATK1"


def test_checkpoint_corrupt_byte_raises(tmp_path):
    path = tmp_path / "model.atk"
    tc.save_tensors(path, {"w": np.arange(5, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    blob[10] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(tc.ChecksumMismatch):
        tc.load_tensors(path)


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.atk"
    path.write_bytes(b"PK\x03\x04 definitely not a checkpoint")
    with pytest.raises(tc.ChecksumMismatch):
        tc.load_tensors(path)
