import numpy as np
import pytest

from swarmwall import kernel as K


def fd_check(fn, arrays, h=1e-6, rtol=1e-6):
    """Central differences for scalar ``fn(*tensors)`` against backward, in float64."""
    ts = [K.Tensor(a.astype(np.float64), requires_grad=True) for a in arrays]
    out = fn(*ts)
    K.backward(out)
    for t in ts:
        num = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = t.data[i]
            t.data[i] = old + h
            with K.no_grad():
                up = float(fn(*ts).data)
            t.data[i] = old - h
            with K.no_grad():
                dn = float(fn(*ts).data)
            t.data[i] = old
            num[i] = (up - dn) / (2 * h)
        np.testing.assert_allclose(t.grad, num, rtol=rtol, atol=1e-8)


rng = np.random.default_rng(0)


def test_elementwise_and_matmul_grads():
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    c = rng.normal(size=(2,))
    fd_check(lambda x, y, z: K.sum_(K.mul(K.add(K.matmul(x, y), z), K.matmul(x, y))), [a, b, c])
    fd_check(lambda x, y: K.mean(K.sub(x, y)), [a, a + 1])
    fd_check(lambda x: K.sum_(K.scale(K.relu(x), 3.0)), [a + 0.05])


def test_reshape_transpose_take_grads():
    a = rng.normal(size=(2, 3, 4))
    idx = np.array([1, 0, 3, 2, 2, 0])
    fd_check(lambda x: K.sum_(K.mul(K.transpose(K.reshape(x, (6, 4)), (1, 0)), K.transpose(K.reshape(x, (6, 4)), (1, 0)))), [a])
    fd_check(lambda x: K.sum_(K.mul(K.take_along_last(K.reshape(x, (6, 4)), idx), np.arange(6.0))), [a])


def test_linear_grads_and_shape_errors():
    x, w, b = rng.normal(size=(5, 3)), rng.normal(size=(3, 4)), rng.normal(size=(4,))
    fd_check(lambda x, w, b: K.sum_(K.relu(K.linear_forward(x, w, b))), [x, w, b])
    with pytest.raises(K.DimensionError):
        K.linear_forward(np.ones((5, 2)), np.ones((3, 4)), np.ones(4))
    with pytest.raises(K.DimensionError):
        K.linear_forward(np.ones((5, 3)), np.ones((3, 4)), np.ones(3))


def test_batchnorm_train_grads_with_row_mask():
    x = rng.normal(size=(8, 5))
    g, bt = rng.normal(size=5), rng.normal(size=5)
    rows = np.array([1, 1, 0, 1, 1, 0, 1, 1], bool)
    weights = rng.normal(size=(8, 5))

    def f(x, g, bt):
        stats = K.RunningStats.fresh(5, np.float64)
        return K.sum_(K.mul(K.batchnorm_forward(x, g, bt, stats, True, rows=rows), weights))

    fd_check(f, [x, g, bt])


def test_batchnorm_statistics_and_eval():
    x = rng.normal(2.0, 3.0, size=(64, 4))
    stats = K.RunningStats.fresh(4, np.float64)
    out = K.batchnorm_forward(x, np.ones(4), np.zeros(4), stats, True).data
    assert np.allclose(out.mean(0), 0, atol=1e-12)
    assert np.allclose(out.var(0), 1, atol=1e-3)
    assert np.allclose(stats.mean, 0.1 * x.mean(0))
    assert np.allclose(stats.var, 0.9 + 0.1 * x.var(0, ddof=1))
    ev = K.batchnorm_forward(x, np.ones(4), np.zeros(4), stats, False).data
    assert np.allclose(ev, (x - stats.mean) / np.sqrt(stats.var + K.BN_EPS))


def test_batchnorm_masked_rows_ignored():
    x = rng.normal(size=(6, 3))
    rows = np.array([1, 1, 1, 1, 0, 0], bool)
    s1, s2 = K.RunningStats.fresh(3, np.float64), K.RunningStats.fresh(3, np.float64)
    a = K.batchnorm_forward(x, np.ones(3), np.zeros(3), s1, True, rows=rows).data
    x2 = x.copy()
    x2[4:] = 1e6
    b = K.batchnorm_forward(x2, np.ones(3), np.zeros(3), s2, True, rows=rows).data
    assert np.allclose(a[:4], b[:4])
    assert np.allclose(s1.mean, s2.mean)


def test_batchnorm_needs_two_rows():
    with pytest.raises(K.InvalidBatchError):
        K.batchnorm_forward(np.ones((1, 3)), np.ones(3), np.zeros(3), K.RunningStats.fresh(3), True)


def test_dropout_modes():
    x = K.Tensor(np.ones((2000, 50)))
    assert K.dropout_forward(x, 0.2, training=False) is x
    out = K.dropout_forward(x, 0.2, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 1.25}
    assert out.mean() == pytest.approx(1.0, abs=0.01)
    assert (out == 0).mean() == pytest.approx(0.2, abs=0.01)
    with pytest.raises(ValueError):
        K.dropout_forward(x, 1.0, True, np.random.default_rng(0))


def test_masked_softmax_values_and_grads():
    x = rng.normal(size=(3, 5))
    mask = np.array([[1, 1, 0, 1, 0], [1, 0, 0, 0, 0], [1, 1, 1, 1, 1]], bool)
    y = K.masked_softmax(K.Tensor(x), mask).data
    assert np.allclose(y.sum(1), 1)
    assert np.all(y[~mask] == 0)
    assert y[1, 0] == 1.0
    w = rng.normal(size=(3, 5))
    fd_check(lambda t: K.sum_(K.mul(K.masked_softmax(t, mask), w)), [x])
    with pytest.raises(K.InvalidMaskError):
        K.masked_softmax(K.Tensor(x), np.zeros((3, 5), bool))


def _attn_weights(D=8, H=2):
    dh = D // H
    return [rng.normal(size=(H, D, dh)) * 0.5 for _ in range(3)] + [rng.normal(size=(D, D)) * 0.5]


def test_attention_reference_and_grads():
    B, T, D, H = 2, 4, 8, 2
    x = rng.normal(size=(B, T, D))
    mask = np.array([[1, 1, 1, 0], [1, 0, 1, 1]], bool)
    wq, wk, wv, wo = _attn_weights(D, H)
    res = K.multihead_attention(K.Tensor(x), mask, wq, wk, wv, wo, return_weights=True)
    # Loop-based reference.
    ref = np.zeros((B, T, D))
    for b in range(B):
        heads = []
        for h in range(H):
            q, k, v = x[b] @ wq[h], x[b] @ wk[h], x[b] @ wv[h]
            s = q @ k.T / np.sqrt(D // H)
            s[:, ~mask[b]] = -np.inf
            a = np.exp(s - s.max(1, keepdims=True))
            a /= a.sum(1, keepdims=True)
            heads.append(a @ v)
        ref[b] = np.concatenate(heads, axis=1) @ wo * mask[b][:, None]
    assert np.allclose(res.output.data, ref)
    assert np.allclose(res.weights.sum(-1), 1)
    assert np.all(res.weights[0, :, :, 3] == 0)
    w = rng.normal(size=(B, T, D))
    fd_check(lambda x, q, k, v, o: K.sum_(K.mul(K.multihead_attention(x, mask, q, k, v, o), w)),
             [x, wq, wk, wv, wo])


def test_attention_errors():
    wq, wk, wv, wo = _attn_weights()
    with pytest.raises(K.DimensionError):
        K.multihead_attention(K.Tensor(np.ones((1, 3, 6))), np.ones((1, 3), bool), wq, wk, wv, wo)
    with pytest.raises(K.InvalidMaskError):
        K.multihead_attention(K.Tensor(np.ones((1, 3, 8))), np.zeros((1, 3), bool), wq, wk, wv, wo)


def test_masked_mean_grads():
    x = rng.normal(size=(2, 4, 3))
    mask = np.array([[1, 0, 1, 1], [0, 0, 1, 0]], bool)
    out = K.masked_mean(K.Tensor(x), mask).data
    assert np.allclose(out[1], x[1, 2])
    assert np.allclose(out[0], x[0, [0, 2, 3]].mean(0))
    fd_check(lambda t: K.sum_(K.mul(K.masked_mean(t, mask), K.masked_mean(t, mask))), [x])


def test_huber_values_and_grads():
    pred = np.array([0.0, 0.5, 3.0, -2.0])
    target = np.zeros(4)
    loss = K.huber_loss(K.Tensor(pred), target, 1.0)
    assert float(loss.data) == pytest.approx((0 + 0.125 + 2.5 + 1.5) / 4)
    fd_check(lambda p: K.huber_loss(p, target, 1.0), [pred + 0.01])
    with pytest.raises(K.DimensionError):
        K.huber_loss(K.Tensor(pred), np.zeros(3))


def test_adam_hand_computed_trace():
    p = {"w": K.Tensor(np.array([1.0, -2.0]), requires_grad=True)}
    st = K.AdamState(learning_rate=0.1)
    grads = [np.array([0.5, -1.0]), np.array([0.2, 0.3])]
    m = np.zeros(2)
    v = np.zeros(2)
    w = np.array([1.0, -2.0])
    for t, g in enumerate(grads, 1):
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        K.adam_step(p, {"w": g}, st)
        np.testing.assert_allclose(p["w"].data, w, rtol=1e-12)
    assert st.t == 2


def test_adam_first_step_is_lr_times_sign():
    p = {"w": K.Tensor(np.array([1.0, -2.0, 0.5]), requires_grad=True)}
    K.adam_step(p, {"w": np.array([0.5, -1.0, 3.0])}, K.AdamState(learning_rate=0.1))
    np.testing.assert_allclose(p["w"].data, [0.9, -1.9, 0.4], atol=1e-7)


def test_adam_rejects_non_finite():
    p = {"w": K.Tensor(np.ones(2), requires_grad=True)}
    with pytest.raises(K.NumericError):
        K.adam_step(p, {"w": np.array([np.nan, 0.0])}, K.AdamState())


def test_backward_requires_graph_and_no_grad_blocks_it():
    with pytest.raises(K.GraphError):
        K.backward(K.Tensor(np.ones(2)))
    x = K.Tensor(np.ones(3), requires_grad=True)
    with K.no_grad():
        y = K.sum_(K.mul(x, x))
    with pytest.raises(K.GraphError):
        K.backward(y)


def test_gradient_accumulates_over_shared_use():
    x = K.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = K.sum_(K.add(K.mul(x, x), x))
    grads = K.gradients(y, {"x": x})
    assert np.allclose(grads["x"], 2 * x.data + 1)


def test_dtype_preserved():
    x = K.Tensor(np.ones((4, 3), np.float32), requires_grad=True)
    w = K.Tensor(np.ones((3, 2), np.float32), requires_grad=True)
    out = K.sum_(K.matmul(x, w))
    assert out.dtype == np.float32
    K.backward(out)
    assert w.grad.dtype == np.float32
