import numpy as np
import pytest

from gradcheck import LossModel, check_gradients
from swarmwall import kernel as K
from swarmwall.qnet import PARAM_SHAPES, QNetwork


def _setup(seed=0, B=12):
    rng = np.random.default_rng(seed)
    net = QNetwork.init(rng)
    tok = np.stack([rng.random((B, 7)), rng.uniform(-1, 1, (B, 7)), rng.integers(0, 2, (B, 7))], -1)
    mask = rng.random((B, 7)) < 0.6
    mask[:, 0] = True
    net.forward(tok, mask, training=True, rng=rng)
    net = net.astype(np.float64)
    return net, tok, mask, rng.integers(0, 4, B), rng.normal(size=B) * 2, rng


def _naive_loss(net, tok, mask, act, y):
    with K.no_grad():
        q = net.forward(tok, mask, training=False).data
    err = q[np.arange(len(act)), act] - y
    a = np.abs(err)
    return np.where(a <= 1, 0.5 * err ** 2, a - 0.5).mean()


@pytest.mark.parametrize("name", list(PARAM_SHAPES))
def test_incremental_perturbation_matches_full_forward(name):
    # Elements whose perturbation crosses a ReLU or Huber kink are excluded, since those
    # are deliberately evaluated with a frozen pattern.
    net, tok, mask, act, y = _setup()[:5]
    model = LossModel(net, tok, mask, act, y)
    p = net.params[name].data
    idx = np.random.default_rng(1).choice(p.size, min(p.size, 40), replace=False)
    for h in (1e-3, -0.3):
        (got, crossed), flipped = model.perturbed(name, idx, h)
        for k, flat in enumerate(idx):
            if crossed[k] or (flipped is not None and flipped[k]):
                continue
            old = p.flat[flat]
            p.flat[flat] = old + h
            want = _naive_loss(net, tok, mask, act, y)
            p.flat[flat] = old
            assert got[k] == pytest.approx(want, rel=1e-11, abs=1e-13)


def test_check_gradients_flags_a_wrong_gradient(monkeypatch):
    net, tok, mask, act, y, _ = _setup(B=6)
    ok = check_gradients(net, tok, mask, act, y)
    assert ok.worst() < 1e-4
    real = K.gradients

    def broken(loss, params):
        g = real(loss, params)
        g["attn.wk"] = g["attn.wk"] * 1.01
        return g

    monkeypatch.setattr(K, "gradients", broken)
    assert check_gradients(net, tok, mask, act, y).rel_err["attn.wk"].max() > 5e-3
