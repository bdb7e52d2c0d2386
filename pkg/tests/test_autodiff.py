import math
import zlib

import numpy as np
import pytest
import torch

from micl import autodiff as ad


def _rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64, requires_grad=True)


SHAPES = [(2, 3), (4, 5), (1, 7), (3, 3), (6, 2)]


@pytest.mark.parametrize("shape", SHAPES)
def test_primitive_gradients(shape):
    a = _rand(*shape, seed=1)
    b = _rand(shape[1], 4, seed=2)
    c = _rand(*shape, seed=3)
    pos = _rand(*shape, seed=4)
    idx = torch.tensor([0, shape[0] - 1, 0])
    targets = torch.randint(0, shape[1], (shape[0],), generator=torch.Generator().manual_seed(5))
    mask = ad.causal_mask(shape[1])[: shape[0]] if shape[0] <= shape[1] else None
    fns = {
        "matmul": lambda: (ad.matmul(a, b) ** 2).sum(),
        "add": lambda: (ad.add(a, c) ** 3).sum(),
        "scale": lambda: (ad.scale(a, 1.7) ** 2).sum(),
        "concat": lambda: (ad.concat([a, c]) ** 2 * torch.arange(2 * shape[1], dtype=torch.float64)).sum(),
        "row_gather": lambda: (ad.row_gather(a, idx) ** 2).sum(),
        "softmax": lambda: (ad.masked_softmax(a, mask) * c).sum(),
        "layer_norm": lambda: (ad.layer_norm(a) * c).sum(),
        "gelu": lambda: (ad.gelu(a) * c).sum(),
        "mean": lambda: (ad.mean(a, 0) ** 2).sum() + ad.mean(a * c),
        "log": lambda: (ad.log(pos.exp()) * c + ad.log(pos ** 2 + 1)).sum(),
        "cross_entropy": lambda: ad.cross_entropy(a, targets),
    }
    for name, fn in fns.items():
        params = [a, c, pos] if name in ("add", "softmax", "layer_norm", "gelu", "mean", "log", "concat") else [a]
        if name == "matmul":
            params = [a, b]
        err = ad.finite_difference_check(fn, params, n_coords=10, seed=zlib.crc32(name.encode()))
        assert err < 1e-4, name


def test_composition_gradient():
    x = _rand(3, 6, seed=6)
    w = _rand(6, 6, seed=7)
    err = ad.finite_difference_check(lambda: (ad.layer_norm(ad.matmul(ad.gelu(x), w)) ** 3).sum(), [x, w])
    assert err < 1e-4


def test_primitive_values():
    x = torch.full((4,), 3.0, dtype=torch.float64)
    assert torch.equal(ad.layer_norm(x), torch.zeros(4, dtype=torch.float64))
    assert ad.gelu(torch.tensor(0.0)).item() == 0.0
    assert math.isclose(ad.gelu(torch.tensor(30.0, dtype=torch.float64)).item(), 30.0)
    assert math.isclose(ad.gelu(torch.tensor(1.0, dtype=torch.float64)).item(), 0.5 * (1 + math.erf(1 / math.sqrt(2))))
    s = ad.masked_softmax(torch.randn(3, 5, dtype=torch.float64), torch.tensor([False, False, True, False, False]))
    assert torch.allclose(s[:, 2], torch.ones(3, dtype=torch.float64))
    with pytest.raises(ad.ContractError):
        ad.matmul(torch.ones(2, 3), torch.ones(4, 2))


def test_backward_contracts():
    x = _rand(5)
    loss = 0.5 * (x ** 2).sum()
    g = ad.backward(loss, [x])
    assert torch.allclose(g[0], x)
    with pytest.raises(ad.ContractError):
        ad.backward(loss, [x])
    with pytest.raises(ad.ContractError):
        ad.backward((x ** 2).sum().detach(), [x])
    with pytest.raises(ad.ContractError):
        ad.backward(x ** 2, [x])


def test_detach_scale():
    x = _rand(6)
    for w in (1.0, 0.0, 0.1, 0.37):
        y = ad.detach_scale(x * 3.1, w)
        assert torch.equal(y, x * 3.1)
    (g_ref,) = torch.autograd.grad((torch.sin(x) * 2).sum(), [x])
    (g01,) = torch.autograd.grad((ad.detach_scale(torch.sin(x), 0.1) * 2).sum(), [x])
    (g0,) = torch.autograd.grad((ad.detach_scale(torch.sin(x), 0.0) * 2).sum(), [x])
    assert torch.allclose(g01, 0.1 * g_ref, rtol=1e-15, atol=0)
    assert torch.equal(g0, torch.zeros_like(x))
    with pytest.raises(ad.ContractError):
        ad.detach_scale(x, 1.5)


def test_adamw_steps():
    p = torch.tensor([1.0], dtype=torch.float64)
    state = {}
    ad.adamw_step([p], [torch.zeros(1, dtype=torch.float64)], state, lr=0.1, weight_decay=0.0)
    assert p.item() == 1.0
    p = torch.tensor([2.0], dtype=torch.float64)
    ad.adamw_step([p], [torch.ones(1, dtype=torch.float64)], {}, lr=0.01, weight_decay=0.0, eps=0.0)
    assert math.isclose(p.item(), 2.0 - 0.01, rel_tol=1e-14)
    p = torch.tensor([2.0], dtype=torch.float64)
    st = {}
    for _ in range(5):
        ad.adamw_step([p], [torch.zeros(1, dtype=torch.float64)], st, lr=0.1, weight_decay=0.5)
    assert math.isclose(p.item(), 2.0 * 0.95 ** 5, rel_tol=1e-14)


def test_adamw_matches_torch():
    p1 = _rand(4, 3, seed=8).detach().clone()
    p2 = p1.clone().requires_grad_(True)
    opt = torch.optim.AdamW([p2], lr=1e-2, betas=(0.9, 0.95), weight_decay=1e-3, eps=1e-8)
    st = {}
    for k in range(20):
        g = torch.sin(p1 * (k + 1))
        ad.adamw_step([p1], [g], st, lr=1e-2, betas=(0.9, 0.95), weight_decay=1e-3)
        p2.grad = torch.sin(p2.detach() * (k + 1))
        opt.step()
    assert torch.allclose(p1, p2.detach(), rtol=1e-12, atol=1e-14)


def test_sgd():
    p = torch.tensor([1.0, 2.0], dtype=torch.float64)
    ad.sgd_step([p], [torch.tensor([0.5, -1.0], dtype=torch.float64)], lr=1.0)
    assert p.tolist() == [0.5, 3.0]
    p = torch.tensor([1.0], dtype=torch.float64)
    ad.sgd_step([p], [torch.zeros(1, dtype=torch.float64)], lr=1.0)
    assert p.item() == 1.0
    p = torch.tensor([0.0], dtype=torch.float64)
    st = {}
    for _ in range(100):
        ad.sgd_step([p], [torch.ones(1, dtype=torch.float64)], lr=1.0, momentum=0.5, state=st)
    assert math.isclose(st["v"][0].item(), 1 / (1 - 0.5), rel_tol=1e-12)
    with pytest.raises(ad.ContractError):
        ad.sgd_step([p], [p], lr=0.0)


def test_checkpoint_roundtrip(tmp_path):
    t = {"a": _rand(3, 4).detach(), "b": torch.arange(5, dtype=torch.float32), "s": torch.tensor(2.5, dtype=torch.float64)}
    ad.save_checkpoint(tmp_path / "c.micl", t, {"iter": 7})
    back, meta = ad.load_checkpoint(tmp_path / "c.micl")
    assert meta == {"iter": 7}
    for k in t:
        assert torch.equal(back[k], t[k]) and back[k].dtype == t[k].dtype
    assert (tmp_path / "c.micl").read_bytes()[:5] == b"MICL1"
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(ad.ContractError):
        ad.load_checkpoint(tmp_path / "bad")


def test_log_schedule():
    s = ad.log_checkpoint_schedule(1000)
    assert s[0] == 1 and s[-1] == 1000 and len(s) == len(set(s))
    assert sum(1 for v in s if 10 <= v < 100) <= 20


def test_forward_determinism():
    x = _rand(8, 16, seed=9).detach()
    w = _rand(16, 16, seed=10).detach()
    f = lambda: ad.layer_norm(ad.gelu(x @ w))
    assert torch.equal(f(), f())
