import numpy as np
import pytest
import torch

from tif.model import (
    DegenerateEmbeddingError,
    ModelConfig,
    TIFModel,
    init_model,
    load_checkpoint,
    save_checkpoint,
)


def small(seed=0, dim=12, **kw):
    return init_model(dim, ModelConfig(layer_widths=(16, 8), head_hidden=8, n_proxies=2, **kw), seed)


def test_embeddings_are_unit_norm(rng):
    model = small()
    x = torch.tensor(rng.integers(0, 2, (50, 12)), dtype=torch.float32)
    norms = model.embed(x).norm(dim=1)
    assert torch.allclose(norms, torch.ones(50), atol=1e-6)


def test_identical_inputs_identical_embeddings(rng):
    model = small()
    x = torch.tensor(rng.integers(0, 2, (1, 12)), dtype=torch.float32).repeat(2, 1)
    e = model.embed(x)
    assert torch.equal(e[0], e[1])


def test_fresh_embeddings_not_collapsed(rng):
    model = init_model(300, seed=3)
    x = torch.tensor(rng.integers(0, 2, (64, 300)), dtype=torch.float32)
    assert np.linalg.matrix_rank(model.embed(x).detach().numpy()) > 1


def test_default_proxy_shape_and_norm():
    model = init_model(50)
    assert model.proxies.shape == (2, 4, 200)
    assert torch.allclose(model.proxies.norm(dim=-1), torch.ones(2, 4), atol=1e-6)


def test_zero_head_gives_half():
    model = small()
    with torch.no_grad():
        for p in model.head.parameters():
            p.zero_()
    X = np.random.default_rng(0).integers(0, 2, (5, 12))
    assert np.all(model.predict_logits(X) == 0)
    assert np.all(model.predict_proba(X) == 0.5)


def test_final_bias_shift_is_additive(rng):
    model = small().double()
    X = rng.integers(0, 2, (20, 12))
    before = model.predict_logits(X)
    with torch.no_grad():
        model.head[-1].bias += 1.75
    assert np.allclose(model.predict_logits(X) - before, 1.75, atol=1e-12)


def test_seeds():
    a, b, c = small(seed=1), small(seed=1), small(seed=2)
    for (k, va), vb, vc in zip(a.state_dict().items(), b.state_dict().values(), c.state_dict().values()):
        assert torch.equal(va, vb), k
        assert not torch.equal(va, vc), k


def test_zero_embedding_detected():
    model = small()
    with torch.no_grad():
        for p in model.encoder.parameters():
            p.zero_()
    x = torch.ones(1, 12)
    assert torch.all(model.embed(x) == 0)
    with pytest.raises(DegenerateEmbeddingError):
        model.embed(x, strict=True)


def test_config_checks():
    with pytest.raises(ValueError):
        TIFModel(4, ModelConfig(n_proxies=0))
    with pytest.warns(UserWarning, match="proxies"):
        TIFModel(4, ModelConfig(layer_widths=(4,), head_hidden=4, n_proxies=4))


def test_separable_toy_reaches_full_accuracy():
    torch.manual_seed(0)
    # exhaustive 2-bit truth table for "x0 or x1", which is linearly separable
    X = torch.tensor([[0, 0], [0, 1], [1, 0], [1, 1]] * 8, dtype=torch.float32)
    y = (X.sum(1) > 0).float()
    model = init_model(2, ModelConfig(layer_widths=(8, 4), head_hidden=4, n_proxies=1), seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=0.05)
    for _ in range(300):
        opt.zero_grad()
        loss = torch.nn.functional.binary_cross_entropy_with_logits(model.logit(X), y)
        loss.backward()
        opt.step()
    assert (model.predict(X.numpy()) == y.numpy()).all()


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_round_trip(tmp_path, dtype):
    model = small(seed=5).to(dtype)
    with torch.no_grad():
        model.proxies.mul_(1.0)
        model.head[0].weight.add_(0.123)
    path = tmp_path / "model.npz"
    save_checkpoint(model, path, extra={"note": "x"})
    back, manifest = load_checkpoint(path)
    assert manifest["extra"] == {"note": "x"}
    for (k, a), b in zip(model.state_dict().items(), back.state_dict().values()):
        assert a.dtype == b.dtype and torch.equal(a, b), k
    X = np.random.default_rng(0).integers(0, 2, (7, 12))
    assert np.array_equal(model.predict_logits(X), back.predict_logits(X))
