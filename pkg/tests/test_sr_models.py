import numpy as np
import pytest
import torch
import torch.nn as nn

from srdistill.data_prep import PatchDataset, assign_pseudo_labels
from srdistill.errors import ConfigError, ShapeError, TrainingError
from srdistill.imaging import degrade, upscale
from srdistill.sr_models import (
    DEFAULT_CONFIGS,
    TrainSchedule,
    build_model,
    flat_gradient,
    forward,
    load_checkpoint,
    predict,
    save_checkpoint,
    sr_loss,
    train,
)


def conv_params(cin, cout, k):
    return cin * cout * k * k + cout


def desk_srcnn(scale=2, seed=0):
    return build_model("srcnn", scale, {"widths": [8, 4], "kernels": [5, 3, 3]}, rng_seed=seed).double()


def test_build_same_seed_identical():
    a, b = build_model("edsr", 2, rng_seed=7), build_model("edsr", 2, rng_seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
    c = build_model("edsr", 2, rng_seed=8)
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_build_does_not_touch_global_rng():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_model("vdsr", 2, rng_seed=5)
    assert torch.equal(torch.rand(3), expected)


def test_srcnn_parameter_count():
    cfg = DEFAULT_CONFIGS["srcnn"]
    (k1, k2, k3), (n1, n2), c = cfg["kernels"], cfg["widths"], cfg["channels"]
    expected = conv_params(c, n1, k1) + conv_params(n1, n2, k2) + conv_params(n2, c, k3)
    assert build_model("srcnn", 2).num_parameters() == expected


def test_vdsr_parameter_count():
    cfg = DEFAULT_CONFIGS["vdsr"]
    d, w, c = cfg["depth"], cfg["width"], cfg["channels"]
    expected = conv_params(c, w, 3) + (d - 2) * conv_params(w, w, 3) + conv_params(w, c, 3)
    assert build_model("vdsr", 4).num_parameters() == expected


def test_edsr_trunk_shared_across_scales():
    cfg = DEFAULT_CONFIGS["edsr"]
    w, c, blocks = cfg["width"], cfg["channels"], cfg["blocks"]
    trunk = conv_params(c, w, 3) + blocks * 2 * conv_params(w, w, 3) + conv_params(w, w, 3) \
        + conv_params(w, c, 3)
    m2, m4 = build_model("edsr", 2), build_model("edsr", 4)

    def count(m, prefix):
        return sum(p.numel() for n, p in m.named_parameters() if n.startswith(prefix))

    assert m2.num_parameters() - count(m2, "upsampler") == trunk
    assert m4.num_parameters() - count(m4, "upsampler") == trunk
    assert count(m2, "upsampler") == conv_params(w, 4 * w, 3)
    assert count(m4, "upsampler") == 2 * conv_params(w, 4 * w, 3)


def test_unknown_arch_and_keys():
    with pytest.raises(ConfigError):
        build_model("srgan", 2)
    with pytest.raises(ConfigError, match="depht"):
        build_model("vdsr", 2, {"depht": 4})


@pytest.mark.parametrize("arch", ["srcnn", "vdsr", "edsr"])
@pytest.mark.parametrize("scale", [2, 4])
def test_output_shape(arch, scale):
    m = build_model(arch, scale)
    out = forward(m, torch.rand(2, 3, 6, 5))
    assert out.shape == (2, 3, 6 * scale, 5 * scale)


def test_wrong_channels():
    with pytest.raises(ShapeError):
        forward(build_model("srcnn", 2), torch.rand(1, 1, 8, 8))


def test_vdsr_zero_residual_is_bicubic():
    m = build_model("vdsr", 2).double()
    with torch.no_grad():
        m.layers[-1].weight.zero_()
        m.layers[-1].bias.zero_()
    hr = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    lr = degrade(hr, 2)
    assert torch.allclose(m(lr), upscale(lr, 2))


@pytest.mark.parametrize("arch", ["srcnn", "edsr"])
def test_output_directional_derivative(arch):
    torch.manual_seed(0)
    m = build_model(arch, 2, {"widths": [6, 4]} if arch == "srcnn" else {"blocks": 1, "width": 8}).double()
    x = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    p = next(m.parameters())
    v = torch.randn_like(p)
    probe = torch.randn(1, 3, 12, 12, dtype=torch.float64)
    (auto,) = torch.autograd.grad((m(x) * probe).sum(), p)
    analytic = (auto * v).sum().item()
    eps = 1e-6
    with torch.no_grad():
        p += eps * v
        up = (m(x) * probe).sum().item()
        p -= 2 * eps * v
        down = (m(x) * probe).sum().item()
        p += eps * v
    fd = (up - down) / (2 * eps)
    assert abs(fd - analytic) <= 1e-3 * abs(analytic)


def test_sr_loss_values(rng):
    a = torch.as_tensor(rng.random((2, 3, 4, 5)))
    assert sr_loss(a, a).item() == 0.0
    b = torch.as_tensor(rng.random((2, 3, 4, 5)))
    total = 0.0
    an, bn = a.numpy(), b.numpy()
    for i in range(2):
        for c in range(3):
            for y in range(4):
                for x in range(5):
                    total += (an[i, c, y, x] - bn[i, c, y, x]) ** 2
    assert abs(sr_loss(a, b).item() - total / an.size) < 1e-6
    with pytest.raises(ShapeError):
        sr_loss(a, b[:, :, :3])


def test_flat_gradient_zero_on_perfect_fit():
    m = desk_srcnn()
    lr = torch.rand(2, 3, 5, 5, dtype=torch.float64)
    with torch.no_grad():
        hr = m(lr)
    g = flat_gradient(m, (lr, hr))
    assert torch.count_nonzero(g.flat()) == 0
    assert g.num_layers == 6 and len(g) == m.num_parameters()


def test_flat_gradient_finite_differences():
    m = desk_srcnn(seed=3)
    gen = torch.Generator().manual_seed(0)
    lr = torch.rand(2, 3, 6, 6, dtype=torch.float64, generator=gen)
    hr = torch.rand(2, 3, 12, 12, dtype=torch.float64, generator=gen)
    g = flat_gradient(m, (lr, hr)).flat()
    params = list(m.parameters())
    sizes = np.cumsum([0] + [p.numel() for p in params])
    rng = np.random.default_rng(0)
    picks = rng.choice(sizes[-1], 12, replace=False)
    eps = 1e-6
    for idx in picks:
        k = int(np.searchsorted(sizes, idx, side="right") - 1)
        flat = params[k].data.view(-1)
        j = idx - sizes[k]
        old = flat[j].item()
        with torch.no_grad():
            flat[j] = old + eps
            up = sr_loss(m(lr), hr).item()
            flat[j] = old - eps
            down = sr_loss(m(lr), hr).item()
            flat[j] = old
        fd = (up - down) / (2 * eps)
        assert abs(fd - g[idx].item()) <= 1e-3 * max(abs(fd), 1e-8), (idx, fd, g[idx].item())


def test_flat_gradient_linear_probe_scaling():
    """For a 1x1 linear conv, doubling every residual doubles the gradient exactly."""
    torch.manual_seed(1)
    probe = nn.Conv2d(3, 3, 1).double()
    x = torch.rand(4, 3, 5, 5, dtype=torch.float64)
    y = torch.rand(4, 3, 5, 5, dtype=torch.float64)
    with torch.no_grad():
        out = probe(x)
    g1 = flat_gradient(probe, (x, y))
    g2 = flat_gradient(probe, (x, out - 2 * (out - y)))
    torch.testing.assert_close(g2.flat(), 2 * g1.flat(), rtol=1e-12, atol=1e-14)
    # closed form: dL/dW = 2/N * sum(residual * x)
    r = (out - y)
    n = r.numel()
    dw = 2.0 / n * torch.einsum("bohw,bihw->oi", r, x)
    torch.testing.assert_close(g1.grads[0].view(3, 3), dw)
    torch.testing.assert_close(g1.grads[1], 2.0 / n * r.sum((0, 2, 3)))


def test_train_zero_steps_unchanged(toy_corpus):
    m = build_model("srcnn", 2)
    before = [p.clone() for p in m.parameters()]
    ds = PatchDataset(assign_pseudo_labels(toy_corpus, 32, 16), 16, 2)
    _, hist = train(m, ds, TrainSchedule(steps=0))
    assert hist == []
    assert all(torch.equal(a, b) for a, b in zip(before, m.parameters()))


def test_train_loss_trend(toy_corpus):
    m = build_model("srcnn", 2, rng_seed=0)
    ds = PatchDataset(assign_pseudo_labels(toy_corpus, 32, 16), 16, 2)
    _, hist = train(m, ds, TrainSchedule(steps=500, batch_size=8, learning_rate=1e-4))
    assert len(hist) == 500
    h = np.asarray(hist)
    assert h[-50:].mean() < h[:50].mean()


def test_train_deterministic(toy_corpus):
    ds = PatchDataset(assign_pseudo_labels(toy_corpus, 32, 16), 16, 2)
    runs = []
    for _ in range(2):
        m = build_model("edsr", 2, {"blocks": 1, "width": 8}, rng_seed=4)
        runs.append(train(m, ds, TrainSchedule(steps=15, batch_size=4, rng_seed=2))[1])
    assert runs[0] == runs[1]


def test_train_nonfinite_names_step(toy_corpus):
    m = build_model("srcnn", 2)
    with torch.no_grad():
        m.conv3.bias.fill_(float("nan"))
    ds = PatchDataset(assign_pseudo_labels(toy_corpus, 32, 16), 16, 2)
    with pytest.raises(TrainingError, match="step 0"):
        train(m, ds, TrainSchedule(steps=3))


def test_train_scale_mismatch(toy_corpus):
    ds = PatchDataset(assign_pseudo_labels(toy_corpus, 32, 16), 16, 2)
    with pytest.raises(ConfigError):
        train(build_model("srcnn", 4), ds, TrainSchedule(steps=1))


def test_checkpoint_round_trip(tmp_path):
    m = build_model("edsr", 4, {"blocks": 2}, rng_seed=9)
    save_checkpoint(m, tmp_path / "m.pt")
    back = load_checkpoint(tmp_path / "m.pt")
    assert back.scale == 4 and back.arch_config == m.arch_config
    lr = np.random.default_rng(0).random((6, 6, 3))
    np.testing.assert_array_equal(predict(m.eval(), lr), predict(back, lr))
