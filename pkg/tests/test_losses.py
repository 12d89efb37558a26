import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

import oracles
from semiseg.losses import (compose_total, cross_loss_labeled, cross_loss_unlabeled, kl_channel,
                            masked_pseudo_loss, mutual_loss, mutual_terms, ssim, st_loss, supervised_loss)



@pytest.fixture(autouse=True)
def _f64():
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(torch.float32)


def rand(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


def central_diff(fn, x, h=1e-6):
    grad = torch.zeros_like(x)
    flat = x.view(-1)
    g = grad.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = fn(x).item()
        flat[i] = old - h
        down = fn(x).item()
        flat[i] = old
        g[i] = (up - down) / (2 * h)
    return grad


def assert_grad_matches(fn, x):
    x = x.clone().requires_grad_(True)
    (analytic,) = torch.autograd.grad(fn(x), x)
    numeric = central_diff(fn, x.detach().clone())
    rel = (analytic - numeric).norm() / max(numeric.norm().item(), 1e-12)
    assert rel < 1e-3, f"relative gradient error {rel:.2e}"


# supervised / pseudo losses


def test_supervised_saturated_and_neutral():
    y = (rand(2, 1, 8, 8) > 0).double()
    assert supervised_loss((y * 2 - 1) * 50, y) < 1e-3
    assert supervised_loss(torch.zeros(2, 1, 8, 8), y).item() == pytest.approx(math.log(2))


def test_supervised_matches_scalar_oracle():
    logits, y = rand(1, 1, 5, 6, seed=1), (rand(1, 1, 5, 6, seed=2) > 0).double()
    expected = np.mean([oracles.bce(l, t) for l, t in zip(logits.flatten().tolist(), y.flatten().tolist())])
    assert supervised_loss(logits, y).item() == pytest.approx(expected, abs=1e-6)


def test_supervised_shape_mismatch():
    with pytest.raises(ValueError):
        supervised_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 5))


def test_masked_loss_full_confidence_equals_supervised():
    logits, y = rand(2, 1, 8, 8, seed=3), (rand(2, 1, 8, 8, seed=4) > 0).double()
    full = masked_pseudo_loss(logits, y, torch.ones_like(y))
    assert full.item() == pytest.approx(supervised_loss(logits, y).item(), abs=1e-12)


def test_masked_loss_no_confidence_is_zero_without_gradient():
    logits = rand(1, 1, 8, 8, seed=5).requires_grad_(True)
    loss = masked_pseudo_loss(logits, torch.ones(1, 1, 8, 8), torch.zeros(1, 1, 8, 8))
    assert loss.item() == 0.0
    loss.backward()
    assert torch.count_nonzero(logits.grad) == 0


def test_masked_loss_half_confident_matches_oracle():
    logits, y = rand(1, 1, 6, 6, seed=6), (rand(1, 1, 6, 6, seed=7) > 0).double()
    conf = torch.zeros(1, 1, 6, 6)
    conf[..., :3, :] = 1
    terms = [oracles.bce(l, t) for l, t, c in
             zip(logits.flatten().tolist(), y.flatten().tolist(), conf.flatten().tolist()) if c]
    assert masked_pseudo_loss(logits, y, conf).item() == pytest.approx(sum(terms) / len(terms), abs=1e-6)


def test_masked_loss_ignores_labels_outside_confidence():
    rng = np.random.default_rng(0)
    for case in range(100):
        logits = torch.from_numpy(rng.normal(size=(2, 1, 8, 8)) * 3)
        conf = torch.from_numpy((rng.random((2, 1, 8, 8)) < 0.5).astype(np.float64))
        y = torch.from_numpy((rng.random((2, 1, 8, 8)) < 0.5).astype(np.float64))
        y2 = torch.where(conf > 0, y, torch.from_numpy(rng.random((2, 1, 8, 8))))
        assert masked_pseudo_loss(logits, y, conf).item() == masked_pseudo_loss(logits, y2, conf).item()


# cross supervision


def test_cross_labeled_agreement_and_disagreement():
    sat = torch.full((1, 1, 8, 8), 40.0)
    assert cross_loss_labeled(sat, sat.clone()) < 1e-6
    fg, bg = torch.full((1, 1, 8, 8), 10.0), torch.full((1, 1, 8, 8), -10.0)
    a = supervised_loss(fg, (bg >= 0).double())
    b = supervised_loss(bg, (fg >= 0).double())
    assert a > 5 and b > 5
    assert cross_loss_labeled(fg, bg).item() == pytest.approx((a + b).item())


def test_cross_labeled_matches_two_call_oracle():
    l1, l2 = rand(2, 1, 8, 8, seed=8), rand(2, 1, 8, 8, seed=9)
    expected = supervised_loss(l1, (l2 > 0).double()) + supervised_loss(l2, (l1 > 0).double())
    assert cross_loss_labeled(l1, l2).item() == pytest.approx(expected.item(), abs=1e-12)


def test_cross_labeled_targets_carry_no_gradient():
    l1 = rand(1, 1, 4, 4, seed=10).requires_grad_(True)
    l2 = rand(1, 1, 4, 4, seed=11).requires_grad_(True)
    (g2,) = torch.autograd.grad(supervised_loss(l1, (l2 >= 0).double()), l2, allow_unused=True)
    assert g2 is None
    loss = cross_loss_labeled(l1, l2)
    g1, g2 = torch.autograd.grad(loss, (l1, l2))
    # each logit map only receives gradient from its own BCE term
    assert torch.allclose(g1, torch.autograd.grad(supervised_loss(l1, (l2 >= 0).double()), l1)[0])


def test_cross_unlabeled_empty_and_agreeing():
    z = torch.zeros(1, 1, 8, 8)
    o = torch.ones(1, 1, 8, 8)
    sat = torch.full((1, 1, 8, 8), 40.0)
    cross, joint = cross_loss_unlabeled(sat, sat, sat, sat, (o, z), (o, z), (o, z))
    assert cross.item() == 0.0 and joint.item() == 0.0
    cross, joint = cross_loss_unlabeled(sat, sat, sat, sat, (o, o), (o, o), (o, o))
    assert cross.item() < 1e-6 and joint.item() < 1e-6


def test_cross_unlabeled_insensitive_inside_masked_region():
    l = [rand(1, 1, 8, 8, seed=s) for s in range(4)]
    conf = torch.ones(1, 1, 8, 8)
    conf[..., 2:5, 2:5] = 0
    lab = (rand(1, 1, 8, 8, seed=20) > 0).double()
    pert = lab.clone()
    pert[..., 2:5, 2:5] = 1 - pert[..., 2:5, 2:5]
    a = cross_loss_unlabeled(*l, (lab, conf), (lab, conf), (lab, conf))
    b = cross_loss_unlabeled(*l, (pert, conf), (pert, conf), (pert, conf))
    assert a[0].item() == b[0].item() and a[1].item() == b[1].item()


# mutual learning


def _taps(seed):
    return rand(2, 4, 8, 8, seed=seed), rand(2, 16, 2, 2, seed=seed + 1), rand(2, 1, 8, 8, seed=seed + 2)


def test_mutual_identical_taps_is_zero():
    t = _taps(0)
    assert abs(mutual_loss(t, t).item()) < 1e-12


def test_mutual_logit_offset_closed_form():
    e, b, l = _taps(3)
    delta = 0.37
    loss = mutual_loss((e, b, l), (e, b, l + delta))
    assert loss.item() == pytest.approx(2 * delta**2, abs=1e-12)


def test_mutual_symmetric():
    t1, t2 = _taps(0), _taps(10)
    assert mutual_loss(t1, t2).item() == pytest.approx(mutual_loss(t2, t1).item(), abs=1e-12)


def test_mutual_term_weights_one_half_two():
    t1, t2 = _taps(0), _taps(10)
    terms = mutual_terms(t1, t2)
    full = mutual_loss(t1, t2).item()
    assert full == pytest.approx(terms["ssim"].item() + 0.5 * terms["kl"].item() + 2 * terms["mse"].item(), abs=1e-12)
    # changing only the logits moves the loss by exactly 2 x the MSE change
    t2b = (t2[0], t2[1], t2[2] * 1.5)
    d_mse = mutual_terms(t1, t2b)["mse"].item() - terms["mse"].item()
    assert mutual_loss(t1, t2b).item() - full == pytest.approx(2 * d_mse, abs=1e-12)
    # changing only the bottleneck moves it by 0.5 x the symmetric KL change
    t2c = (t2[0], t2[1] * 1.5, t2[2])
    d_kl = mutual_terms(t1, t2c)["kl"].item() - terms["kl"].item()
    assert mutual_loss(t1, t2c).item() - full == pytest.approx(0.5 * d_kl, abs=1e-12)
    # changing only the encoder features moves it by 1 x the SSIM-loss change
    t2d = (t2[0] * 1.5, t2[1], t2[2])
    d_ssim = mutual_terms(t1, t2d)["ssim"].item() - terms["ssim"].item()
    assert mutual_loss(t1, t2d).item() - full == pytest.approx(d_ssim, abs=1e-12)


def _ssim_reference(a, b):
    # direct per-pixel SSIM with an explicit zero-padded 11x11 Gaussian window
    a, b = a.numpy(), b.numpy()
    coords = np.arange(11) - 5.0
    g = np.exp(-coords**2 / (2 * 1.5**2))
    g /= g.sum()
    win = np.outer(g, g)
    bsz, ch, hh, ww = a.shape
    vals = []
    for n in range(bsz):
        for c in range(ch):
            pa, pb = np.pad(a[n, c], 5), np.pad(b[n, c], 5)
            for i in range(hh):
                for j in range(ww):
                    wa, wb = pa[i:i + 11, j:j + 11], pb[i:i + 11, j:j + 11]
                    ma, mb = (win * wa).sum(), (win * wb).sum()
                    va = (win * wa * wa).sum() - ma**2
                    vb = (win * wb * wb).sum() - mb**2
                    cov = (win * wa * wb).sum() - ma * mb
                    c1, c2 = 0.01**2, 0.03**2
                    vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def _kl_reference(p_logits, q_logits):
    p = p_logits.numpy()
    q = q_logits.numpy()
    total, count = 0.0, 0
    for n in range(p.shape[0]):
        for i in range(p.shape[2]):
            for j in range(p.shape[3]):
                a = np.exp(p[n, :, i, j] - p[n, :, i, j].max())
                a /= a.sum()
                b = np.exp(q[n, :, i, j] - q[n, :, i, j].max())
                b /= b.sum()
                total += float(np.sum(a * np.log(a / b)))
                count += 1
    return total / count


def test_mutual_terms_match_reference_formulas():
    t1, t2 = _taps(0), _taps(10)
    assert ssim(t1[0], t2[0]).item() == pytest.approx(_ssim_reference(t1[0], t2[0]), abs=1e-5)
    assert kl_channel(t1[1], t2[1]).item() == pytest.approx(_kl_reference(t1[1], t2[1]), abs=1e-5)
    mse = float(np.mean((t1[2].numpy() - t2[2].numpy()) ** 2))
    assert mutual_terms(t1, t2)["mse"].item() == pytest.approx(mse, abs=1e-5)


def test_mutual_shape_mismatch():
    t1 = _taps(0)
    t2 = (t1[0][:, :2], t1[1], t1[2])
    with pytest.raises(ValueError):
        mutual_loss(t1, t2)


# temporal window loss


def test_st_loss_saturated_identical_window():
    y = (rand(2, 1, 8, 8, seed=1) > 0).double()
    window = y.repeat(1, 5, 1, 1)
    assert st_loss((y * 2 - 1) * 50, window).item() < 1e-6


def test_st_loss_flipped_neighbours():
    y = torch.ones(1, 1, 8, 8)
    window = torch.cat([1 - y, 1 - y, y, 1 - y, 1 - y], dim=1)
    loss = st_loss(torch.full((1, 1, 8, 8), 60.0), window)
    assert loss.item() == pytest.approx(0.25 * 2 + 0.1 * 2, abs=1e-9)


def test_st_loss_matches_term_oracle():
    logits = rand(2, 1, 6, 6, seed=3)
    window = (rand(2, 5, 6, 6, seed=4) > 0).double()
    p = torch.sigmoid(logits)[:, 0]
    expected = F.binary_cross_entropy_with_logits(logits[:, 0], window[:, 2]).item()
    for k, w in ((1, 0.25), (3, 0.25), (0, 0.1), (4, 0.1)):
        expected += w * float(((p - window[:, k]) ** 2).mean())
    assert st_loss(logits, window).item() == pytest.approx(expected, abs=1e-6)


def test_st_loss_rejects_short_window():
    with pytest.raises(ValueError):
        st_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 3, 4, 4))


# composition


def test_compose_total_weights():
    _, bd = compose_total(1.0, 2.0, 4.0)
    assert bd.total_labeled == 4.0
    _, bd = compose_total(0.0, cross_unlabeled=4.0, joint=2.0)
    assert bd.total_unlabeled == 3.0
    total, bd = compose_total(0.0)
    assert total == 0 and bd.total == 0


def test_compose_total_names_bad_component():
    with pytest.raises(FloatingPointError, match="mutual"):
        compose_total(1.0, 1.0, float("nan"))


# finite differences


def test_gradients_match_finite_differences():
    y = (rand(1, 1, 8, 8, seed=30) > 0).double()
    conf = (rand(1, 1, 8, 8, seed=31) > 0).double()
    logits = rand(1, 1, 8, 8, seed=32)
    assert_grad_matches(lambda x: supervised_loss(x, y), logits)
    assert_grad_matches(lambda x: masked_pseudo_loss(x, y, conf), logits)
    other = rand(1, 1, 8, 8, seed=33)
    assert_grad_matches(lambda x: cross_loss_labeled(x, other), logits)
    window = (rand(1, 5, 8, 8, seed=34) > 0).double()
    assert_grad_matches(lambda x: st_loss(x, window), logits)
    e, b, l = (rand(1, 2, 8, 8, seed=35), rand(1, 4, 2, 2, seed=36), rand(1, 1, 8, 8, seed=37))
    e2, b2, l2 = (rand(1, 2, 8, 8, seed=38), rand(1, 4, 2, 2, seed=39), rand(1, 1, 8, 8, seed=40))
    assert_grad_matches(lambda x: mutual_loss((e, b, x), (e2, b2, l2)), l)
    assert_grad_matches(lambda x: mutual_loss((x, b, l), (e2, b2, l2)), e)
    assert_grad_matches(lambda x: mutual_loss((e, x, l), (e2, b2, l2)), b)
