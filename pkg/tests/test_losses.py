import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from portrait_anim import losses as L
from portrait_anim.errors import InvalidParamsError, ShapeMismatchError


def body_terms(value=1.0):
    return {k: torch.tensor(value, dtype=torch.float64) for k in L.BODY_TERMS}


def face_terms(value=1.0, optional=False):
    keys = L.FACE_REQUIRED + (L.FACE_OPTIONAL if optional else ())
    return {k: torch.tensor(value, dtype=torch.float64) for k in keys}


# --------------------------------------------------------------------------
# bookkeeping
# --------------------------------------------------------------------------

def test_total_zero_and_literal_sum():
    assert float(L.total_loss(body_terms(0.0)).total) == 0.0
    assert float(L.total_loss(body_terms(1.0)).total) == 8.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=8, max_size=8), st.lists(st.floats(0, 5), min_size=8, max_size=8))
def test_total_matches_dot_product(values, weights):
    terms = {k: torch.tensor(v, dtype=torch.float64) for k, v in zip(L.BODY_TERMS, values)}
    w = dict(zip(L.BODY_TERMS, weights))
    got = float(L.total_loss(terms, w).total)
    want = float(np.dot(values, weights))
    assert abs(got - want) <= 1e-8 * max(1.0, abs(want))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 10), min_size=8, max_size=8), st.lists(st.floats(0, 5), min_size=8, max_size=8),
       st.lists(st.floats(0, 5), min_size=8, max_size=8), st.floats(-3, 3))
def test_total_linear_in_weights(values, w1, w2, a):
    terms = {k: torch.tensor(v, dtype=torch.float64) for k, v in zip(L.BODY_TERMS, values)}
    t1 = float(L.total_loss(terms, dict(zip(L.BODY_TERMS, w1))).total)
    t2 = float(L.total_loss(terms, dict(zip(L.BODY_TERMS, w2))).total)
    t12 = float(L.total_loss(terms, dict(zip(L.BODY_TERMS, [x + y for x, y in zip(w1, w2)]))).total)
    assert abs(t12 - (t1 + t2)) <= 1e-8 * max(1.0, abs(t12))


def test_body_mode_requires_all_terms():
    terms = body_terms()
    del terms["lms"]
    with pytest.raises(InvalidParamsError):
        L.total_loss(terms)
    with pytest.raises(InvalidParamsError):
        L.total_loss({**body_terms(), "Per_face": torch.tensor(1.0)})


def test_face_mode_excludes_lms_and_hand():
    report = L.total_loss(face_terms(), mode="face")
    assert "lms" not in report.terms and "Per_hand" not in report.terms
    assert float(report.total) == 4.0
    assert float(L.total_loss(face_terms(optional=True), mode="face").total) == 7.0
    for bad in ("lms", "Per_hand"):
        with pytest.raises(InvalidParamsError):
            L.total_loss({**face_terms(), bad: torch.tensor(0.0)}, mode="face")
    with pytest.raises(InvalidParamsError):
        L.total_loss({k: v for k, v in face_terms().items() if k != "Per_face"}, mode="face")


def test_total_term_sign_and_finiteness():
    terms = body_terms()
    terms["GAN"] = torch.tensor(-0.5, dtype=torch.float64)
    assert float(L.total_loss(terms).total) == pytest.approx(6.5)
    terms["Recon"] = torch.tensor(-0.1, dtype=torch.float64)
    with pytest.raises(InvalidParamsError):
        L.total_loss(terms)
    terms = body_terms()
    terms["Per"] = torch.tensor(float("nan"))
    with pytest.raises(FloatingPointError):
        L.total_loss(terms)


def test_report_scalars():
    rep = L.total_loss(body_terms(0.5))
    s = rep.scalars()
    assert s["total"] == 4.0 and s["Per"] == 0.5


# --------------------------------------------------------------------------
# keypoint terms
# --------------------------------------------------------------------------

def test_equivariance_identity_is_zero():
    frame = torch.rand(2, 3, 32, 32, generator=torch.Generator().manual_seed(0))
    detect = lambda img: img.mean(dim=(2, 3))[:, :2].reshape(-1, 1, 2) * torch.ones(1, 4, 1)
    loss = L.equivariance_loss(detect, frame, transform=(np.eye(2), np.zeros(2)))
    assert float(loss) == 0.0


def test_equivariance_constant_detector_closed_form():
    kp = torch.tensor([[[0.1, -0.2], [0.3, 0.4], [-0.5, 0.0]]], dtype=torch.float64)
    detect = lambda img: kp.expand(img.shape[0], -1, -1)
    ang, s, b = 0.2, 1.05, np.array([0.05, -0.03])
    A = s * np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    loss = L.equivariance_loss(detect, torch.zeros(1, 3, 16, 16, dtype=torch.float64), transform=(A, b))
    pts = kp[0].numpy()
    want = np.mean(np.abs(pts - (pts @ A.T + b)))
    assert float(loss) == pytest.approx(want, abs=1e-12)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 1000))
def test_equivariance_nonnegative(seed):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3, 2, 1), torch.nn.AdaptiveAvgPool2d(1), torch.nn.Flatten(),
                              torch.nn.Linear(4, 6))
    detect = lambda img: torch.tanh(net(img)).view(-1, 3, 2)
    with torch.no_grad():
        loss = L.equivariance_loss(detect, torch.rand(2, 3, 24, 24), rng=rng)
    assert float(loss) >= 0


def test_warp_image_moves_content():
    img = torch.zeros(1, 1, 41, 41, dtype=torch.float64)
    img[0, 0, 20, 20] = 1.0
    out = L.warp_image(img, np.eye(2), np.array([10 / 41 * 2, 0.0]))
    r, c = np.unravel_index(int(out.argmax()), (41, 41))
    assert (r, c) == (20, 30)


def test_prior_losses_cases():
    spread = torch.tensor([[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0, 0.0]]])
    l_kp, l_d = L.prior_losses(spread, torch.zeros(1, 4, 3))
    assert float(l_kp) == 0.0 and float(l_d) == 0.0
    # one coincident pair among 6: hinge contributes 0.1 / 6 (less the sqrt guard of 1e-6)
    pair = spread.clone()
    pair[0, 1] = pair[0, 0]
    l_kp, _ = L.prior_losses(pair, torch.zeros(1, 4, 3))
    assert float(l_kp) == pytest.approx(0.1 / 6, abs=1e-6)
    _, l_d = L.prior_losses(spread, torch.ones(1, 4, 3))
    assert float(l_d) == 1.0
    deep = spread.clone()
    deep[..., 2] = 0.3
    assert float(L.prior_losses(deep, torch.zeros(1, 4, 3))[0]) == pytest.approx(0.3)


def test_landmark_loss():
    a = torch.rand(2, 5, 2)
    assert float(L.landmark_loss(a, a)) == 0.0
    assert float(L.landmark_loss(a, a + 0.25)) == pytest.approx(0.25)
    with pytest.raises(ShapeMismatchError):
        L.landmark_loss(a, a[:, :4])


# --------------------------------------------------------------------------
# image terms
# --------------------------------------------------------------------------

FEATS = L.FeatureStack(0)


def test_identity_images_zero_losses():
    x = torch.rand(2, 3, 32, 32)
    mask = (torch.rand(2, 1, 32, 32) > 0.5).float()
    per, rec, gan, per_m = L.image_losses(FEATS, x, x, mask)
    assert float(per) == 0 and float(rec) == 0 and float(per_m) == 0 and float(gan) == 0


def test_empty_mask_gives_zero():
    a, b = torch.rand(1, 3, 32, 32), torch.rand(1, 3, 32, 32)
    assert float(L.perceptual(FEATS, a, b, torch.zeros(1, 1, 32, 32))) == 0.0


def test_recon_matches_naive_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8))
    naive = 0.0
    for idx in np.ndindex(a.shape):
        naive += abs(a[idx] - b[idx])
    naive /= a.size
    assert abs(float(L.recon_loss(torch.tensor(a), torch.tensor(b))) - naive) < 1e-10


def test_full_mask_perceptual_equals_unmasked():
    a, b = torch.rand(1, 3, 32, 32, dtype=torch.float64), torch.rand(1, 3, 32, 32, dtype=torch.float64)
    feats = L.FeatureStack(0).double()
    full = L.perceptual(feats, a, b, torch.ones(1, 1, 32, 32, dtype=torch.float64))
    assert float(full) == pytest.approx(float(L.perceptual(feats, a, b)), rel=1e-12)


def test_feature_stack_seeded_and_frozen():
    a, b = L.FeatureStack(3), L.FeatureStack(3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q) and not p.requires_grad
    assert not torch.equal(a.layers[0].weight, L.FeatureStack(4).layers[0].weight)


def test_image_loss_shape_errors():
    with pytest.raises(ShapeMismatchError):
        L.recon_loss(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 9))
    with pytest.raises(ShapeMismatchError):
        L.perceptual(FEATS, torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8), torch.zeros(1, 1, 4, 4))


def test_discriminator_scales_and_hinge():
    d = L.PatchDiscriminator()
    outs = d(torch.rand(2, 3, 64, 64))
    assert len(outs) == 3 and outs[1].shape[-1] == outs[0].shape[-1] // 2
    real, fake = torch.rand(2, 3, 64, 64), torch.rand(2, 3, 64, 64)
    assert float(L.gan_discriminator_loss(d, real, fake).detach()) >= 0


# --------------------------------------------------------------------------
# gradient checks (double precision, small rigged models)
# --------------------------------------------------------------------------

def rel_grad_error(fn, params):
    loss = fn()
    grads = torch.autograd.grad(loss, params)
    worst = 0.0
    h = 1e-6
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        for i in range(flat.numel()):
            old = float(flat[i])
            flat[i] = old + h
            up = float(fn().detach())
            flat[i] = old - h
            down = float(fn().detach())
            flat[i] = old
            num = (up - down) / (2 * h)
            an = float(g.view(-1)[i])
            worst = max(worst, abs(an - num) / max(abs(num), abs(an), 1e-8))
    return worst


def test_gradient_recon_and_landmark():
    torch.manual_seed(0)
    p = torch.rand(1, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    tgt = torch.rand(1, 3, 4, 4, dtype=torch.float64)
    assert rel_grad_error(lambda: L.recon_loss(p, tgt), [p]) < 1e-3
    k = torch.rand(1, 5, 2, dtype=torch.float64, requires_grad=True)
    kt = torch.rand(1, 5, 2, dtype=torch.float64)
    assert rel_grad_error(lambda: L.landmark_loss(k, kt), [k]) < 1e-3


def test_gradient_perceptual_masked():
    torch.manual_seed(1)
    feats = L.FeatureStack(0, channels=(2, 2)).double()
    p = torch.rand(1, 3, 6, 6, dtype=torch.float64, requires_grad=True)
    tgt = torch.rand(1, 3, 6, 6, dtype=torch.float64)
    mask = torch.zeros(1, 1, 6, 6, dtype=torch.float64)
    mask[..., 1:5, 2:6] = 1
    assert rel_grad_error(lambda: L.perceptual(feats, p, tgt), [p]) < 1e-3
    assert rel_grad_error(lambda: L.perceptual(feats, p, tgt, mask), [p]) < 1e-3


def test_gradient_priors():
    torch.manual_seed(2)
    c = (torch.rand(1, 6, 3, dtype=torch.float64) * 0.15).requires_grad_(True)
    d = torch.randn(1, 6, 3, dtype=torch.float64, requires_grad=True)
    assert rel_grad_error(lambda: L.prior_losses(c, d)[0], [c]) < 1e-3
    assert rel_grad_error(lambda: L.prior_losses(c, d)[1], [d]) < 1e-3


def test_gradient_gan_and_equivariance():
    torch.manual_seed(3)
    disc = L.PatchDiscriminator(scales=2, width=2).double()
    x = torch.rand(1, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    real = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert rel_grad_error(lambda: L.gan_generator_loss(disc, x), [x]) < 1e-3
    w = list(disc.nets[0].parameters())[0]
    assert rel_grad_error(lambda: L.gan_discriminator_loss(disc, real, x), [w]) < 1e-3
    lin = torch.nn.Linear(3, 4).double()
    detect = lambda img: torch.tanh(lin(img.mean(dim=(2, 3)))).view(-1, 2, 2)
    A = np.array([[0.95, -0.1], [0.1, 0.95]])
    b = np.array([0.05, 0.02])
    frame = torch.rand(1, 3, 8, 8, dtype=torch.float64)
    assert rel_grad_error(lambda: L.equivariance_loss(detect, frame, transform=(A, b)), [lin.weight]) < 1e-3
