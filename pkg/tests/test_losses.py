import math
import random

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from madan.losses import (
    DISCRIMINATOR,
    GENERATOR,
    PER_SOURCE_TERMS,
    SHARED_TERMS,
    LossWeights,
    adversarial_loss,
    ccd_loss,
    cycle_loss,
    dsc_loss,
    feat_loss,
    sad_loss,
    task_loss,
    total_loss,
)
from madan.models import FeatureDiscriminator, Generator, PatchDiscriminator, Segmenter, init_weights

D, G = DISCRIMINATOR, GENERATOR
f64 = torch.float64


def _init(module, seed=0):
    init_weights(module, torch.Generator().manual_seed(seed))
    return module.double()


def softplus(z):
    return math.log1p(math.exp(-abs(z))) + max(z, 0.0)


def mean_softplus(t, sign):
    vals = [softplus(sign * float(v)) for v in t.flatten()]
    return sum(vals) / len(vals)


def brute_ce(logits, labels):
    B, L, H, W = logits.shape
    total = 0.0
    for b in range(B):
        for h in range(H):
            for w in range(W):
                zs = [float(logits[b, l, h, w]) for l in range(L)]
                m = max(zs)
                lse = m + math.log(sum(math.exp(z - m) for z in zs))
                total += lse - zs[int(labels[b, h, w])]
    return total / (B * H * W)


def brute_kl(p_logits, q_logits):
    B, L, H, W = p_logits.shape
    total = 0.0
    for b in range(B):
        for h in range(H):
            for w in range(W):
                zp = [float(p_logits[b, l, h, w]) for l in range(L)]
                zq = [float(q_logits[b, l, h, w]) for l in range(L)]
                sp = sum(math.exp(z) for z in zp)
                sq = sum(math.exp(z) for z in zq)
                p = [math.exp(z) / sp for z in zp]
                q = [max(math.exp(z) / sq, 1e-12) for z in zq]
                total += sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
    return total / (B * H * W)


class TestAdversarial:
    def test_separated(self):
        real = torch.full((2, 1, 4, 4), 20.0, dtype=f64)
        fake = torch.full((2, 1, 4, 4), -20.0, dtype=f64)
        assert adversarial_loss(real, fake, D).item() < 1e-8

    def test_uncertain(self):
        z = torch.zeros(3, 1, 4, 4, dtype=f64)
        assert abs(adversarial_loss(z, z, D).item() - math.log(2)) < 1e-6
        assert abs(adversarial_loss(None, z, G).item() - math.log(2)) < 1e-6

    def test_generator_single_logit(self):
        z = torch.tensor([[[[0.5]]]], dtype=f64)
        expected = -math.log(1 / (1 + math.exp(-0.5)))
        assert abs(adversarial_loss(None, z, G).item() - expected) < 1e-12
        assert abs(expected - 0.4741) < 1e-4

    def test_matches_scalar_oracle(self):
        gen = torch.Generator().manual_seed(0)
        real = torch.randn(2, 1, 3, 3, generator=gen, dtype=f64) * 3
        fake = torch.randn(2, 1, 3, 3, generator=gen, dtype=f64) * 3
        expected = 0.5 * (mean_softplus(real, -1) + mean_softplus(fake, 1))
        assert abs(adversarial_loss(real, fake, D).item() - expected) < 1e-12

    def test_non_finite_rejected(self):
        bad = torch.tensor([[[[float("nan")]]]])
        with pytest.raises(ValueError):
            adversarial_loss(bad, torch.zeros(1, 1, 1, 1), D)
        with pytest.raises(ValueError):
            adversarial_loss(None, torch.full((1, 1, 1, 1), float("inf")), G)

    def test_bad_side(self):
        with pytest.raises(ValueError):
            adversarial_loss(torch.zeros(1), torch.zeros(1), "critic")


class TestCycle:
    def test_identity(self):
        x = torch.randn(2, 3, 8, 8)
        assert cycle_loss(x, x).item() == 0.0

    def test_max_range(self):
        assert cycle_loss(-torch.ones(1, 3, 4, 4), torch.ones(1, 3, 4, 4)).item() == 2.0

    def test_elementwise_oracle(self):
        rng = np.random.default_rng(3)
        a, b = rng.uniform(-1, 1, (2, 3, 4, 4)), rng.uniform(-1, 1, (2, 3, 4, 4))
        expected = sum(abs(x - y) for x, y in zip(a.ravel(), b.ravel())) / a.size
        got = cycle_loss(torch.from_numpy(a), torch.from_numpy(b)).item()
        assert abs(got - expected) < 1e-14

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            cycle_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 8))


class TestDSC:
    def test_identical(self):
        p = torch.randn(2, 5, 4, 4, dtype=f64) * 5
        assert abs(dsc_loss(p, p).item()) <= 1e-9

    def test_uniform_vs_peaked(self):
        adapted = torch.zeros(1, 5, 2, 2, dtype=f64)
        source = torch.zeros(1, 5, 2, 2, dtype=f64)
        source[:, 0] = 10.0
        # KL(uniform || q) per pixel by direct summation
        zq = [10.0, 0, 0, 0, 0]
        sq = sum(math.exp(z) for z in zq)
        expected = sum(0.2 * math.log(0.2 / (math.exp(z) / sq)) for z in zq)
        assert abs(dsc_loss(adapted, source).item() - expected) < 1e-12
        assert abs(brute_kl(adapted, source) - expected) < 1e-12

    def test_random_vs_brute_force(self):
        gen = torch.Generator().manual_seed(7)
        p = torch.randn(2, 4, 3, 3, generator=gen, dtype=f64) * 4
        q = torch.randn(2, 4, 3, 3, generator=gen, dtype=f64) * 4
        assert abs(dsc_loss(p, q).item() - brute_kl(p, q)) < 1e-12

    def test_asymmetric(self):
        p = torch.tensor([3.0, 0.0, 0.0], dtype=f64).view(1, 3, 1, 1)
        q = torch.tensor([0.0, 1.0, 0.0], dtype=f64).view(1, 3, 1, 1)
        assert abs(dsc_loss(p, q).item() - dsc_loss(q, p).item()) > 1e-3

    def test_no_gradient_to_source(self):
        p = torch.randn(1, 5, 2, 2, dtype=f64, requires_grad=True)
        q = torch.randn(1, 5, 2, 2, dtype=f64, requires_grad=True)
        dsc_loss(p, q).backward()
        assert q.grad is None and p.grad is not None

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            dsc_loss(torch.zeros(1, 5, 2, 2), torch.zeros(1, 4, 2, 2))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (1, 4, 2, 3), elements=st.floats(-30, 30)),
           arrays(np.float64, (1, 4, 2, 3), elements=st.floats(-30, 30)))
    def test_non_negative_and_self_zero(self, a, b):
        ta, tb = torch.from_numpy(a), torch.from_numpy(b)
        assert dsc_loss(ta, tb).item() >= -1e-9
        assert abs(dsc_loss(ta, ta).item()) <= 1e-9


class _ConstDisc(torch.nn.Module):
    """Returns a fixed logit per input tensor identity."""

    def __init__(self, table):
        super().__init__()
        self.table = table

    def forward(self, x):
        return torch.full((x.shape[0], 1, 2, 2), self.table[id(x)], dtype=f64)


class TestSAD:
    def test_identical_batches_direct_evaluation(self):
        d = _init(PatchDiscriminator(width=8))
        x = torch.rand(2, 3, 16, 16, dtype=f64) * 2 - 1
        z = d(x).detach()
        dis = 0.5 * (mean_softplus(z, -1) + mean_softplus(z, 1))
        gen = mean_softplus(z, -1)
        assert abs(sad_loss([x, x], 0, d, D).item() - dis) < 1e-12
        assert abs(sad_loss([x, x], 0, d, G).item() - gen) < 1e-12

    @pytest.mark.parametrize("M", [2, 3])
    def test_coefficient_law(self, M):
        batches = [torch.zeros(1, 3, 16, 16, dtype=f64) + k for k in range(M)]
        logits = [0.3, -1.2, 2.5][:M]
        disc = _ConstDisc({id(b): z for b, z in zip(batches, logits)})
        others = [logits[j] for j in range(1, M)]
        fake = sum(softplus(z) for z in others) / (M - 1)
        expected = 0.5 * (softplus(-logits[0]) + fake)
        assert sad_loss(batches, 0, disc, D).item() == pytest.approx(expected, abs=1e-15)
        gen = sum(softplus(-z) for z in others) / (M - 1)
        assert sad_loss(batches, 0, disc, G).item() == pytest.approx(gen, abs=1e-15)

    def test_duplicating_fakes_leaves_fake_term(self):
        d = _init(PatchDiscriminator(width=8))
        own, other = torch.rand(1, 3, 16, 16, dtype=f64), torch.rand(1, 3, 16, 16, dtype=f64)
        two = sad_loss([own, other], 0, d, D).item()
        three = sad_loss([own, other, other], 0, d, D).item()
        assert two == pytest.approx(three, abs=1e-15)

    def test_single_source_rejected(self):
        with pytest.raises(ValueError):
            sad_loss([torch.zeros(1, 3, 16, 16)], 0, PatchDiscriminator(), D)


class TestCCD:
    def test_uncertain_discriminator(self):
        x = torch.rand(1, 3, 16, 16, dtype=f64)
        disc = lambda t: torch.zeros(t.shape[0], 1, 1, 1, dtype=f64)
        assert abs(ccd_loss(x, [x], disc, D).item() - math.log(2)) < 1e-6
        assert abs(ccd_loss(x, [x], disc, G).item() - math.log(2)) < 1e-6

    @pytest.mark.parametrize("M", [2, 3])
    def test_coefficient_law(self, M):
        x = torch.zeros(1, 3, 16, 16, dtype=f64)
        fakes = [torch.zeros(1, 3, 16, 16, dtype=f64) + k + 1 for k in range(M - 1)]
        logits = {id(x): 1.5}
        logits.update({id(f): z for f, z in zip(fakes, [-0.7, 0.9])})
        disc = _ConstDisc(logits)
        fake = sum(softplus(logits[id(f)]) for f in fakes) / (M - 1)
        assert ccd_loss(x, fakes, disc, D).item() == pytest.approx(0.5 * (softplus(-1.5) + fake), abs=1e-15)

    def test_single_source_rejected(self):
        with pytest.raises(ValueError):
            ccd_loss(torch.zeros(1, 3, 16, 16), [], PatchDiscriminator(), D)


class TestTask:
    def test_confident_correct(self):
        labels = torch.randint(0, 5, (2, 4, 4))
        logits = torch.nn.functional.one_hot(labels, 5).permute(0, 3, 1, 2).double() * 30
        assert task_loss(logits, labels).item() < 1e-12

    def test_uniform(self):
        labels = torch.randint(0, 5, (2, 4, 4))
        assert abs(task_loss(torch.zeros(2, 5, 4, 4), labels).item() - math.log(5)) < 1e-6

    def test_pixel_loop_oracle(self):
        gen = torch.Generator().manual_seed(11)
        logits = torch.randn(2, 5, 4, 4, generator=gen, dtype=f64) * 3
        labels = torch.randint(0, 5, (2, 4, 4), generator=gen)
        assert abs(task_loss(logits, labels).item() - brute_ce(logits, labels)) < 1e-12

    def test_out_of_range(self):
        with pytest.raises(ValueError, match="outside"):
            task_loss(torch.zeros(1, 5, 2, 2), torch.full((1, 2, 2), 5))
        with pytest.raises(ValueError, match="outside"):
            task_loss(torch.zeros(1, 5, 2, 2), torch.full((1, 2, 2), -1))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            task_loss(torch.zeros(1, 5, 2, 2), torch.zeros(1, 2, 3, dtype=torch.long))


class TestFeat:
    def test_uncertain(self):
        f = torch.randn(2, 64, 2, 2)
        disc = lambda t: torch.zeros(t.shape[0], 1, 2, 2)
        assert abs(feat_loss(f, f, disc, D).item() - math.log(2)) < 1e-6
        assert abs(feat_loss(f, f, disc, G).item() - math.log(2)) < 1e-6

    def test_separated(self):
        fa, ft = torch.zeros(1, 4, 2, 2), torch.ones(1, 4, 2, 2)
        disc = lambda t: (t[:, :1] * 40 - 20)
        assert feat_loss(fa, ft, disc, D).item() < 1e-8

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            feat_loss(torch.zeros(1, 64, 2, 2), torch.zeros(1, 32, 2, 2), FeatureDiscriminator(), D)

    def test_gradient_reaches_encoder_only(self):
        seg = _init(Segmenter())
        d = _init(FeatureDiscriminator(64, 16))
        x = torch.randn(2, 3, 16, 16, dtype=f64)
        feat_loss(seg.features(x), seg.features(x + 0.5), d, G).backward()
        enc = {id(p) for p in seg.encoder_parameters()}
        for name, p in seg.named_parameters():
            if id(p) in enc:
                assert p.grad is not None and p.grad.abs().sum() > 0, name
            else:
                assert p.grad is None or p.grad.abs().sum() == 0, name


class TestTotal:
    def test_zero(self):
        report = total_loss([{k: 0.0 for k in PER_SOURCE_TERMS}] * 2, {"task": 0.0, "feat": 0.0})
        assert report.total == 0.0

    def test_summation(self):
        report = total_loss([{"gan_st": 1.0, "cyc": 2.0}], {"task": 3.0})
        assert report.total == 6.0

    def test_random_weighted_oracle(self):
        rnd = random.Random(5)
        for _ in range(100):
            M = rnd.randint(1, 3)
            per = [{k: rnd.uniform(0, 3) for k in PER_SOURCE_TERMS} for _ in range(M)]
            shared = {k: rnd.uniform(0, 3) for k in SHARED_TERMS}
            w = {f"w_{k}": rnd.uniform(0, 2) for k in ("gan", "cyc", "sem", "sad", "ccd", "task", "feat")}
            report = total_loss(per, shared, LossWeights(**w))
            weight_of = {"gan_st": "w_gan", "gan_ts": "w_gan", "cyc": "w_cyc", "sem": "w_sem",
                         "sad": "w_sad", "ccd": "w_ccd", "task": "w_task", "feat": "w_feat"}
            expected = sum(w[weight_of[k]] * src[k] for src in per for k in PER_SOURCE_TERMS)
            expected += sum(w[weight_of[k]] * shared[k] for k in SHARED_TERMS)
            assert report.total == pytest.approx(expected, rel=1e-12)
            assert report.terms["cyc"] == pytest.approx(sum(src["cyc"] for src in per), rel=1e-12)

    def test_nan_names_term(self):
        with pytest.raises(ValueError, match="sad"):
            total_loss([{"sad": float("nan")}], {})
        with pytest.raises(ValueError, match="feat"):
            total_loss([], {"feat": torch.tensor(float("inf"))})

    def test_invalid_weights(self):
        with pytest.raises(ValueError):
            LossWeights(w_cyc=-1.0)
        with pytest.raises(ValueError):
            LossWeights(w_sad=float("nan"))


def chain_gradient_errors(fd_check):
    """Relative errors of every objective term, each checked through the
    networks that produce its inputs, in float64."""
    torch.manual_seed(0)
    gs = [_init(Generator(width=4, n_blocks=1), s) for s in range(4)]  # st0, st1, ts0, ts1
    d_img = _init(PatchDiscriminator(width=4), 5)
    seg = _init(Segmenter(), 6)
    frozen = _init(Segmenter(), 7)
    d_feat = _init(FeatureDiscriminator(64, 8), 8)
    x16 = [torch.rand(1, 3, 16, 16, dtype=f64) * 2 - 1 for _ in range(2)]
    t16 = torch.rand(1, 3, 16, 16, dtype=f64) * 2 - 1
    x8 = torch.rand(1, 3, 8, 8, dtype=f64) * 2 - 1
    t8 = torch.rand(1, 3, 8, 8, dtype=f64) * 2 - 1
    labels = torch.randint(0, 5, (1, 8, 8))
    P = lambda *mods: [p for m in mods for p in m.parameters()]
    errors = {}
    for side in (D, G):
        errors[f"gan_st/{side}"] = fd_check(
            lambda: adversarial_loss(d_img(t16), d_img(gs[0](x16[0])), side), P(gs[0], d_img))
        errors[f"gan_ts/{side}"] = fd_check(
            lambda: adversarial_loss(d_img(x16[0]), d_img(gs[2](t16)), side), P(gs[2], d_img))
        errors[f"sad/{side}"] = fd_check(
            lambda: sad_loss([gs[0](x16[0]), gs[1](x16[1])], 0, d_img, side), P(gs[0], gs[1], d_img))
        errors[f"ccd/{side}"] = fd_check(
            lambda: ccd_loss(x16[0], [gs[2](gs[1](x16[1]))], d_img, side), P(gs[1], gs[2], d_img))
        errors[f"feat/{side}"] = fd_check(
            lambda: feat_loss(seg.features(x8), seg.features(t8), d_feat, side),
            list(seg.encoder_parameters()) + P(d_feat))
    errors["cyc"] = fd_check(lambda: cycle_loss(x8, gs[2](gs[0](x8))), P(gs[0], gs[2]))
    errors["sem"] = fd_check(lambda: dsc_loss(seg(gs[0](x8))[0], frozen(x8)[0]), P(gs[0]))
    errors["task"] = fd_check(lambda: task_loss(seg(x8)[0], labels), P(seg))
    return errors


def test_chain_gradients(fd_check):
    errors = chain_gradient_errors(fd_check)
    bad = {k: v for k, v in errors.items() if not v < 1e-4}
    assert not bad, bad


_SOURCE_LOGITS = torch.randn(1, 5, 3, 3, dtype=f64, generator=torch.Generator().manual_seed(2))


@pytest.mark.parametrize("fn,shape", [
    (lambda z: adversarial_loss(z[0], z[1], D), (2, 1, 1, 3, 3)),
    (lambda z: adversarial_loss(None, z[0], G), (1, 1, 1, 3, 3)),
    (lambda z: dsc_loss(z[0], _SOURCE_LOGITS), (1, 1, 5, 3, 3)),
])
def test_direct_input_gradients(fn, shape):
    z = torch.randn(*shape, dtype=f64, requires_grad=True)
    assert torch.autograd.gradcheck(fn, (z,), eps=1e-6, atol=1e-8, rtol=1e-5)
