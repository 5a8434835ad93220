import numpy as np
import pytest

from frustumbox.proto import (AttentionParams, FusionParams, KernelBatch, KernelParams, TrainConfig,
                              cosine_similarity, cross_attention_refine, fuse_features,
                              infonce_grad, infonce_loss, kernel_loss, kernel_loss_and_grad,
                              nearest_prototype, train_prototypes)


def brute_infonce(anchors, bank, tau):
    total = 0.0
    for c, a in enumerate(anchors):
        sims = [cosine_similarity(a, p) / tau for p in bank]
        total -= sims[c] - np.log(sum(np.exp(s) for s in sims))
    return total


def test_fuse_zero_mlp_is_identity():
    rng = np.random.default_rng(0)
    f = rng.normal(size=(5, 4))
    m = (rng.random((5, 3)) < 0.5).astype(float)
    assert np.array_equal(fuse_features(f, m, FusionParams.zeros(3, 6, 4)), f)


def test_fuse_single_affine_layer():
    f = np.zeros((2, 2))
    m = np.array([[1.0, 0.0], [0.0, 1.0]])
    p = FusionParams(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([0.5, 0.5]))
    assert np.allclose(fuse_features(f, m, p), [[1.5, 2.5], [3.5, 4.5]])
    with pytest.raises(ValueError):
        fuse_features(np.zeros((3, 2)), m, p)


def test_cosine():
    assert cosine_similarity([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [-3, 0]) == pytest.approx(-1.0)
    assert cosine_similarity([1, 0], [0, 5]) == 0.0
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])


def test_infonce_orthonormal_closed_form():
    eye = np.eye(2)
    assert infonce_loss(eye, eye, 0.07) == pytest.approx(2 * np.log1p(np.exp(-1 / 0.07)), rel=1e-12)


def test_infonce_identical_bank():
    anchors = np.random.default_rng(1).normal(size=(4, 5))
    bank = np.tile([1.0, 2, 0, 0, 1], (4, 1))
    assert infonce_loss(anchors, bank) == pytest.approx(4 * np.log(4))


@pytest.mark.parametrize("seed", range(5))
def test_infonce_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    assert infonce_loss(a, b, 0.2) == pytest.approx(brute_infonce(a, b, 0.2), rel=1e-10)


def test_infonce_row_scale_invariant():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    scale = rng.uniform(0.1, 10, (3, 1))
    assert infonce_loss(a * scale, b) == pytest.approx(infonce_loss(a, b), rel=1e-12)
    assert infonce_loss(a, b * scale) == pytest.approx(infonce_loss(a, b), rel=1e-12)


def test_infonce_gradient_orthogonal_to_rows():
    # scale invariance means each row gradient is orthogonal to that row
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    _, d_bank, d_anchors = infonce_grad(a, b, 0.5)
    assert np.allclose(np.sum(d_bank * b, axis=1), 0, atol=1e-12)
    assert np.allclose(np.sum(d_anchors * a, axis=1), 0, atol=1e-12)


def test_infonce_validation():
    with pytest.raises(ValueError):
        infonce_loss(np.eye(2), np.eye(3))
    with pytest.raises(ValueError):
        infonce_loss(np.eye(2), np.array([[1.0, 0], [0, 0]]))


def test_attention_single_prototype_copies_value():
    rng = np.random.default_rng(4)
    p = AttentionParams.random(4, rng, heads=2)
    x, bank = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    hat, tilde = cross_attention_refine(x, bank, p)
    assert np.allclose(hat, np.tile(bank @ p.wv, (3, 1)))
    assert np.allclose(tilde, hat + x)


def test_attention_zero_values_is_residual():
    rng = np.random.default_rng(5)
    p = AttentionParams.random(4, rng, heads=2)
    p.wv = np.zeros((4, 4))
    x = rng.normal(size=(3, 4))
    _, tilde = cross_attention_refine(x, rng.normal(size=(5, 4)), p)
    assert np.array_equal(tilde, x)


def brute_attention(x, bank, p):
    d = x.shape[1]
    dh = d // p.heads
    out = np.zeros_like(x)
    for h in range(p.heads):
        cols = range(h * dh, (h + 1) * dh)
        q, k, v = (x @ p.wq)[:, cols], (bank @ p.wk)[:, cols], (bank @ p.wv)[:, cols]
        for i in range(len(x)):
            s = np.array([q[i] @ k[j] / np.sqrt(dh) for j in range(len(bank))])
            w = np.exp(s) / np.exp(s).sum()
            out[i, h * dh:(h + 1) * dh] = sum(w[j] * v[j] for j in range(len(bank)))
    return out


@pytest.mark.parametrize("heads", [1, 2, 4])
def test_attention_matches_brute_force(heads):
    rng = np.random.default_rng(heads)
    p = AttentionParams.random(8, rng, heads=heads)
    x, bank = rng.normal(size=(5, 8)), rng.normal(size=(3, 8))
    hat, _, weights = cross_attention_refine(x, bank, p, return_weights=True)
    assert np.allclose(hat, brute_attention(x, bank, p), atol=1e-12)
    for w in weights:
        assert np.allclose(w.sum(axis=1), 1.0)


def test_attention_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        AttentionParams.random(6, rng, heads=4)
    p = AttentionParams.random(4, rng, heads=2)
    with pytest.raises(ValueError):
        cross_attention_refine(np.ones((2, 4)), np.ones((2, 4)), p, dropout=0.1)
    a = cross_attention_refine(np.ones((2, 4)), np.eye(4), p, 0.5, np.random.default_rng(1))[0]
    b = cross_attention_refine(np.ones((2, 4)), np.eye(4), p, 0.5, np.random.default_rng(1))[0]
    assert np.array_equal(a, b)


def random_kernel(seed, heads=4):
    rng = np.random.default_rng(seed)
    c, d, hid, n, k = 3, 8, 5, 6, 2
    p = KernelParams.random(c, d, hid, k, rng, heads=heads)
    b = KernelBatch(rng.normal(size=(n, d)), (rng.random((n, c)) < 0.5).astype(float),
                    rng.normal(size=(c, d)), rng.normal(size=(n, k)))
    return p, b


@pytest.mark.parametrize("seed", range(5))
def test_kernel_gradient_matches_finite_differences(seed):
    p, b = random_kernel(seed)
    theta = p.to_vector()
    g = kernel_loss_and_grad(p, b)[1].to_vector()
    eps = 1e-5
    num = np.array([(kernel_loss(p.from_vector(theta + eps * e), b)
                     - kernel_loss(p.from_vector(theta - eps * e), b)) / (2 * eps)
                    for e in np.eye(len(theta))])
    assert np.linalg.norm(num - g) / np.linalg.norm(g) <= 1e-6


def test_kernel_vector_round_trip():
    p, _ = random_kernel(0)
    q = p.from_vector(p.to_vector())
    assert all(np.array_equal(a, q.arrays()[k]) for k, a in p.arrays().items())


def test_train_zero_weight_keeps_bank():
    rng = np.random.default_rng(0)
    bank = rng.normal(size=(3, 4))
    out, trace = train_prototypes(bank, np.eye(3, 4), TrainConfig(lam=0.0, steps=10))
    assert np.array_equal(out, bank) and len(trace) == 11 and np.all(trace == 0)


def test_train_converges_and_descends():
    rng = np.random.default_rng(1)
    anchors = np.linalg.qr(rng.normal(size=(8, 5)))[0].T
    bank, trace = train_prototypes(rng.normal(size=(5, 8)), anchors)
    assert np.all(nearest_prototype(anchors, bank) == np.arange(5))
    assert np.all(np.diff(trace) <= 1e-8)


def test_train_divergence_raises():
    with pytest.raises(FloatingPointError):
        train_prototypes(np.array([[1.0, np.nan]]), np.array([[1.0, 0.0]]), TrainConfig(steps=2))
    with pytest.raises(ValueError):
        TrainConfig(lr=0)
