import numpy as np
import pytest

from advbct import tensorio
from advbct.errors import ConfigError, FormatError, ShapeError
from advbct.model import (
    SGD,
    Checkpoint,
    ClassifierHead,
    DiscriminatorHead,
    GrlConfig,
    MlpModel,
    classify_backward,
    classify_forward,
    discriminate_backward,
    discriminate_forward,
    embed_backward,
    embed_forward,
    grl_backward,
    normalize_backward,
    sgd_step,
)
from advbct.numerics import finite_difference_gradient, relative_error, seeded_rng, softmax

TOL = 1e-6


def fd_check(loss_fn, params, analytic, h=1e-5):
    """Compare analytic grads against central differences, perturbing params in place."""
    for name, p in params.items():

        def f(v, p=p):
            saved = p.copy()
            p[...] = v
            try:
                return loss_fn()
            finally:
                p[...] = saved

        numeric = finite_difference_gradient(f, p, h)
        err = relative_error(analytic[name], numeric)
        assert err < TOL, f"{name}: relative error {err:.2e}"


def test_embed_identity_layer():
    model = MlpModel([np.eye(3)], [np.zeros(3)])
    row = np.array([[0.6, 0.0, 0.8]])
    z, _ = embed_forward(model, row)
    np.testing.assert_array_equal(z, row)


def test_embed_unit_norm_and_determinism():
    rng = seeded_rng(0)
    model = MlpModel.init([5, 7, 4], rng)
    x = rng.standard_normal((6, 5))
    x[3] = x[1]
    z, _ = embed_forward(model, x)
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    np.testing.assert_array_equal(z[3], z[1])


def test_embed_shape_checks():
    model = MlpModel.init([5, 4], seeded_rng(0))
    with pytest.raises(ShapeError):
        embed_forward(model, np.ones((2, 3)))
    with pytest.raises(ShapeError):
        MlpModel([np.ones((4, 5)), np.ones((3, 3))], [np.zeros(4), np.zeros(3)])


@pytest.mark.parametrize("config", range(20))
def test_embed_backward_matches_finite_differences(config):
    rng = seeded_rng(config, "gradcheck-embed")
    dims = [4, int(rng.integers(3, 7)), 3] if config % 2 else [4, 3]
    model = MlpModel.init(dims, rng)
    for b in model.biases:
        b[...] = rng.normal(0, 0.1, b.shape)
    x = rng.standard_normal((5, 4))
    coeffs = rng.standard_normal((5, dims[-1]))

    def loss():
        return float(np.sum(coeffs * embed_forward(model, x)[0]))

    z, tape = embed_forward(model, x)
    grads, _ = embed_backward(model, tape, coeffs)
    fd_check(loss, model.params(), grads)


def test_normalize_jacobian_matches_finite_differences():
    rng = seeded_rng(3)
    v = rng.standard_normal((1, 6))
    g = rng.standard_normal((1, 6))
    norm = np.linalg.norm(v, axis=1)
    analytic = normalize_backward(v / norm[:, None], norm, g)
    numeric = finite_difference_gradient(lambda u: float(np.sum(g * u / np.linalg.norm(u))), v)
    assert relative_error(analytic, numeric) < TOL


def test_embed_input_gradient():
    rng = seeded_rng(11)
    model = MlpModel.init([3, 5, 2], rng)
    x = rng.standard_normal((2, 3))
    c = rng.standard_normal((2, 2))
    _, tape = embed_forward(model, x)
    _, gx = embed_backward(model, tape, c)
    numeric = finite_difference_gradient(lambda v: float(np.sum(c * embed_forward(model, v)[0])), x)
    assert relative_error(gx, numeric) < TOL


def test_classifier_examples():
    z = seeded_rng(0).standard_normal((4, 3))
    zero = ClassifierHead(np.zeros((5, 3)), np.zeros(5))
    np.testing.assert_array_equal(classify_forward(zero, z), np.zeros((4, 5)))
    select = ClassifierHead(np.eye(3), np.zeros(3))
    np.testing.assert_array_equal(classify_forward(select, z), z)
    head = ClassifierHead.init(6, 3, seeded_rng(1))
    p = softmax(classify_forward(head, z))
    for row in p:
        assert abs(sum(float(v) for v in row) - 1.0) < 1e-12
    with pytest.raises(ShapeError):
        classify_forward(head, np.ones((2, 4)))


@pytest.mark.parametrize("config", range(5))
def test_classifier_backward(config):
    rng = seeded_rng(config, "gradcheck-cls")
    head = ClassifierHead.init(4, 3, rng)
    head.bias[...] = rng.standard_normal(4)
    z = rng.standard_normal((5, 3))
    c = rng.standard_normal((5, 4))
    grads, gz = classify_backward(head, z, c)
    fd_check(lambda: float(np.sum(c * classify_forward(head, z))), head.params(), grads)
    numeric = finite_difference_gradient(lambda v: float(np.sum(c * classify_forward(head, v))), z)
    assert relative_error(gz, numeric) < TOL


def test_discriminator_examples():
    z = seeded_rng(0).standard_normal((4, 3))
    q, _ = discriminate_forward(DiscriminatorHead.zeros(3), z)
    np.testing.assert_array_equal(q, np.full(4, 0.5))
    head = DiscriminatorHead.init(3, seeded_rng(2))
    z[2] = z[0]
    q, _ = discriminate_forward(head, z)
    assert q[2] == q[0]
    assert np.all((q > 0) & (q < 1))
    with pytest.raises(ShapeError):
        discriminate_forward(head, np.ones((2, 5)))


@pytest.mark.parametrize("config", range(20))
def test_discriminator_backward(config):
    rng = seeded_rng(config, "gradcheck-disc")
    head = DiscriminatorHead.init(3, rng, hidden=int(rng.integers(2, 6)))
    head.b1[...] = rng.normal(0, 0.1, head.b1.shape)
    head.b2[...] = rng.normal(0, 0.1, 1)
    z = rng.standard_normal((6, 3))
    c = rng.standard_normal(6)
    q, tape = discriminate_forward(head, z)
    grads, gz = discriminate_backward(head, tape, c)
    fd_check(lambda: float(c @ discriminate_forward(head, z)[0]), head.params(), grads)
    numeric = finite_difference_gradient(lambda v: float(c @ discriminate_forward(head, v)[0]), z)
    assert relative_error(gz, numeric) < TOL


def test_grl_backward():
    g = seeded_rng(0).standard_normal((3, 2))
    np.testing.assert_array_equal(grl_backward(g, GrlConfig(1.0)), -g)
    np.testing.assert_array_equal(grl_backward(g, GrlConfig(0.0)), np.zeros((3, 2)))
    np.testing.assert_allclose(grl_backward(g, GrlConfig(2.5)), -2.5 * g)
    with pytest.raises(ConfigError):
        GrlConfig(-1.0)
    with pytest.raises(ConfigError):
        GrlConfig(float("inf"))


def test_sgd_examples():
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": np.zeros(2)}, lr=0.1, momentum=0.9, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    g = np.array([0.5, 0.25])
    p = {"w": np.array([1.0, -2.0])}
    sgd_step(p, {"w": g}, lr=1.0, momentum=0.0, weight_decay=0.0)
    np.testing.assert_array_equal(p["w"], np.array([1.0, -2.0]) - g)

    start = np.array([1.0, -2.0])
    p = {"w": start.copy()}
    opt = SGD(p, momentum=0.9, weight_decay=0.0)
    opt.step({"w": g}, lr=1.0)
    opt.step({"w": g}, lr=1.0)
    np.testing.assert_allclose(p["w"], start - g - 1.9 * g, atol=1e-15)


def test_sgd_weight_decay_and_in_place():
    w = np.array([2.0])
    params = {"w": w}
    sgd_step(params, {"w": np.zeros(1)}, lr=0.5, momentum=0.0, weight_decay=0.1)
    assert w[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)
    assert params["w"] is w
    with pytest.raises(ShapeError):
        sgd_step(params, {"w": np.zeros(2)}, 0.1, 0.0, 0.0)


def test_checkpoint_round_trip(tmp_path):
    rng = seeded_rng(5)
    ckpt = Checkpoint(
        MlpModel.init([4, 6, 3], rng), ClassifierHead.init(5, 3, rng), DiscriminatorHead.init(3, rng)
    )
    path = tmp_path / "m.abct"
    ckpt.save(path)
    back = Checkpoint.load(path)
    assert back.to_bytes() == ckpt.to_bytes()
    for name, value in ckpt.tensors().items():
        np.testing.assert_array_equal(back.tensors()[name], value)
    blob = path.read_bytes()
    assert blob[:4] == b"ABCT"
    assert int.from_bytes(blob[4:8], "little") == tensorio.VERSION


def test_tensor_container_layout():
    blob = tensorio.dumps({"a": np.array([[1.5, -2.0]])})
    expected = (
        b"ABCT" + (1).to_bytes(4, "little") + (1).to_bytes(4, "little") + b"a"
        + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
        + np.array([1.5, -2.0], dtype="<f8").tobytes()
    )
    assert blob == expected


def test_tensor_container_rejects_garbage():
    with pytest.raises(FormatError):
        tensorio.loads(b"XXXX\x01\x00\x00\x00")
    with pytest.raises(FormatError):
        tensorio.loads(b"ABCT\x09\x00\x00\x00")
    good = tensorio.dumps({"a": np.ones((2, 2))})
    with pytest.raises(FormatError):
        tensorio.loads(good[:-3])
