import numpy as np
import pytest

from songlm import kernels


@pytest.fixture(params=["compiled", "numpy"])
def backend(request):
    if request.param == "compiled" and kernels.BACKEND != "compiled" and kernels._compiled is None:
        pytest.skip("compiled kernels not built")
    prev = kernels.use_backend(request.param)
    yield request.param
    kernels.use_backend(prev)


def test_matmul_and_layer_norm(backend):
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)).astype(np.float32), rng.normal(size=(7, 3)).astype(np.float32)
    np.testing.assert_allclose(kernels.matmul(a, b), a @ b, rtol=1e-5, atol=1e-5)
    g, bias = rng.normal(size=7).astype(np.float32), rng.normal(size=7).astype(np.float32)
    mu, var = a.mean(1, keepdims=True), a.var(1, keepdims=True)
    np.testing.assert_allclose(kernels.layer_norm(a, g, bias), (a - mu) / np.sqrt(var + 1e-5) * g + bias, atol=1e-5)


def test_attend_skips_masked_keys(backend):
    rng = np.random.default_rng(1)
    q = rng.normal(size=(2, 4)).astype(np.float32)
    k = rng.normal(size=(2, 5, 4)).astype(np.float32)
    v = rng.normal(size=(2, 5, 4)).astype(np.float32)
    mask = np.array([[1, 1, 0, 0, 0], [1, 1, 1, 1, 1]], np.uint8)
    out = kernels.attend(q, k, v, mask, 0.5)
    k2, v2 = k.copy(), v.copy()
    k2[0, 2:] = 1e6
    v2[0, 2:] = np.nan
    np.testing.assert_array_equal(kernels.attend(q, k2, v2, mask, 0.5)[0], out[0])
    s = (k[1] @ q[1]) * 0.5
    w = np.exp(s - s.max())
    np.testing.assert_allclose(out[1], (w / w.sum()) @ v[1], rtol=1e-5)


def test_rows_are_independent_of_batch(backend):
    rng = np.random.default_rng(2)
    a = rng.normal(size=(9, 16)).astype(np.float32)
    b = rng.normal(size=(16, 8)).astype(np.float32)
    full = kernels.matmul(a, b)
    for i in range(9):
        assert kernels.matmul(a[i : i + 1], b).tobytes() == full[i : i + 1].tobytes()
    np.testing.assert_array_equal(kernels.gelu(a)[3], kernels.gelu(a[3:4])[0])


def test_backends_agree():
    if kernels._compiled is None:
        pytest.skip("compiled kernels not built")
    rng = np.random.default_rng(3)
    x = rng.normal(size=(50, 8)).astype(np.float32)
    book = rng.normal(size=(16, 8)).astype(np.float32)
    results = {}
    for name in ("compiled", "numpy"):
        prev = kernels.use_backend(name)
        results[name] = (kernels.rvq_assign(x, book), kernels.sqnorm_rows(x), kernels.gelu(x),
                         kernels.levenshtein([1, 2, 3, 4], [2, 3, 5]))
        kernels.use_backend(prev)
    c, n = results["compiled"], results["numpy"]
    np.testing.assert_array_equal(c[0][0], n[0][0])
    np.testing.assert_allclose(c[0][1], n[0][1], atol=1e-6)
    np.testing.assert_allclose(c[1], n[1], rtol=1e-6)
    np.testing.assert_allclose(c[2], n[2], atol=1e-6)
    assert c[3] == n[3] == 2


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")
