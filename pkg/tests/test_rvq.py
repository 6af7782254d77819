import numpy as np
import pytest

from songlm import rvq
from songlm.rvq import Codebook, RvqCodec, RvqError, TokenStreams


@pytest.fixture(scope="module")
def books():
    rng = np.random.default_rng(0)
    train = rng.normal(size=(3000, 8)).astype(np.float32)
    return rvq.fit_codebooks(train, stages=3, k=32, iters=3, seed=0)


def test_zero_codeword_is_pinned(books):
    for b in books:
        assert np.all(b.entries[0] == 0)
    with pytest.raises(RvqError):
        Codebook(0, np.ones((4, 2)))


def test_residual_norms_never_increase(books):
    frames = np.random.default_rng(1).normal(scale=3.0, size=(10_000, 8)).astype(np.float32)
    norms = rvq.residual_sqnorms(frames, books)
    assert np.all(np.diff(norms, axis=0) <= 0)


def test_reconstruction_identity(books):
    frames = np.random.default_rng(2).normal(size=(10_000, 8)).astype(np.float32)
    idx, residual = rvq.encode(frames, books, return_residual=True)
    recon = rvq.decode(idx, books).astype(np.float64) + residual.astype(np.float64)
    # float32 subtraction per stage rounds, so the identity holds to a few ulps
    np.testing.assert_allclose(recon, frames, rtol=0, atol=1e-5)


def test_decode_rejects_bad_indices(books):
    with pytest.raises(RvqError):
        rvq.decode(np.array([[40]]), books)
    with pytest.raises(RvqError):
        rvq.decode(np.zeros((5, 3), np.int64), books)
    with pytest.raises(RvqError):
        rvq.encode(np.zeros((3, 5), np.float32), books)


def test_fit_needs_k_samples():
    with pytest.raises(RvqError):
        rvq.fit_codebooks(np.zeros((3, 2), np.float32), 1, 8)


def test_codec_roundtrip_and_streams(tiny_corpus, tmp_path):
    _, songs, codec, _ = tiny_corpus
    codec.save(tmp_path / "c.ckpt")
    again = RvqCodec.load(tmp_path / "c.ckpt")
    st = codec.token_streams(songs[0].tracks)
    assert st.dual and len(st) == songs[0].tracks.frames
    np.testing.assert_array_equal(again.token_streams(songs[0].tracks).vocal, st.vocal)
    vocal, accomp, mixed = codec.decode_streams(st)
    assert vocal.shape == songs[0].tracks.vocal.shape


def test_token_streams_validation():
    with pytest.raises(RvqError):
        TokenStreams([1, 2], [1], [1, 2])
    with pytest.raises(RvqError):
        TokenStreams([1, 70], k_m=64).validate()
