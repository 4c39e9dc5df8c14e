"""Shared multi-scale encoder: patchify algebra, scale handling, sharing."""

from __future__ import annotations

import numpy as np
import pytest

from markvlm.encoder import (
    EncoderConfig,
    EncoderConfigError,
    downsample,
    encode,
    init_params,
    pad_to_square,
    patchify,
)
from markvlm.tensor import (
    ShapeError,
    backward,
    finite_diff_check,
    matmul,
    parameter,
    reshape,
    tensor,
)

SMALL = EncoderConfig(conv_channels=(2, 2, 2), patch_size=2, embed_dim=2, token_grid=1, scales=(1, 2))


def _params(cfg: EncoderConfig, seed: int = 0):
    rng = np.random.default_rng(seed)
    return {name: parameter(arr, name=name) for name, arr in init_params(cfg, rng).items()}


def _tokens_sum(feats, rng):
    t = feats.tokens
    direction = tensor(rng.normal(size=(t.size, 1)))
    return reshape(matmul(reshape(t, (1, t.size)), direction), ())


# ---------------------------------------------------------------------------
# downsample


def test_downsample_identity():
    img = np.random.default_rng(0).uniform(size=(6, 6, 3))
    np.testing.assert_array_equal(downsample(img, 1), img)


def test_downsample_constant_stays_constant():
    img = np.full((8, 8, 3), 0.3)
    np.testing.assert_allclose(downsample(img, 4), np.full((2, 2, 3), 0.3))


def test_downsample_mean_example():
    img = np.zeros((2, 2, 3))
    img[1, :, :] = 1.0
    np.testing.assert_array_equal(downsample(img, 2), np.full((1, 1, 3), 0.5))


def test_downsample_rejects_bad_factor():
    with pytest.raises(ShapeError):
        downsample(np.zeros((4, 4, 3)), 0)


# ---------------------------------------------------------------------------
# patchify


@pytest.mark.parametrize("h,w,c,k", [(4, 4, 3, 2), (6, 4, 2, 2), (8, 8, 3, 4), (3, 6, 1, 3)])
def test_patchify_matches_slicing_oracle(h, w, c, k):
    rng = np.random.default_rng(h * 100 + w)
    x = rng.normal(size=(h, w, c))
    got = patchify(tensor(x), k).data
    rows = []
    for i in range(h // k):
        for j in range(w // k):
            rows.append(x[i * k : (i + 1) * k, j * k : (j + 1) * k, :].reshape(-1))
    np.testing.assert_array_equal(got, np.stack(rows))


def test_patchify_rejects_indivisible():
    with pytest.raises(EncoderConfigError):
        patchify(tensor(np.zeros((5, 4, 3))), 2)


def test_pad_to_square():
    img = np.ones((2, 3, 3))
    out = pad_to_square(img, 4)
    assert out.shape == (4, 4, 3)
    np.testing.assert_array_equal(out[:2, :3], img)
    assert out[2:].sum() == 0 and out[:, 3:].sum() == 0
    with pytest.raises(EncoderConfigError):
        pad_to_square(np.ones((5, 2, 3)), 4)


# ---------------------------------------------------------------------------
# config


def test_config_validation():
    with pytest.raises(EncoderConfigError, match="embed_dim"):
        EncoderConfig(conv_channels=(2, 2, 3), embed_dim=2)
    with pytest.raises(EncoderConfigError):
        EncoderConfig(scales=())
    with pytest.raises(EncoderConfigError, match="duplicate"):
        EncoderConfig(scales=(1, 1))
    with pytest.raises(EncoderConfigError):
        EncoderConfig(token_grid=0)


def test_total_dim_counts_both_encoders_and_scales():
    assert SMALL.total_dim == 2 * 2 * 2
    assert EncoderConfig().total_dim == 2 * 16 * 2


# ---------------------------------------------------------------------------
# encode


def test_encode_output_shape_contract():
    params = _params(SMALL)
    img = np.random.default_rng(1).uniform(size=(8, 8, 3))
    feats = encode(img, params, SMALL)
    assert feats.tokens.shape == (SMALL.token_grid**2, SMALL.total_dim)


def test_encode_rejects_non_rgb():
    with pytest.raises(EncoderConfigError):
        encode(np.zeros((8, 8)), _params(SMALL), SMALL)


def test_identical_arrays_encode_identically():
    params = _params(SMALL)
    rng = np.random.default_rng(2)
    img = rng.uniform(size=(8, 8, 3))
    as_image = encode(img, params, SMALL)
    as_prompt = encode(img.copy(), params, SMALL)
    np.testing.assert_array_equal(as_image.tokens.data, as_prompt.tokens.data)


def test_zero_input_zeroes_conv_blocks():
    params = _params(SMALL)
    feats = encode(np.zeros((8, 8, 3)), params, SMALL)
    e = SMALL.embed_dim
    # layout is scale-major, conv before patch: [conv@1, patch@1, conv@2, patch@2]
    conv_cols = np.r_[0:e, 2 * e : 3 * e]
    assert np.abs(feats.tokens.data[:, conv_cols]).max() == 0.0


def test_permuting_scales_permutes_blocks():
    params = _params(SMALL)
    img = np.random.default_rng(3).uniform(size=(8, 8, 3))
    fwd = encode(img, params, SMALL).tokens.data
    rev_cfg = EncoderConfig(
        conv_channels=(2, 2, 2), patch_size=2, embed_dim=2, token_grid=1, scales=(2, 1)
    )
    rev = encode(img, params, rev_cfg).tokens.data
    half = 2 * SMALL.embed_dim
    np.testing.assert_array_equal(rev[:, :half], fwd[:, half:])
    np.testing.assert_array_equal(rev[:, half:], fwd[:, :half])


def test_encode_padding_keeps_token_count():
    params = _params(SMALL)
    feats = encode(np.random.default_rng(4).uniform(size=(5, 3, 3)), params, SMALL)
    assert feats.tokens.shape == (1, SMALL.total_dim)


def test_encode_is_differentiable_end_to_end():
    params = _params(SMALL, seed=7)
    img = np.random.default_rng(8).uniform(size=(8, 8, 3))
    rng = np.random.default_rng(9)
    direction = rng.normal(size=(SMALL.token_grid**2 * SMALL.total_dim, 1))

    def readout():
        t = encode(img, params, SMALL).tokens
        return reshape(matmul(reshape(t, (1, t.size)), tensor(direction)), ())

    # the key bias cancels inside softmax (uniform per-row score shift), so
    # its gradient is exactly zero and the relative quotient is meaningless
    swept = [t for name, t in params.items() if name != "patch.attn.bk"]
    err = finite_diff_check(readout, swept, eps=1e-5)
    assert err <= 1e-4, f"relative error {err:.3e}"

    for t in params.values():
        t.grad = None
    backward(readout())
    assert np.abs(params["patch.attn.bk"].grad).max() <= 1e-12
