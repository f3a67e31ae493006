import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifom.errors import InvalidInputError, InvalidSpecError
from ifom.transforms import (
    FoldSpec,
    ImageSample,
    MixSpec,
    fold,
    fold_face,
    fold_fingerprint,
    mix,
    resize_bilinear,
    sample_fold_spec,
)

from oracles import ref_fold_face, ref_fold_fingerprint, ref_resize


def face(px, **kw):
    return ImageSample(px, "face", **kw)


def finger(px, **kw):
    return ImageSample(px, "fingerprint", **kw)


# --- ImageSample --------------------------------------------------------------

def test_image_sample_rejects_out_of_range():
    with pytest.raises(InvalidInputError):
        face(np.full((1, 8, 8), 1.5))


def test_image_sample_rejects_small():
    with pytest.raises(InvalidInputError):
        face(np.zeros((1, 7, 8)))


def test_image_sample_converts_uint8():
    s = finger(np.full((1, 8, 8), 255, dtype=np.uint8))
    assert s.pixels.dtype == np.float64
    assert np.all(s.pixels == 1.0)


def test_image_sample_is_immutable():
    s = face(np.zeros((1, 8, 8)))
    with pytest.raises(ValueError):
        s.pixels[0, 0, 0] = 1.0


# --- sample_fold_spec ------------------------------------------------------------

def test_sample_fold_spec_deterministic():
    a = sample_fold_spec(np.random.default_rng(7), "face")
    b = sample_fold_spec(np.random.default_rng(7), "face")
    assert a == b
    assert a.cut_h is None and len(a.flips) == 2


def test_sample_fold_spec_fingerprint_structure():
    s = sample_fold_spec(np.random.default_rng(3), "fingerprint")
    assert len(s.flips) == 4
    assert s.cut_h is not None


def test_sample_fold_spec_uniform_mean():
    rng = np.random.default_rng(0)
    draws = [sample_fold_spec(rng, "fingerprint") for _ in range(10_000)]
    cut_v = np.array([d.cut_v for d in draws])
    cut_h = np.array([d.cut_h for d in draws])
    assert abs(cut_v.mean() - 0.5) < 0.01
    assert abs(cut_h.mean() - 0.5) < 0.01
    assert cut_v.min() >= 0.25 and cut_v.max() <= 0.75
    flips = np.array([d.flips for d in draws], dtype=float)
    assert np.all(np.abs(flips.mean(axis=0) - 0.5) < 0.02)


def test_fold_spec_validation():
    with pytest.raises(InvalidSpecError):
        FoldSpec("face", 0.5, 0.5, (False, False))
    with pytest.raises(InvalidSpecError):
        FoldSpec("fingerprint", 0.5, None, (False,) * 4)
    with pytest.raises(InvalidSpecError):
        FoldSpec("face", 0.5, None, (False,) * 3)
    with pytest.raises(InvalidSpecError):
        FoldSpec("face", 1.0, None, (False, False))


# --- resize -----------------------------------------------------------------

@pytest.mark.parametrize("shape,size", [((1, 4, 2), (4, 4)), ((3, 5, 3), (8, 9)), ((1, 1, 3), (4, 4))])
def test_resize_matches_reference(shape, size):
    patch = np.random.default_rng(1).random(shape)
    np.testing.assert_allclose(resize_bilinear(patch, size), ref_resize(patch, *size), atol=1e-12)


def test_resize_preserves_corners():
    patch = np.random.default_rng(2).random((1, 3, 5))
    out = resize_bilinear(patch, (9, 11))
    for (i, j), (si, sj) in {(0, 0): (0, 0), (0, -1): (0, -1), (-1, 0): (-1, 0), (-1, -1): (-1, -1)}.items():
        assert out[0, i, j] == pytest.approx(patch[0, si, sj], abs=1e-15)


# --- fold_face ---------------------------------------------------------------

def test_fold_face_symmetric_image_gives_resized_left_half():
    rng = np.random.default_rng(0)
    half = rng.random((1, 8, 4))
    img = np.concatenate([half, half[:, :, ::-1]], axis=2)
    out = fold_face(face(img), FoldSpec("face", 0.5, None, (False, True)))
    np.testing.assert_allclose(out.pixels, resize_bilinear(half, (8, 8)), atol=1e-6)


@pytest.mark.parametrize("c", [0.0, 0.37, 1.0])
def test_fold_constant_image(c):
    spec_f = FoldSpec("face", 0.41, None, (True, False))
    spec_p = FoldSpec("fingerprint", 0.3, 0.66, (True, False, True, True))
    assert np.allclose(fold_face(face(np.full((3, 10, 12), c)), spec_f).pixels, c, atol=1e-12)
    assert np.allclose(fold_fingerprint(finger(np.full((1, 10, 12), c)), spec_p).pixels, c, atol=1e-12)


def test_fold_face_ramp_matches_reference_resampler():
    img = (np.arange(16, dtype=float).reshape(1, 4, 4) / 15.0)
    # 4x4 is below the ImageSample minimum, so exercise the array path directly
    from ifom.transforms import fold_face_array

    out = fold_face_array(img, FoldSpec("face", 0.5, None, (False, False)))
    np.testing.assert_allclose(out, ref_fold_face(img, 0.5, (False, False)), atol=1e-12)
    # frozen from the reference: mean of the two stretched halves
    expected_row0 = np.array([1.0, 4 / 3, 5 / 3, 2.0]) / 15.0
    np.testing.assert_allclose(out[0, 0], expected_row0, atol=1e-12)


def test_fold_face_copies_label_and_meta():
    s = face(np.random.default_rng(0).random((1, 8, 8)), label="attack", meta={"sensor": "x"})
    out = fold_face(s, FoldSpec("face", 0.5, None, (True, True)))
    assert out.label == "attack" and dict(out.meta) == {"sensor": "x"}
    assert out.shape == s.shape


def test_fold_modality_mismatch():
    with pytest.raises(InvalidInputError):
        fold_face(finger(np.zeros((1, 8, 8))), FoldSpec("face", 0.5, None, (False, False)))
    with pytest.raises(InvalidInputError):
        fold_face(face(np.zeros((1, 8, 8))), FoldSpec("fingerprint", 0.5, 0.5, (False,) * 4))
    with pytest.raises(InvalidInputError):
        fold_fingerprint(face(np.zeros((1, 8, 8))), FoldSpec("fingerprint", 0.5, 0.5, (False,) * 4))


def test_fold_zero_width_patch():
    from ifom.transforms import fold_face_array

    with pytest.raises(InvalidSpecError):
        fold_face_array(np.zeros((1, 8, 8)), FoldSpec("face", 0.01, None, (False, False)))


# --- fold_fingerprint --------------------------------------------------------

def test_fold_fingerprint_doubly_symmetric():
    q = np.random.default_rng(5).random((1, 4, 4))
    top = np.concatenate([q, q[:, :, ::-1]], axis=2)
    img = np.concatenate([top, top[:, ::-1, :]], axis=1)
    out = fold_fingerprint(finger(img), FoldSpec("fingerprint", 0.5, 0.5, (True,) * 4))
    np.testing.assert_allclose(out.pixels, resize_bilinear(q, (8, 8)), atol=1e-6)


def test_fold_fingerprint_checkerboard_matches_reference():
    img = ((np.indices((8, 8)).sum(axis=0) % 2).astype(float))[None]
    out = fold_fingerprint(finger(img), FoldSpec("fingerprint", 0.5, 0.5, (False,) * 4))
    np.testing.assert_allclose(out.pixels, ref_fold_fingerprint(img, 0.5, 0.5, (False,) * 4), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(
    seed=st.integers(0, 2**31 - 1),
    h=st.integers(8, 20),
    w=st.integers(8, 20),
    c=st.sampled_from([1, 3]),
)
def test_fold_fingerprint_matches_reference_random(seed, h, w, c):
    rng = np.random.default_rng(seed)
    img = rng.random((c, h, w))
    spec = sample_fold_spec(rng, "fingerprint")
    out = fold_fingerprint(finger(img), spec)
    np.testing.assert_allclose(out.pixels, ref_fold_fingerprint(img, spec.cut_v, spec.cut_h, spec.flips), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(8, 20), w=st.integers(8, 20))
def test_fold_face_matches_reference_random(seed, h, w):
    rng = np.random.default_rng(seed)
    img = rng.random((3, h, w))
    spec = sample_fold_spec(rng, "face")
    out = fold_face(face(img), spec)
    np.testing.assert_allclose(out.pixels, ref_fold_face(img, spec.cut_v, spec.flips), atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), modality=st.sampled_from(["face", "fingerprint"]))
def test_fold_shape_range_purity(seed, modality):
    rng = np.random.default_rng(seed)
    img = ImageSample(rng.random((1, 16, 12)), modality)
    spec = sample_fold_spec(rng, modality)
    a, b = fold(img, spec), fold(img, spec)
    assert a.shape == img.shape
    assert a.pixels.min() >= 0.0 and a.pixels.max() <= 1.0
    assert np.array_equal(a.pixels, b.pixels)


# --- mix --------------------------------------------------------------------

def test_mix_endpoints_and_self():
    rng = np.random.default_rng(0)
    xi = face(rng.random((3, 8, 8)), meta={"dataset": "O"})
    xj = face(rng.random((3, 8, 8)), meta={"dataset": "C"})
    assert np.array_equal(mix(xi, xj, MixSpec(1.0)).pixels, xi.pixels)
    assert np.array_equal(mix(xi, xj, MixSpec(0.0)).pixels, xj.pixels)
    assert np.array_equal(mix(xi, xi, MixSpec(0.3)).pixels, xi.pixels)


def test_mix_label_and_meta():
    rng = np.random.default_rng(0)
    xi = face(rng.random((1, 8, 8)), label="attack", meta={"dataset": "O"})
    xj = face(rng.random((1, 8, 8)), label="bona_fide", meta={"dataset": "C"})
    m = mix(xi, xj, MixSpec(0.5))
    assert m.label == "unlabeled"
    assert dict(m.meta) == {"i.dataset": "O", "j.dataset": "C"}


def test_mix_shape_mismatch():
    with pytest.raises(InvalidInputError):
        mix(face(np.zeros((1, 8, 8))), face(np.zeros((1, 8, 9))), MixSpec(0.5))
    with pytest.raises(InvalidInputError):
        mix(face(np.zeros((1, 8, 8))), finger(np.zeros((1, 8, 8))), MixSpec(0.5))


def test_mix_spec_range():
    with pytest.raises(InvalidSpecError):
        MixSpec(1.2)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), eps=st.floats(0.0, 1.0))
def test_mix_symmetry_and_convexity(seed, eps):
    rng = np.random.default_rng(seed)
    xi = finger(rng.random((1, 8, 8)))
    xj = finger(rng.random((1, 8, 8)))
    m = mix(xi, xj, MixSpec(eps))
    np.testing.assert_allclose(m.pixels, mix(xj, xi, MixSpec(1 - eps)).pixels, atol=1e-12)
    np.testing.assert_allclose(m.pixels, eps * xi.pixels + (1 - eps) * xj.pixels, atol=1e-12)
    assert np.all(m.pixels >= np.minimum(xi.pixels, xj.pixels))
    assert np.all(m.pixels <= np.maximum(xi.pixels, xj.pixels))
