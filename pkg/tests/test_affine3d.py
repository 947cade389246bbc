import numpy as np
import pytest

from shapesig.affine3d import (
    AffinePairError, AffineTransform, AugmentationSpec, apply_affine,
    augmentation_rng, compose, make_affine_pair, rotation_matrix,
    sample_random_affine,
)
from shapesig.volume_io import LabelMap, Volume


def ball(n, r, center=None):
    c = (n - 1) / 2 if center is None else center
    zz, yy, xx = np.indices((n, n, n))
    return LabelMap(((zz - c) ** 2 + (yy - c) ** 2 + (xx - c) ** 2 <= r * r).astype(np.uint8))


def test_degenerate_spec_gives_identity():
    t = sample_random_affine(AugmentationSpec.degenerate(), np.random.default_rng(0), (8, 8, 8))
    assert t.is_identity()


def test_sampled_parameters_within_bounds():
    spec = AugmentationSpec()
    rng = np.random.default_rng(1)
    dims = (48, 40, 32)
    for _ in range(1000):
        s, angle, trans = sample_random_affine(spec, rng, dims).decompose()
        assert 0.85 - 1e-12 <= s <= 1.15 + 1e-12
        assert angle <= 8.0 + 1e-6
        assert (np.abs(trans) <= 0.1 * np.asarray(dims) + 1e-9).all()


def test_sampling_is_seed_deterministic():
    spec = AugmentationSpec(seed=3)
    a = sample_random_affine(spec, augmentation_rng(3, 17), (16, 16, 16))
    b = sample_random_affine(spec, augmentation_rng(3, 17), (16, 16, 16))
    assert np.array_equal(a.m, b.m)
    c = sample_random_affine(spec, augmentation_rng(3, 18), (16, 16, 16))
    assert not np.array_equal(a.m, c.m)


def test_spec_validation():
    with pytest.raises(ValueError):
        AugmentationSpec(max_rotation_deg=90)
    with pytest.raises(ValueError):
        AugmentationSpec(scale_range=(1.2, 1.1))
    with pytest.raises(ValueError):
        AugmentationSpec(max_translation_frac=0.5)


def test_identity_resampling_is_exact():
    rng = np.random.default_rng(2)
    vol = Volume(rng.standard_normal((5, 6, 7)))
    lab = LabelMap((rng.random((5, 6, 7)) > 0.5).astype(np.uint8))
    ident = AffineTransform.identity()
    assert apply_affine(vol, ident) == vol
    assert apply_affine(vol, ident, "nearest") == vol
    assert apply_affine(lab, ident) == lab


def test_integer_translation_nearest_is_index_shift():
    rng = np.random.default_rng(3)
    lab = LabelMap((rng.random((6, 6, 6)) > 0.5).astype(np.uint8))
    out = apply_affine(lab, AffineTransform.translation((0, 0, 1)), "nearest")
    # out(p) = in(p + e_x): contents move one voxel toward -x, last face zero-filled
    expected = np.zeros_like(lab.data)
    expected[:, :, :-1] = lab.data[:, :, 1:]
    np.testing.assert_array_equal(out.data, expected)


def test_integer_translation_trilinear_is_exact_shift():
    rng = np.random.default_rng(4)
    vol = Volume(rng.standard_normal((5, 5, 5)))
    out = apply_affine(vol, AffineTransform.translation((1, 0, 0)))
    np.testing.assert_allclose(out.data[:-1], vol.data[1:], atol=1e-6)
    assert (out.data[-1] == 0).all()


def _trilinear_oracle(data, t):
    """Loop over output voxels; a sample outside the input extent is 0."""
    n = np.array(data.shape)
    c = (n - 1) / 2
    out = np.zeros(data.shape)
    padded = np.pad(data, ((0, 1),) * 3)

    def at(idx):
        return padded[tuple(idx)]

    for p in np.ndindex(*data.shape):
        q = t.m[:3, :3] @ (np.array(p) - c) + t.m[:3, 3] + c
        if (q < 0).any() or (q > n - 1).any():
            continue
        base = np.floor(q).astype(int)
        frac = q - base
        acc = 0.0
        for corner in np.ndindex(2, 2, 2):
            w = np.prod([f if b else 1 - f for f, b in zip(frac, corner)])
            acc += w * at(base + np.array(corner))
        out[p] = acc
    return out


def test_trilinear_matches_loop_oracle():
    rng = np.random.default_rng(12)
    vol = Volume(rng.standard_normal((6, 7, 5)))
    spec = AugmentationSpec(20.0, (0.8, 1.2), 0.2)
    for i in range(3):
        t = sample_random_affine(spec, augmentation_rng(3, i), vol.dims)
        got = apply_affine(vol, t).data
        np.testing.assert_allclose(got, _trilinear_oracle(vol.data.astype(np.float64), t),
                                   atol=1e-5)


def test_scale_two_shrinks_ball_eightfold():
    n, r = 48, 12
    src = ball(n, r)
    out = apply_affine(src, AffineTransform.scaling(2.0))
    # brute-force oracle: rasterize the analytically scaled ball (radius r / 2)
    reference = ball(n, r / 2.0)
    ratio = out.count / src.count
    assert abs(ratio - 1 / 8) <= 0.15 / 8
    assert abs(out.count - reference.count) <= 0.15 * reference.count


def test_labels_stay_binary_and_need_nearest():
    lab = ball(16, 5)
    spec = AugmentationSpec()
    rng = np.random.default_rng(5)
    for _ in range(5):
        out = apply_affine(lab, sample_random_affine(spec, rng, lab.dims))
        assert set(np.unique(out.data)) <= {0, 1}
    with pytest.raises(ValueError, match="nearest"):
        apply_affine(lab, AffineTransform.identity(), "trilinear")


def test_singular_transform_rejected():
    m = np.eye(4)
    m[2, 2] = 0
    with pytest.raises(ValueError, match="singular"):
        AffineTransform(m)
    m = np.eye(4)
    m[3, 0] = 1
    with pytest.raises(ValueError, match="last row"):
        AffineTransform(m)


def test_rotation_preserves_count():
    lab = ball(32, 7)
    lab.data[16:20, 14:18, 10:22] = 1  # break symmetry
    for axis in [(1, 0, 0), (0, 1, 1), (1, 2, 3)]:
        for deg in (5, 8, 30):
            out = apply_affine(lab, AffineTransform.rotation(axis, np.radians(deg)))
            assert abs(out.count - lab.count) <= 0.10 * lab.count


def test_compose_identity_and_inverse():
    t = sample_random_affine(AugmentationSpec(), np.random.default_rng(6), (20, 20, 20))
    assert np.array_equal(compose(t, AffineTransform.identity()).m, t.m)
    np.testing.assert_allclose(compose(t, t.inverse()).m, np.eye(4), atol=1e-9)


def test_compose_integer_translations_exact():
    rng = np.random.default_rng(7)
    lab = LabelMap((rng.random((7, 7, 7)) > 0.6).astype(np.uint8))
    t1 = AffineTransform.translation((0, 0, 1))
    t2 = AffineTransform.translation((0, 1, 0))
    single = apply_affine(lab, compose(t1, t2))
    two_step = apply_affine(apply_affine(lab, t2), t1)
    assert single == two_step
    assert single == apply_affine(lab, AffineTransform.translation((0, 1, 1)))


def test_compose_order_matches_sequential_resampling():
    lab = ball(24, 6, center=10)
    t1 = AffineTransform.rotation((0, 0, 1), np.radians(30))
    t2 = AffineTransform.translation((2, 0, 0))
    composed = apply_affine(lab, compose(t1, t2))
    sequential = apply_affine(apply_affine(lab, t2), t1)
    inter = np.logical_and(composed.data, sequential.data).sum()
    assert 2 * inter / (composed.count + sequential.count) > 0.9


def test_affine_pair_identity_spec():
    lab = ball(16, 4)
    a, b = make_affine_pair(lab, AugmentationSpec.degenerate(), np.random.default_rng(8))
    assert a == lab and b == lab


def test_affine_pair_counts_within_volume_bounds():
    lab = ball(48, 10)
    rng = np.random.default_rng(9)
    for _ in range(5):
        a, b = make_affine_pair(lab, AugmentationSpec(), rng)
        for m in (a, b):
            assert not m.is_empty()
            # scale s maps output->input, so volume changes by 1/s^3
            lo = lab.count / 1.15 ** 3 * 0.85
            hi = lab.count / 0.85 ** 3 * 1.15
            assert lo <= m.count <= hi


def test_affine_pair_deterministic():
    lab = ball(16, 4)
    p1 = make_affine_pair(lab, AugmentationSpec(), augmentation_rng(1, 2))
    p2 = make_affine_pair(lab, AugmentationSpec(), augmentation_rng(1, 2))
    assert p1[0] == p2[0] and p1[1] == p2[1]


def test_affine_pair_failure_and_empty_input():
    corner = np.zeros((16, 16, 16), np.uint8)
    corner[0, 0, 0] = 1
    spec = AugmentationSpec(0.0, (1.0, 1.0), 0.4)
    rng = np.random.default_rng(10)
    with pytest.raises(AffinePairError):
        for _ in range(20):
            make_affine_pair(LabelMap(corner), spec, rng)
    with pytest.raises(ValueError, match="empty"):
        make_affine_pair(LabelMap(np.zeros((4, 4, 4), np.uint8)), spec, rng)


def test_rotation_matrix_orthonormal():
    r = rotation_matrix((1, 2, 3), 0.3)
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(r) - 1) < 1e-12
