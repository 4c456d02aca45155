import numpy as np
import pytest

from vino import maskops
from vino.maskops import CropGeometry
from vino.videodata import InstanceMask, SpriteSpec, SyntheticSceneConfig, Tube, generate_synthetic_video, sample_tube
from vino.viewgen import (
    NORM_MEAN,
    PhotometricConfig,
    ViewConfig,
    build_local_views,
    build_student_masked_views,
    build_teacher_view,
    build_tube_views,
    dump_views,
    make_precrop,
    normalize,
    photometric_augment,
)

FILL = np.asarray(NORM_MEAN, np.float32)


def plain_config(**kw) -> ViewConfig:
    """No photometric changes, so views are pure crops."""
    cfg = ViewConfig(photometric=PhotometricConfig(jitter_prob=0.0, blur_prob=0.0, solarize_prob=0.0), **kw)
    return cfg


def full_frame_config(**kw):
    # pre-crop and global crop both cover the whole frame
    return plain_config(precrop_min_fraction=1.0, global_scale=(1.0, 1.0), **kw)


def tube_of(video, T=4, stride=10, start=0):
    return sample_tube(video, T, stride, start=start, min_area=1)


def masks_at(grids, track_ids=None):
    track_ids = track_ids or range(len(grids))
    return [InstanceMask(grid=g, track_id=i) for g, i in zip(grids, track_ids)]


class TestPrecrop:
    def test_no_masks(self):
        assert make_precrop([[], []], (40, 50)) == CropGeometry.identity(40, 50)

    def test_static_sprite(self):
        g = np.zeros((64, 64), bool)
        g[5:12, 40:50] = True
        pc = make_precrop([masks_at([g])] * 3, (64, 64))
        assert pc.x <= 40 and pc.y <= 5 and pc.x + pc.w >= 50 and pc.y + pc.h >= 12
        assert pc.w * pc.h >= 0.5 * 64 * 64

    def test_moving_sprite_contains_endpoints(self):
        cfg = SyntheticSceneConfig(num_frames=4, sprites=[SpriteSpec(2, 20, 8, vx=10.0)])
        v = generate_synthetic_video(cfg)
        pc = make_precrop(v.annotations, (64, 64))
        for masks in (v.annotations[0], v.annotations[3]):
            x, y, w, h = maskops.bbox_of_mask(masks[0].grid)
            assert pc.x <= x and pc.y <= y and x + w <= pc.x + pc.w and y + h <= pc.y + pc.h

    @pytest.mark.parametrize("seed", range(10))
    def test_bounds_and_area(self, seed):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=31, seed=seed))
        pc = make_precrop(tube_of(v).annotations, (64, 64))
        pc.validate(64, 64)
        assert pc.w * pc.h >= 0.5 * 64 * 64


class TestPhotometric:
    def test_identity_is_resize_only(self, rng):
        img = rng.random((8, 6, 3)).astype(np.float32)
        cfg = PhotometricConfig(jitter_prob=1.0, brightness=0, contrast=0, saturation=0, blur_prob=0, solarize_prob=0)
        out = photometric_augment(img, cfg, rng, (16, 12))
        np.testing.assert_allclose(out, maskops.resize_nearest(img, 16, 12), atol=1e-6)

    def test_solarize_threshold_zero_inverts(self, rng):
        img = rng.random((4, 4, 3)).astype(np.float32)
        cfg = PhotometricConfig(jitter_prob=0, blur_prob=0, solarize_prob=1.0, solarize_threshold=0.0)
        np.testing.assert_allclose(photometric_augment(img, cfg, rng), 1.0 - img, atol=1e-7)

    def test_fixed_seed(self, rng):
        img = rng.random((16, 16, 3)).astype(np.float32)
        cfg = PhotometricConfig(jitter_prob=1.0, blur_prob=1.0, solarize_prob=0.5, seed=42)
        a, b = photometric_augment(img, cfg), photometric_augment(img, cfg)
        assert a.tobytes() == b.tobytes()

    def test_bad_probability(self):
        with pytest.raises(ValueError, match="blur_prob"):
            PhotometricConfig(blur_prob=1.5).validate()


class TestFrameViews:
    def setup_method(self):
        self.pixels = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
        self.geom = CropGeometry.identity(16, 16)
        self.cfg = plain_config()
        a = np.zeros((16, 16), bool)
        a[2:6, 2:6] = True
        b = np.zeros((16, 16), bool)
        b[10:14, 8:15] = True
        self.a, self.b = a, b

    def test_teacher_all_ones(self, rng):
        v = build_teacher_view(self.pixels, self.geom, [np.ones((16, 16), bool)], self.cfg, rng)
        np.testing.assert_array_equal(v, self.pixels)

    def test_teacher_no_foreground(self, rng):
        assert build_teacher_view(self.pixels, self.geom, [], self.cfg, rng) is None
        assert build_teacher_view(self.pixels, self.geom, [np.zeros((16, 16), bool)], self.cfg, rng) is None

    def test_teacher_half(self, rng):
        half = np.zeros((16, 16), bool)
        half[:, :8] = True
        v = build_teacher_view(self.pixels, self.geom, [half], self.cfg, rng)
        assert np.all(v[:, 8:] == FILL)
        np.testing.assert_array_equal(v[:, :8], self.pixels[:, :8])

    def test_student_single_object(self, rng):
        (k, v), = build_student_masked_views(self.pixels, self.geom, [self.a], self.cfg, rng)
        assert k == 0
        np.testing.assert_array_equal(v, self.pixels)

    def test_student_two_objects(self, rng):
        views = build_student_masked_views(self.pixels, self.geom, [self.a, self.b], self.cfg, rng)
        assert [k for k, _ in views] == [0, 1]
        v0 = views[0][1]
        assert np.all(v0[self.b] == FILL)
        np.testing.assert_array_equal(v0[~self.b], self.pixels[~self.b])

    def test_student_none(self, rng):
        assert build_student_masked_views(self.pixels, self.geom, [], self.cfg, rng) == []

    def test_local_zero(self, rng):
        assert build_local_views(self.pixels, self.geom, [self.a], 0, self.cfg, rng) == []

    def test_local_single_object(self, rng):
        views = build_local_views(self.pixels, self.geom, [self.a], 2, self.cfg, rng)
        px, py, pw, ph = maskops.pad_bbox(maskops.bbox_of_mask(self.a), 0.1, (16, 16))
        for lv in views:
            g = lv.geom
            assert px <= g.x and py <= g.y and g.x + g.w <= px + pw and g.y + g.h <= py + ph
            assert lv.image.shape == (32, 32, 3)

    def test_local_three_objects(self, rng):
        c = np.zeros((16, 16), bool)
        c[0, 12:16] = True  # thin sliver
        masks = [self.a, self.b, c]
        union = maskops.union_mask(masks)
        for _ in range(30):
            for lv in build_local_views(self.pixels, self.geom, masks, 4, self.cfg, rng):
                assert maskops.overlap_ratio(lv.geom, union) >= 0.3 or lv.fallback

    def test_local_whole_image_fallback(self, rng):
        views = build_local_views(self.pixels, self.geom, [], 3, self.cfg, rng)
        assert len(views) == 3 and all(v.whole_image for v in views)


class TestTubeViews:
    def test_counts(self, two_sprite_video, rng):
        vb = build_tube_views(tube_of(two_sprite_video), full_frame_config(), rng)
        assert len(vb.teacher_views) == 4
        assert len(vb.student_masked_views) == 8
        assert len(set(vb.track_ids.values())) == 2
        assert len(vb.local_views) == 16
        assert vb.fallback_views == {}

    @pytest.mark.parametrize("seed", range(6))
    def test_count_contract(self, seed):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=31, num_sprites=3, seed=seed))
        vb = build_tube_views(tube_of(v), ViewConfig(), np.random.default_rng(seed))
        K = [len(vb.warped_masks[t]) for t in range(4)]
        assert len(vb.student_masked_views) == sum(K)
        assert set(vb.teacher_views) == {t for t in range(4) if K[t] > 0}
        assert set(vb.fallback_views) == {t for t in range(4) if K[t] == 0}
        for t, k, _ in vb.student_masked_views:
            assert (t, k) in vb.track_ids

    def test_no_masks(self, rng):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=31, num_sprites=0))
        vb = build_tube_views(tube_of(v), ViewConfig(), rng)
        assert vb.teacher_views == {} and vb.student_masked_views == []
        assert all(lv.whole_image for lv in vb.local_views)
        assert len(vb.local_views) == 16

    def test_same_seed_identical(self, two_sprite_video):
        tube = tube_of(two_sprite_video)
        a = build_tube_views(tube, ViewConfig(), np.random.default_rng(3))
        b = build_tube_views(tube, ViewConfig(), np.random.default_rng(3))
        assert a.geometry == b.geometry and a.seeds == b.seeds
        for t in a.teacher_views:
            assert a.teacher_views[t].tobytes() == b.teacher_views[t].tobytes()
        for (t, k, x), (_, _, y) in zip(a.student_masked_views, b.student_masked_views):
            assert x.tobytes() == y.tobytes()
        for x, y in zip(a.local_views, b.local_views):
            assert x.image.tobytes() == y.image.tobytes() and x.geom == y.geom

    @pytest.mark.parametrize("seed", range(5))
    def test_geometry_sharing_and_suppression(self, seed):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=31, num_sprites=3, seed=seed))
        tube = tube_of(v)
        vb = build_tube_views(tube, plain_config(), np.random.default_rng(seed))
        g = vb.geometry
        for t, frame in enumerate(tube.frames):
            expected = maskops.warp_image(frame.pixels, g)
            masks = vb.warped_masks[t]
            if not masks:
                continue
            union = maskops.union_mask(masks)
            tv = vb.teacher_views[t]
            np.testing.assert_array_equal(tv[union], expected[union])
            assert np.all(tv[~union] == FILL)
            for tt, k, sv in vb.student_masked_views:
                if tt != t:
                    continue
                keep = maskops.object_conditioned_mask(union, masks[k])
                np.testing.assert_array_equal(sv[keep], expected[keep])
                assert np.all(sv[~keep] == FILL)

    def test_fill_is_zero_after_normalize(self):
        np.testing.assert_allclose(normalize(np.broadcast_to(FILL, (2, 2, 3))), 0.0)

    def test_dump(self, tmp_path, two_sprite_video, rng):
        vb = build_tube_views(tube_of(two_sprite_video), full_frame_config(), rng)
        n = dump_views(vb, tmp_path)
        lines = (tmp_path / "manifest.txt").read_text().splitlines()
        assert n == len(lines) == 4 + 8 + 16
        assert len(list(tmp_path.glob("*.png"))) == n
        fam = lines[0].split()
        assert fam[1] == "teacher" and len(fam) == 6
