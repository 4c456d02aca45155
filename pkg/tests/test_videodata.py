import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from vino.errors import AnnotationParseError, ConfigError, InsufficientFramesError
from vino.videodata import (
    ANNOTATION_FILENAME,
    MAGIC,
    InstanceMask,
    SpriteSpec,
    SyntheticSceneConfig,
    Video,
    decode_annotations,
    encode_annotations,
    filter_masks,
    generate_synthetic_video,
    load_annotations,
    read_video,
    rle_decode,
    rle_encode,
    sample_tube,
    save_annotations,
    sprite_shape_mask,
    valid_starts,
    write_video,
)


def blank_video(n, H=8, W=8):
    frames = [np.full((H, W, 3), i, dtype=np.uint8) for i in range(n)]
    return Video(frames=frames, annotations=[[] for _ in range(n)])


def mask_with_area(area, H=10, W=10, track_id=0, confidence=1.0):
    g = np.zeros(H * W, dtype=bool)
    g[:area] = True
    return InstanceMask(grid=g.reshape(H, W), track_id=track_id, confidence=confidence)


class TestSampleTube:
    def test_default_stride_indices(self, rng):
        tube = sample_tube(blank_video(60), 4, 10, rng)
        idx = [f.index for f in tube.frames]
        s = idx[0]
        assert idx == [s, s + 10, s + 20, s + 30]
        assert 0 <= s <= 29

    def test_single_frame_tube(self, rng):
        tube = sample_tube(blank_video(5), T=1, stride=7, rng=rng)
        assert len(tube) == 1

    def test_exactly_one_start(self, rng):
        assert list(valid_starts(31, 4, 10)) == [0]
        for _ in range(5):
            tube = sample_tube(blank_video(31), 4, 10, rng)
            assert [f.index for f in tube.frames] == [0, 10, 20, 30]

    def test_too_short(self, rng):
        with pytest.raises(InsufficientFramesError, match="insufficient frames"):
            sample_tube(blank_video(30), 4, 10, rng)

    @pytest.mark.parametrize("n,T,stride", [(31, 4, 10), (50, 3, 7), (10, 1, 3), (9, 9, 1)])
    def test_starts_uniform_over_valid_range(self, n, T, stride):
        rng = np.random.default_rng(1)
        starts = {sample_tube(blank_video(n), T, stride, rng).frames[0].index for _ in range(300)}
        assert starts == set(valid_starts(n, T, stride))

    def test_annotations_filtered_per_frame(self, rng):
        v = blank_video(3, 10, 10)
        v.annotations[1] = [mask_with_area(a, track_id=a) for a in range(1, 15)]
        tube = sample_tube(v, 3, 1, rng, min_area=0, max_objects=10)
        assert [len(a) for a in tube.annotations] == [0, 10, 0]
        assert len({f.shape for f in tube.frames}) == 1


class TestFilterMasks:
    def test_keeps_largest(self):
        masks = [mask_with_area(a + 1, track_id=a) for a in range(12)]
        kept = filter_masks(masks, min_area=0, max_objects=10)
        assert len(kept) == 10
        assert sorted(m.area for m in kept) == list(range(3, 13))

    def test_empty(self):
        assert filter_masks([]) == []

    def test_confidence(self):
        masks = [mask_with_area(5, track_id=1, confidence=0.9), mask_with_area(5, track_id=2, confidence=0.1)]
        kept = filter_masks(masks, min_confidence=0.5)
        assert [m.track_id for m in kept] == [1]

    def test_min_area_and_track_ids(self):
        masks = [mask_with_area(a, track_id=10 + a) for a in (1, 4, 9)]
        kept = filter_masks(masks, min_area=4)
        assert [(m.area, m.track_id) for m in kept] == [(9, 19), (4, 14)]

    def test_empty_masks_always_dropped(self):
        assert filter_masks([mask_with_area(0)], min_area=0) == []


class TestSynthetic:
    def test_deterministic(self):
        cfg = SyntheticSceneConfig(num_frames=6, seed=11)
        a, b = generate_synthetic_video(cfg), generate_synthetic_video(cfg)
        assert all(np.array_equal(x, y) for x, y in zip(a.frames, b.frames))
        assert encode_annotations(a.annotations, 64, 64) == encode_annotations(b.annotations, 64, 64)

    def test_seed_matters(self):
        a = generate_synthetic_video(SyntheticSceneConfig(num_frames=2, seed=1))
        b = generate_synthetic_video(SyntheticSceneConfig(num_frames=2, seed=2))
        assert not np.array_equal(a.frames[0], b.frames[0])

    def test_no_sprites(self):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=4, num_sprites=0))
        assert all(len(a) == 0 for a in v.annotations)

    def test_static_sprite(self):
        cfg = SyntheticSceneConfig(num_frames=5, ego_velocity=(0.0, 0.0), sprites=[SpriteSpec(10, 12, 9)])
        v = generate_synthetic_video(cfg)
        first = v.annotations[0][0]
        for masks in v.annotations:
            assert np.array_equal(masks[0].grid, first.grid)
            assert masks[0].track_id == first.track_id
        # no ego motion: frames are identical too
        assert all(np.array_equal(f, v.frames[0]) for f in v.frames)

    def test_centroid_advances(self):
        cfg = SyntheticSceneConfig(num_frames=8, sprites=[SpriteSpec(10, 10, 8, vx=2.0, shape="disc")])
        v = generate_synthetic_video(cfg)
        cx = [np.argwhere(a[0].grid)[:, 1].mean() for a in v.annotations]
        np.testing.assert_allclose(np.diff(cx), 2.0, atol=1e-12)

    def test_background_translates_with_ego_motion(self):
        cfg = SyntheticSceneConfig(num_frames=3, num_sprites=0, ego_velocity=(3.0, 0.0), seed=4)
        v = generate_synthetic_video(cfg)
        np.testing.assert_array_equal(v.frames[1][:, :-3], v.frames[0][:, 3:])

    def test_sprite_too_large(self):
        with pytest.raises(ConfigError):
            generate_synthetic_video(SyntheticSceneConfig(sprites=[SpriteSpec(0, 0, 80)]))
        with pytest.raises(ConfigError):
            generate_synthetic_video(SyntheticSceneConfig(num_sprites=4, sprite_size=(20, 40)))

    @pytest.mark.parametrize("shape", ["square", "disc", "diamond", "triangle"])
    @pytest.mark.parametrize("size", [1, 2, 5, 12, 23])
    def test_shapes_connected(self, shape, size):
        m = sprite_shape_mask(shape, size)
        assert m.any()
        assert ndimage.label(m)[1] == 1

    @pytest.mark.parametrize("seed", range(4))
    def test_masks_connected_and_in_bounds(self, seed):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=30, num_sprites=4, seed=seed))
        for masks in v.annotations:
            assert len({m.track_id for m in masks}) == 4
            for m in masks:
                assert m.grid.shape == (64, 64)
                assert ndimage.label(m.grid)[1] == 1
            # disjoint instances
            assert np.sum([m.grid for m in masks], axis=0).max() <= 1

    def test_sprite_colours_distinct(self):
        v = generate_synthetic_video(SyntheticSceneConfig(num_frames=1, num_sprites=4, seed=9))
        px = v.frames[0]
        colours = {tuple(px[m.grid][0]) for m in v.annotations[0]}
        assert len(colours) == 4


class TestAnnotations:
    def test_hand_written_rle(self):
        # row-major [1, 0, 0, 1]: background run 0, fg 1, bg 2, fg 1
        grid = rle_decode([0, 1, 2, 1], (2, 2))
        np.testing.assert_array_equal(grid, [[1, 0], [0, 1]])
        np.testing.assert_array_equal(rle_encode(grid), [0, 1, 2, 1])

    @settings(max_examples=60, deadline=None)
    @given(arrays(bool, st.tuples(st.integers(1, 9), st.integers(1, 9))))
    def test_rle_round_trip(self, grid):
        np.testing.assert_array_equal(rle_decode(rle_encode(grid), grid.shape), grid)

    def test_file_round_trip(self, tmp_path, small_video):
        path = tmp_path / "a.vmsk"
        save_annotations(path, small_video.annotations, 64, 64)
        back = load_annotations(path)
        for a, b in zip(small_video.annotations, back):
            assert [m.track_id for m in a] == [m.track_id for m in b]
            for x, y in zip(a, b):
                np.testing.assert_array_equal(x.grid, y.grid)
                assert x.confidence == pytest.approx(y.confidence)

    def test_empty_frame(self):
        data = encode_annotations([[], [mask_with_area(3, 4, 4)]], 4, 4)
        ann, shape = decode_annotations(data)
        assert ann[0] == [] and len(ann[1]) == 1 and shape == (4, 4)

    def test_header(self):
        data = encode_annotations([[]], 3, 5)
        assert data.startswith(MAGIC) and MAGIC == b"VINOMSK1"

    @pytest.mark.parametrize(
        "mutate,offset",
        [
            (lambda d: b"BADMAGIC" + d[8:], 0),
            (lambda d: d[:-2], None),
            (lambda d: d + b"\x00", None),
        ],
    )
    def test_malformed(self, mutate, offset):
        data = encode_annotations([[mask_with_area(3, 4, 4)]], 4, 4)
        with pytest.raises(AnnotationParseError, match="byte offset") as exc:
            decode_annotations(mutate(data))
        if offset is not None:
            assert exc.value.offset == offset

    def test_bad_run_total(self):
        data = bytearray(encode_annotations([[mask_with_area(3, 4, 4)]], 4, 4))
        # last run is a u32 at the tail; inflate it
        data[-4:] = (999).to_bytes(4, "little")
        with pytest.raises(AnnotationParseError, match="RLE"):
            decode_annotations(bytes(data))

    def test_video_dir_round_trip(self, tmp_path, small_video):
        write_video(tmp_path, small_video)
        assert (tmp_path / ANNOTATION_FILENAME).exists()
        assert len(list(tmp_path.glob("*.png"))) == len(small_video)
        back = read_video(tmp_path)
        assert all(np.array_equal(a, b) for a, b in zip(small_video.frames, back.frames))
