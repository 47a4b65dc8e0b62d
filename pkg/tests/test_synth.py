import numpy as np
import pytest

from odssd import annotation as ann
from odssd import synth
from odssd.geometry import object_disparity
from odssd.model import generate_priors


class TestSceneSpec:
    def test_defaults_valid(self):
        spec = synth.SceneSpec()
        assert spec.view_size == (160, 80)

    def test_disparity_range_capped_at_quarter_width(self):
        with pytest.raises(ValueError, match="disparity range"):
            synth.SceneSpec(disparity_range=(4, 50))

    def test_dy_jitter_capped(self):
        with pytest.raises(ValueError, match="jitter"):
            synth.SceneSpec(dy_jitter=(-20, 20))

    def test_frozen(self):
        spec = synth.SceneSpec()
        with pytest.raises(Exception):
            spec.seed = 1


class TestGenerateScene:
    def test_deterministic(self):
        spec = synth.SceneSpec(seed=0)
        l1, r1, t1, s1 = synth.generate_scene(spec, 5)
        l2, r2, t2, s2 = synth.generate_scene(spec, 5)
        assert np.array_equal(l1, l2) and np.array_equal(r1, r2)
        assert t1 == t2 and s1 == s2

    def test_indices_differ(self):
        spec = synth.SceneSpec(seed=0)
        l1, _, _, _ = synth.generate_scene(spec, 0)
        l2, _, _, _ = synth.generate_scene(spec, 1)
        assert not np.array_equal(l1, l2)

    def test_seeds_differ(self):
        l1, _, _, _ = synth.generate_scene(synth.SceneSpec(seed=0), 0)
        l2, _, _, _ = synth.generate_scene(synth.SceneSpec(seed=1), 0)
        assert not np.array_equal(l1, l2)

    def test_shapes_and_dtype(self):
        spec = synth.SceneSpec(seed=0)
        left, right, _, _ = synth.generate_scene(spec, 0)
        assert left.shape == (80, 160, 3) and right.shape == (80, 160, 3)
        assert left.dtype == np.uint8

    def test_annotations_satisfy_disparity_formula(self):
        spec = synth.SceneSpec(seed=2)
        w, h = spec.view_size
        for i in range(30):
            _, _, targets, _ = synth.generate_scene(spec, i)
            for t in targets:
                d = object_disparity(t.left_box, t.right_box, w, h)
                assert d.dx == pytest.approx(t.disparity.dx)
                assert d.dy == pytest.approx(t.disparity.dy)
                assert spec.disparity_range[0] <= t.disparity.dx <= spec.disparity_range[1]

    def test_right_view_holds_shifted_patch(self):
        spec = synth.SceneSpec(seed=4)
        left, right, targets, _ = synth.generate_scene(spec, 0)
        t = targets[0]
        lx0, ly0 = int(t.left_box.xmin), int(t.left_box.ymin)
        lx1, ly1 = int(t.left_box.xmax), int(t.left_box.ymax)
        rx0, ry0 = int(t.right_box.xmin), int(t.right_box.ymin)
        patch_l = left[ly0:ly1, lx0:lx1]
        patch_r = right[ry0:ry0 + (ly1 - ly0), rx0:rx0 + (lx1 - lx0)]
        assert np.array_equal(patch_l, patch_r)

    def test_background_identical_away_from_objects(self):
        spec = synth.SceneSpec(seed=5)
        left, right, targets, _ = synth.generate_scene(spec, 0)
        mask = np.ones(left.shape[:2], dtype=bool)
        for t in targets:
            for b in (t.left_box, t.right_box):
                mask[int(b.ymin):int(b.ymax), int(b.xmin):int(b.xmax)] = False
        assert np.array_equal(left[mask], right[mask])

    def test_dy_jitter_applied(self):
        spec = synth.SceneSpec(seed=6, dy_jitter=(-10, 10))
        seen = set()
        for i in range(40):
            _, _, targets, _ = synth.generate_scene(spec, i)
            seen.update(int(t.disparity.dy) for t in targets)
        assert any(dy != 0 for dy in seen)
        assert all(-10 <= dy <= 10 for dy in seen)


class TestMakeDataset:
    def test_files_and_round_trip(self, tmp_path):
        spec = synth.SceneSpec(seed=0)
        index = synth.make_dataset(spec, tmp_path, 3)
        assert len(index.entries) == 3
        back = ann.DatasetIndex.read(tmp_path / "index.txt")
        assert back == index
        for i, entry in enumerate(index.entries):
            doc = ann.parse_annotation(open(entry.annotation_path, "rb").read())
            targets, warnings = ann.doc_to_targets(doc)
            assert warnings == []
            _, _, want, _ = synth.generate_scene(spec, i)
            assert len(targets) == len(want)
            for got, t in zip(targets, want):
                assert got.left_box == t.left_box
                assert got.disparity.dx == pytest.approx(t.disparity.dx, abs=0.05)

    def test_stacked_image_content(self, tmp_path):
        from PIL import Image
        spec = synth.SceneSpec(seed=1)
        index = synth.make_dataset(spec, tmp_path, 1)
        img = np.asarray(Image.open(index.entries[0].image_path))
        left, right, _, _ = synth.generate_scene(spec, 0)
        assert np.array_equal(img, ann.stack_pair(left, right))


class TestEncodeScene:
    def test_every_object_covered(self):
        spec = synth.SceneSpec(seed=0)
        priors = generate_priors(synth.TOY_CONFIG)
        for i in range(10):
            _, _, targets, _ = synth.generate_scene(spec, i)
            enc = synth.encode_scene(targets, priors, synth.TOY_CONFIG)
            assert int((enc.labels > 0).sum()) >= len(targets)

    def test_normalize_image(self):
        img = np.zeros((4, 6, 3), np.uint8)
        out = synth.normalize_image(img)
        assert out.shape == (3, 4, 6)
        assert out.dtype == np.float32
        assert (out == -1.0).all()
        assert synth.normalize_image(np.full((1, 1, 3), 255, np.uint8)).max() == \
            pytest.approx(1.0)


class TestShiftScene:
    def test_disparity_preserved_and_boxes_translated(self):
        spec = synth.SceneSpec(seed=3)
        left, right, targets, _ = synth.generate_scene(spec, 0)
        stacked = ann.stack_pair(left, right)
        rng = np.random.default_rng(0)
        for _ in range(20):
            moved, shifted = synth.shift_scene(stacked, targets, rng)
            w, h = spec.view_size
            for t0, t1 in zip(targets, shifted):
                tx = t1.left_box.xmin - t0.left_box.xmin
                ty = t1.left_box.ymin - t0.left_box.ymin
                assert t1.right_box.xmin - t0.right_box.xmin == tx
                assert t1.right_box.ymin - t0.right_box.ymin == ty
                assert 0 <= t1.left_box.xmin and t1.left_box.xmax <= w
                assert 0 <= t1.right_box.ymin and t1.right_box.ymax <= h
                assert t1.disparity == t0.disparity
                got = object_disparity(t1.left_box, t1.right_box, w, h)
                assert got.dx == pytest.approx(t1.disparity.dx)

    def test_object_pixels_follow_the_boxes(self):
        spec = synth.SceneSpec(seed=4)
        left, right, targets, _ = synth.generate_scene(spec, 1)
        stacked = ann.stack_pair(left, right)
        moved, shifted = synth.shift_scene(stacked, targets,
                                           np.random.default_rng(1))
        ml, _ = ann.unstack_pair(moved)
        t0, t1 = targets[0], shifted[0]
        a = left[int(t0.left_box.ymin):int(t0.left_box.ymax),
                 int(t0.left_box.xmin):int(t0.left_box.xmax)]
        b = ml[int(t1.left_box.ymin):int(t1.left_box.ymax),
               int(t1.left_box.xmin):int(t1.left_box.xmax)]
        assert np.array_equal(a, b)

    def test_empty_targets_noop(self):
        stacked = np.zeros((8, 6, 3), np.uint8)
        out, targets = synth.shift_scene(stacked, [], np.random.default_rng(0))
        assert out is stacked and targets == []


class TestTrainToy:
    @pytest.fixture(scope="class")
    @staticmethod
    def scenes():
        return synth.load_scenes(synth.SceneSpec(seed=0), 8)

    def test_zero_lr_leaves_parameters_at_init(self, scenes):
        from odssd.model import build_model
        ref = build_model(synth.TOY_CONFIG, seed=3)
        res = synth.train_toy(synth.TOY_CONFIG, scenes, epochs=1, lr=0.0, seed=3)
        for name, p in res.model.parameters().items():
            assert np.array_equal(p.data, ref.parameters()[name].data), name
        assert len(res.loss_curve) == 1 and not res.diverged

    def test_loss_decreases(self, scenes):
        res = synth.train_toy(synth.TOY_CONFIG, scenes, epochs=3, seed=0)
        assert res.loss_curve[-1] < res.loss_curve[0]

    def test_deterministic_curve(self, scenes):
        a = synth.train_toy(synth.TOY_CONFIG, scenes, epochs=2, seed=0)
        b = synth.train_toy(synth.TOY_CONFIG, scenes, epochs=2, seed=0)
        assert a.loss_curve == b.loss_curve

    def test_checkpoint_round_trip(self, scenes, tmp_path):
        from odssd.model import load_weights
        path = tmp_path / "ckpt.bin"
        res = synth.train_toy(synth.TOY_CONFIG, scenes, epochs=1, seed=0,
                              checkpoint_path=path)
        back = load_weights(path)
        for name, p in res.model.parameters().items():
            assert np.array_equal(p.data, back.parameters()[name].data)


class TestShiftObject:
    def test_patch_moved_by_shift(self):
        spec = synth.SceneSpec(seed=7)
        left, right, targets, _ = synth.generate_scene(spec, 0)
        t = targets[0]
        shift = 10
        edited = synth.shift_object_right_view(right, t, shift)
        b = t.right_box
        x0, y0, x1, y1 = (int(v) for v in (b.xmin, b.ymin, b.xmax, b.ymax))
        assert np.array_equal(edited[y0:y1, x0 - shift:x1 - shift],
                              right[y0:y1, x0:x1])

    def test_left_view_untouched_elsewhere(self):
        spec = synth.SceneSpec(seed=7)
        _, right, targets, _ = synth.generate_scene(spec, 0)
        t = targets[0]
        edited = synth.shift_object_right_view(right, t, 5)
        b = t.right_box
        y0, y1 = int(b.ymin), int(b.ymax)
        untouched = np.ones(right.shape[:2], dtype=bool)
        untouched[y0:y1] = False
        assert np.array_equal(edited[untouched], right[untouched])

    def test_out_of_frame_shift_rejected(self):
        spec = synth.SceneSpec(seed=7)
        _, right, targets, _ = synth.generate_scene(spec, 0)
        with pytest.raises(ValueError, match="out of frame"):
            synth.shift_object_right_view(right, targets[0], 1000)
