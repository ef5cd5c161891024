import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wspkit import anno, pairs, synth
from wspkit.synth import CameraModel, SceneConfig


def test_optical_axis_projects_to_principal_point():
    cam = CameraModel(focal=200, cx=31.5, cy=40.0, height_mm=1000)
    px = synth.project(np.array([0.0, 1000.0, 5000.0]), cam)
    assert np.allclose(px, [31.5, 40.0])


def test_doubling_depth_halves_offset():
    cam = CameraModel(focal=150, cx=64, cy=64, height_mm=1000)
    a = synth.project(np.array([300.0, 400.0, 2000.0]), cam) - [64, 64]
    b = synth.project(np.array([300.0, 400.0, 4000.0]), cam) - [64, 64]
    assert np.allclose(b, a / 2)


def test_image_y_grows_downward():
    cam = CameraModel(height_mm=1000)
    ground = synth.project(np.array([0.0, 0.0, 3000.0]), cam)
    head = synth.project(np.array([0.0, 1800.0, 3000.0]), cam)
    assert ground[1] > cam.cy > head[1]


def test_point_behind_camera_raises():
    with pytest.raises(ValueError):
        synth.project(np.array([0.0, 1000.0, -10.0]), CameraModel())
    with pytest.raises(ValueError):
        CameraModel(focal=0)


@settings(max_examples=200, deadline=None)
@given(st.floats(100, 20000), st.floats(100, 20000), st.floats(-3000, 3000), st.floats(-3000, 3000))
def test_nearer_ground_point_projects_lower(z1, z2, x1, x2):
    if abs(z1 - z2) < 1e-6:
        return
    cam = CameraModel(height_mm=1200)
    y1 = synth.project(np.array([x1, 0.0, z1]), cam)[1]
    y2 = synth.project(np.array([x2, 0.0, z2]), cam)[1]
    assert (y1 > y2) == (z1 < z2)


def test_scene_is_deterministic():
    a = synth.generate_scene(np.random.default_rng(5))
    b = synth.generate_scene(np.random.default_rng(5))
    c = synth.generate_scene(np.random.default_rng(6))
    assert a.to_bytes() == b.to_bytes()
    assert a.to_bytes() != c.to_bytes()


def test_standing_persons_have_grounded_ankles_and_distinct_depths():
    for seed in range(50):
        sc = synth.generate_scene(np.random.default_rng(seed))
        assert 2 <= len(sc.persons) <= 3
        for p in sc.persons:
            assert p.joints[3, 1] == 0.0 and p.joints[6, 1] == 0.0
        depths = [sc.root_depth(i) for i in range(len(sc.persons))]
        assert len(set(depths)) == len(depths)


def test_tie_injection_gives_equal_depths():
    sc = synth.generate_scene(np.random.default_rng(1), SceneConfig(tie_injection=True, max_persons=2))
    assert sc.root_depth(0) == sc.root_depth(1)
    assert synth.true_depth_label(sc, 0, 1) == synth.true_depth_label(sc, 1, 0) == 1


def test_placement_failure_raises():
    cfg = SceneConfig(depth_range=(200.0, 200.0), max_retries=5)
    with pytest.raises(synth.PlacementError):
        synth.generate_scene(np.random.default_rng(0), cfg)


def test_true_depth_label_antisymmetric():
    sc = synth.generate_scene(np.random.default_rng(3))
    for a in range(len(sc.persons)):
        for b in range(len(sc.persons)):
            if a != b:
                assert synth.true_depth_label(sc, a, b) + synth.true_depth_label(sc, b, a) == 1


def test_perspective_rule_agrees_with_depth_oracle():
    for seed in range(300):
        sc = synth.generate_scene(np.random.default_rng(seed))
        ann = synth.render(sc).annotation
        for a in range(len(sc.persons)):
            for b in range(a + 1, len(sc.persons)):
                rule = pairs.relative_depth_label(ann.persons[a], ann.persons[b])
                assert rule == synth.true_depth_label(sc, a, b)


def test_pitch_introduces_measurable_disagreement():
    cfg = SceneConfig(pitch=0.25, standing=False)
    disagree = total = 0
    for seed in range(300):
        try:
            sc = synth.generate_scene(np.random.default_rng(seed), cfg)
        except synth.PlacementError:
            continue
        ann = synth.render(sc).annotation
        for a in range(len(sc.persons)):
            for b in range(a + 1, len(sc.persons)):
                total += 1
                disagree += pairs.relative_depth_label(ann.persons[a], ann.persons[b]) != synth.true_depth_label(sc, a, b)
    assert total > 100
    assert 0 < disagree / total < 0.5


def test_render_annotation_is_exact_projection():
    sc = synth.generate_scene(np.random.default_rng(9))
    r = synth.render(sc, image_id=4, file_name="x.pgm")
    for i, person in enumerate(r.annotation.persons):
        assert np.array_equal(person.joints, synth.project(sc.persons[i].joints, sc.camera))
        assert np.all(person.visibility == anno.Visibility.VISIBLE)
    assert r.image.shape == (128, 128) and r.image.dtype == np.float32
    assert 0.0 <= r.image.min() and r.image.max() <= 1.0
    assert r.annotation.image_id == 4


def test_render_resolution_scales_annotations():
    sc = synth.generate_scene(np.random.default_rng(9))
    lo = synth.render(sc, resolution=(64, 64))
    hi = synth.render(sc)
    assert lo.image.shape == (64, 64)
    assert np.allclose(lo.annotation.persons[0].joints * 2, hi.annotation.persons[0].joints)
    assert lo.camera.focal * 2 == hi.camera.focal


def test_empty_scene_renders_black():
    sc = synth.SyntheticScene([], CameraModel())
    assert not synth.render(sc).image.any()


def _two_person_scene(z_near, z_far, height=1700.0):
    people = []
    for x, z in ((-600.0, z_near), (600.0, z_far)):
        j = synth.stick_figure(np.random.default_rng(1), x, z, height)
        people.append(synth.SynthPerson((x, z), height, j))
    return synth.SyntheticScene(people, CameraModel())


def test_nearer_equal_height_person_has_larger_bbox():
    r = synth.render(_two_person_scene(3500.0, 6000.0))
    near, far = r.annotation.persons
    assert near.bbox[2] * near.bbox[3] > far.bbox[2] * far.bbox[3]


def test_line_width_follows_inverse_depth():
    # same figure at two depths: inked area scales roughly with (1/z)^2
    def ink(z):
        j = synth.stick_figure(np.random.default_rng(1), 0.0, z, 1700.0)
        sc = synth.SyntheticScene([synth.SynthPerson((0.0, z), 1700.0, j)], CameraModel())
        return float((synth.render(sc, resolution=(256, 256)).image > 0).sum())

    ratio = ink(3000.0) / ink(6000.0)
    assert 3.0 < ratio < 5.0


def test_pose_ground_truth_in_camera_frame():
    sc = synth.generate_scene(np.random.default_rng(2))
    r = synth.render(sc)
    for i, pose in enumerate(r.poses):
        assert np.allclose(pose.joints, sc.camera_joints(i))
        # y points down in the camera frame: head above pelvis means smaller y
        assert pose.joints[10, 1] < pose.joints[0, 1]


def test_pgm_round_trip(tmp_path):
    img = np.linspace(0, 1, 64 * 32, dtype=np.float32).reshape(32, 64)
    synth.write_pgm(tmp_path / "a.pgm", img)
    back = synth.read_pgm(tmp_path / "a.pgm")
    assert back.shape == (32, 64)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-7
    synth.write_pgm(tmp_path / "b.pgm", back)
    assert (tmp_path / "a.pgm").read_bytes() == (tmp_path / "b.pgm").read_bytes()


def test_manifest_round_trip_of_rendered_annotations():
    anns = [synth.render(synth.generate_scene(np.random.default_rng(s)), image_id=s).annotation for s in range(5)]
    text = anno.dump_manifest(anns)
    back = anno.load_manifest(text)
    assert anno.dump_manifest(back) == text
    for a, b in zip(anns, back):
        for pa, pb in zip(a.persons, b.persons):
            assert np.array_equal(pa.joints, pb.joints)


def test_annotate_matches_render_without_pixels():
    sc = synth.generate_scene(np.random.default_rng(12))
    a, r = synth.annotate(sc, image_id=3), synth.render(sc, image_id=3)
    assert anno.dump_manifest([a.annotation]) == anno.dump_manifest([r.annotation])
    assert a.camera == r.camera
    assert all(np.array_equal(p.joints, q.joints) for p, q in zip(a.poses, r.poses))
