import json

import numpy as np
import pytest

from posellm.errors import ConfigError
from posellm.prompt_codec import keypoint_index
from posellm.synth_data import (DatasetError, DatasetIntegrityError, GeneratorConfig, L_EAR, R_EAR,
                                generate_sample, generate_samples, generate_with_registry, joint_levels,
                                manifest_path, read_dataset, write_dataset)

CFG = GeneratorConfig()


def test_same_seed_same_bytes():
    a, b = generate_sample(0, CFG), generate_sample(0, CFG)
    assert a == b
    assert a.image_bytes() == b.image_bytes()
    assert a.keypoints.tobytes() == b.keypoints.tobytes()


def test_different_seeds_differ():
    assert generate_sample(0, CFG) != generate_sample(1, CFG)


def test_sample_fields():
    s = generate_sample(3, CFG)
    assert s.image.shape == (CFG.image_size, CFG.image_size)
    assert 0.0 <= s.image.min() and s.image.max() <= 1.0
    assert s.keypoints.shape == (17, 2) and s.visibility.shape == (17,)
    vis = s.visibility.astype(bool)
    assert np.all((s.keypoints[vis] >= 0) & (s.keypoints[vis] <= 1))
    assert s.area > 0 and s.head_size > 0


def test_centered_box_config_makes_everything_visible():
    cfg = GeneratorConfig(center_x=(0.5, 0.5), center_y=(0.35, 0.35), torso_tilt=(0.0, 0.0),
                          occlusion_prob=0.0)
    for seed in range(20):
        assert generate_sample(seed, cfg).visibility.tolist() == [1] * 17


def test_annotation_is_renderer_position():
    s, registry = generate_with_registry(7, CFG)
    k = keypoint_index("left ankle")
    if s.visibility[k]:
        assert tuple(s.keypoints[k]) == registry[k]
    for j, centre in registry.items():
        assert tuple(s.keypoints[j]) == centre


def test_annotation_within_one_pixel_and_pixel_has_joint_level():
    levels = joint_levels(CFG)
    size = CFG.image_size
    for seed in range(50):
        s, registry = generate_with_registry(seed, CFG)
        img = np.round(s.image * 255).astype(np.uint8)
        for k in np.flatnonzero(s.visibility):
            px = s.keypoints[k] * size
            cx, cy = int(px[0]), int(px[1])
            assert np.all(np.abs(px - (np.array([cx, cy]) + 0.5)) < 1.0)
            assert img[cy, cx] == levels[k]


def test_coverage_over_1000_seeds():
    vis = np.stack([generate_sample(s, CFG).visibility for s in range(1000)])
    assert vis.max(axis=0).tolist() == [1] * 17
    assert vis.min(axis=0).tolist() == [0] * 17


def test_head_size_rule():
    for seed in range(200):
        s = generate_sample(seed, CFG)
        kp = s.keypoints
        if s.visibility[L_EAR] and s.visibility[R_EAR]:
            assert s.head_size == pytest.approx(2.0 * np.hypot(*(kp[L_EAR] - kp[R_EAR])), rel=1e-12)
        else:
            mid = 0.5 * (kp[5] + kp[6])
            assert s.head_size == pytest.approx(2.0 * np.hypot(*(kp[0] - mid)), rel=1e-12)


def test_area_is_visible_bbox():
    s = generate_sample(11, CFG)
    pts = s.keypoints[s.visibility.astype(bool)] * CFG.image_size
    ext = pts.max(0) - pts.min(0)
    assert s.area == pytest.approx(max(ext[0] * ext[1], 1.0))


@pytest.mark.parametrize("kw", [dict(image_size=0), dict(thigh=(0.0, 0.1)), dict(shin=(0.1, 0.6)),
                                dict(occlusion_prob=1.5), dict(center_x=(0.7, 0.3))])
def test_invalid_config(kw):
    with pytest.raises(ConfigError):
        generate_sample(0, GeneratorConfig(**kw))


def test_round_trip(tmp_path):
    samples = generate_samples(range(10), CFG)
    m = write_dataset(samples, tmp_path / "d.jsonl", "train", CFG)
    assert m.count == 10 and m.split == "train" and m.config_hash == CFG.hash()
    back = read_dataset(tmp_path / "d.jsonl")
    assert back == samples
    for a, b in zip(samples, back):
        assert a.keypoints.tobytes() == b.keypoints.tobytes()


def test_record_fields(tmp_path):
    write_dataset(generate_samples(range(2), CFG), tmp_path / "d.jsonl", "val", CFG)
    rec = json.loads((tmp_path / "d.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"seed", "image_b64", "h", "w", "kps", "vis", "area", "head_size"}
    assert len(rec["kps"]) == 34 and len(rec["vis"]) == 17
    manifest = json.loads(manifest_path(tmp_path / "d.jsonl").read_text())
    assert {"count", "config_hash", "split"} <= set(manifest)


def test_truncated_line_names_line_number(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(generate_samples(range(3), CFG), path, "train", CFG)
    text = path.read_text()
    path.write_text(text[: len(text) - 40])
    with pytest.raises(DatasetError, match=r"d\.jsonl:3"):
        read_dataset(path)


def test_manifest_count_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(generate_samples(range(3), CFG), path, "train", CFG)
    mp = manifest_path(path)
    m = json.loads(mp.read_text())
    m["count"] = 4
    mp.write_text(json.dumps(m))
    with pytest.raises(DatasetIntegrityError):
        read_dataset(path)


def test_manifest_hash_mismatch(tmp_path):
    path = tmp_path / "d.jsonl"
    write_dataset(generate_samples(range(3), CFG), path, "train", CFG)
    mp = manifest_path(path)
    m = json.loads(mp.read_text())
    m["config_hash"] = "0" * 16
    mp.write_text(json.dumps(m))
    with pytest.raises(DatasetIntegrityError):
        read_dataset(path)


def test_regeneration_byte_identical(tmp_path):
    for name in ("a", "b"):
        write_dataset(generate_samples(range(16), CFG), tmp_path / name / "d.jsonl", "train", CFG)
    assert (tmp_path / "a" / "d.jsonl").read_bytes() == (tmp_path / "b" / "d.jsonl").read_bytes()
