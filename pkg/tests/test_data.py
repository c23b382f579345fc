import hashlib
import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from ecdm.data import (
    DatasetManifest,
    DetectionRecord,
    GenConfig,
    ManifestError,
    SceneObject,
    SceneSpec,
    check_disjoint,
    from_uint8,
    generate_dataset,
    load_image,
    load_manifest,
    load_paired_folders,
    object_mask,
    random_scene,
    render_pair,
    save_manifest,
    to_uint8,
    visible_masks,
)
from ecdm.edges import edge_condition


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_empty_scene_is_background():
    vis, tir, boxes = render_pair(SceneSpec(objects=[]), seed=0)
    assert boxes == []
    assert vis.shape == (3, 64, 80) and tir.shape == (1, 64, 80)
    assert abs(tir.mean() - (-0.8 + 1.6 * 0.2)) < 0.06


def test_hot_rect_brighter_than_background():
    obj = SceneObject("rect", "car", 10, 10, 20, 12, 1.0)
    _, tir, boxes = render_pair(SceneSpec(objects=[obj]), seed=1)
    assert boxes == [(10, 10, 20, 12)]
    inside = tir[0, 10:22, 10:30].mean()
    mask = np.ones((64, 80), bool)
    mask[10:22, 10:30] = False
    assert inside > tir[0][mask].mean()


def test_silhouettes_shared_between_modalities():
    rng = np.random.default_rng(3)
    for _ in range(20):
        spec = random_scene(rng)
        vis, tir, _ = render_pair(spec, seed=5)
        for o, m in zip(spec.objects, visible_masks(spec)):
            # within each silhouette the thermal image is one level plus faint drift
            assert np.ptp(tir[0][m]) < 0.1
            assert np.abs(tir[0][m] - (-0.8 + 1.6 * o.temperature)).max() < 0.05


def test_thermal_monotone_in_temperature():
    temps = [0.1, 0.4, 0.7, 1.0]
    means = []
    for t in temps:
        _, tir, _ = render_pair(SceneSpec(objects=[SceneObject("ellipse", "person", 30, 20, 10, 20, t)]), seed=0)
        means.append(tir[0][object_mask(SceneObject("ellipse", "person", 30, 20, 10, 20, t), 64, 80)].mean())
    assert all(a < b for a, b in zip(means, means[1:]))


def test_degenerate_object_rejected():
    big = SceneObject("rect", "car", 0, 0, 40, 30, 0.6)
    hidden = SceneObject("rect", "car", 5, 5, 2, 2, 0.6)
    with pytest.raises(ValueError, match="visible pixels"):
        render_pair(SceneSpec(objects=[hidden, big]))


def test_scene_validation():
    with pytest.raises(ValueError):
        SceneSpec(objects=[SceneObject("rect", "car", 70, 0, 20, 10, 0.5)])
    with pytest.raises(ValueError):
        SceneObject("rect", "car", 0, 0, 5, 5, 1.5)


def test_visible_edges_carry_more_texture():
    rng = np.random.default_rng(11)
    ratios = []
    for i in range(10):
        spec = random_scene(rng)
        vis, tir, _ = render_pair(spec, seed=i)
        ev = edge_condition(torch.from_numpy(vis)[None], None)
        et = edge_condition(torch.from_numpy(tir)[None], None)
        ratios.append((ev.pow(2).mean() / et.pow(2).mean()).item())
    assert np.median(ratios) > 1.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_uint8_roundtrip_error(seed):
    x = np.random.default_rng(seed).uniform(-1, 1, size=(1, 8, 8))
    back = from_uint8(to_uint8(x))
    assert np.abs(back - x).max() <= 1.0 / 127.5 / 2 + 1e-6


def test_uint8_endpoints():
    assert to_uint8(np.array([[-1.0, 0.0, 1.0]])).tolist() == [[0, 128, 255]]


def test_generate_dataset_deterministic(tmp_path):
    cfg = GenConfig(height=32, width=40)
    m = generate_dataset(10, tmp_path / "a", seed=1, cfg=cfg)
    generate_dataset(10, tmp_path / "b", seed=1, cfg=cfg)
    assert len(m) == 10
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    generate_dataset(10, tmp_path / "c", seed=2, cfg=cfg)
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_stored_edges_rederive(tmp_path):
    m = generate_dataset(5, tmp_path, seed=4, cfg=GenConfig(height=32, width=40))
    for r in m.records:
        tir = torch.from_numpy(load_image(m.path_of(r), channels=1))
        stored = load_image(tmp_path / "edges" / f"{r.id}.png", channels=1)
        fresh = from_uint8(to_uint8(edge_condition(tir)))
        assert np.abs(stored - fresh).max() <= 1 / 127.5 + 1e-6


def test_manifest_roundtrip(tmp_path):
    m = generate_dataset(4, tmp_path, seed=0, cfg=GenConfig(height=32, width=40))
    save_manifest(m, tmp_path / "copy.json")
    assert load_manifest(tmp_path / "copy.json") == m
    vis = load_manifest(tmp_path / "manifest_visible.json")
    assert [r.id for r in vis.records] == [r.id for r in m.records]
    assert [r.boxes for r in vis.records] == [r.boxes for r in m.records]


def test_empty_manifest_roundtrip(tmp_path):
    m = DatasetManifest("empty")
    save_manifest(m, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == m


def test_bad_box_names_record(tmp_path):
    d = DatasetManifest("x").to_dict()
    d["records"] = [
        {"id": "ok", "image": "a.png", "width": 10, "height": 10, "boxes": [[0, 0, 5, 5]], "labels": [0]},
        {"id": "bad7", "image": "b.png", "width": 10, "height": 10, "boxes": [[8, 8, 5, 5]], "labels": [0]},
    ]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError, match=r"record 1 \(bad7\)"):
        load_manifest(tmp_path / "m.json", check_paths=False)


def test_missing_image_reported(tmp_path):
    d = DatasetManifest("x").to_dict()
    d["records"] = [{"id": "r0", "image": "nope.png", "width": 10, "height": 10}]
    (tmp_path / "m.json").write_text(json.dumps(d))
    with pytest.raises(ManifestError, match="missing image"):
        load_manifest(tmp_path / "m.json")


def test_disjoint_splits():
    a = DatasetManifest("a", records=[DetectionRecord("1", "1.png", 4, 4)])
    b = DatasetManifest("b", split="test", records=[DetectionRecord("1", "1.png", 4, 4)])
    with pytest.raises(ManifestError):
        check_disjoint(a, b)


def test_llvip_layout(tmp_path):
    for sub in ("visible/train", "infrared/train", "Annotations"):
        (tmp_path / sub).mkdir(parents=True)
    for i in range(4):
        Image.fromarray(np.full((16, 20, 3), 40 * i, np.uint8)).save(tmp_path / "visible/train" / f"{i:06d}.jpg")
        Image.fromarray(np.full((16, 20), 50 * i, np.uint8)).save(tmp_path / "infrared/train" / f"{i:06d}.jpg")
    (tmp_path / "Annotations" / "000001.xml").write_text(
        "<annotation><object><name>person</name><bndbox><xmin>2</xmin><ymin>3</ymin>"
        "<xmax>8</xmax><ymax>12</ymax></bndbox></object></annotation>"
    )
    vis, ir = load_paired_folders(tmp_path, "train")
    assert [r.id for r in vis.records] == [r.id for r in ir.records] == ["000000", "000001", "000002", "000003"]
    assert ir.modality == "thermal" and vis.modality == "visible"
    assert ir.records[1].boxes == [[2, 3, 6, 9]] and ir.records[1].labels == [0]
