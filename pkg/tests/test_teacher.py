from __future__ import annotations

import json

import httpx
import numpy as np
import pytest

from cova import synthetic
from cova.capture import encode_png
from cova.errors import GroundTruthError
from cova.geometry import BoundingBox, GroundTruthObject, LabelMap
from cova.teacher import (
    MODEL_NAME, PERFECT, DegradationProfile, GroundTruthStore, Teacher, load_ground_truth,
    parse_ground_truth, serve,
)


def store_of(objs_per_image, size=(100, 100), labels=("car",)):
    ids = [f"{i:04d}" for i in range(len(objs_per_image))]
    return GroundTruthStore(LabelMap(labels), dict(zip(ids, objs_per_image)), {i: size for i in ids},
                            {k + 1: i for k, i in enumerate(ids)})


def obj(x0, y0, x1, y1, label="car"):
    return GroundTruthObject(BoundingBox(x0, y0, x1, y1), label)


def test_perfect_profile_returns_ground_truth_exactly():
    st = store_of([[obj(10, 20, 50, 60), obj(0, 0, 100, 100)]])
    dets = Teacher(st, PERFECT).detections("0000", (0, 0), 100, 100, "r")
    assert dets == [
        {"label": "car", "score": 1.0, "box": [0.2, 0.1, 0.6, 0.5]},
        {"label": "car", "score": 1.0, "box": [0.0, 0.0, 1.0, 1.0]},
    ]


def test_crop_coordinates_and_partial_overlap_rule():
    st = store_of([[obj(10, 10, 30, 30), obj(45, 45, 65, 65), obj(80, 80, 95, 95)]])
    # crop (40,40)-(80,80): first object outside, second inside, third outside
    dets = Teacher(st).detections("0000", (40, 40), 40, 40, "r")
    assert dets == [{"label": "car", "score": 1.0, "box": [0.125, 0.125, 0.625, 0.625]}]
    # an object with under 30% of its area inside the crop is not reported
    st = store_of([[obj(0, 0, 20, 20)]])
    assert Teacher(st).detections("0000", (15, 0), 50, 50, "r") == []
    got = Teacher(st).detections("0000", (12, 0), 50, 50, "r")
    assert got and got[0]["box"] == [0.0, 0.0, 0.4, 8 / 50]


def test_unknown_frame_gets_empty_answer():
    assert Teacher(store_of([[]])).detections("nope", (0, 0), 10, 10, "r") == []


def test_responses_are_deterministic_in_seed_and_request_id():
    st = store_of([[obj(10, 10, 20, 20), obj(40, 40, 80, 80)]])
    prof = DegradationProfile(seed=7, confidence_law=(2, 2), small_area_fraction=0.05,
                              drop_probability=0.5, jitter_sigma=0.1)
    t = Teacher(st, prof)
    a = t.respond("0000", (0, 0), 100, 100, "req-1")
    assert a == t.respond("0000", (0, 0), 100, 100, "req-1")
    variants = {t.respond("0000", (0, 0), 100, 100, f"req-{i}") for i in range(20)}
    assert len(variants) > 1
    body = json.loads(a)
    assert body["model"] == MODEL_NAME


def test_drop_rate_on_small_objects_follows_probability():
    st = store_of([[obj(10, 10, 15, 15)] for _ in range(2000)])
    prof = DegradationProfile(seed=1, small_area_fraction=0.01, drop_probability=0.5)
    t = Teacher(st, prof)
    kept = sum(len(t.detections(fid, (0, 0), 100, 100, fid)) for fid in st.frame_ids())
    # binomial(2000, 0.5): 3 sigma is about 67
    assert abs(kept - 1000) <= 67


def test_large_objects_are_never_dropped():
    st = store_of([[obj(0, 0, 50, 50)] for _ in range(200)])
    t = Teacher(st, DegradationProfile(seed=1, small_area_fraction=0.01, drop_probability=1.0))
    assert all(len(t.detections(f, (0, 0), 100, 100, f)) == 1 for f in st.frame_ids())


def test_jitter_keeps_boxes_valid_and_inside_crop():
    st = store_of([[obj(10, 10, 40, 40)] for _ in range(200)])
    t = Teacher(st, DegradationProfile(seed=2, jitter_sigma=0.3))
    for f in st.frame_ids():
        for d in t.detections(f, (5, 5), 60, 60, f):
            y0, x0, y1, x1 = d["box"]
            assert 0 <= y0 <= y1 <= 1 and 0 <= x0 <= x1 <= 1


def test_scores_follow_beta_law():
    st = store_of([[obj(10, 10, 40, 40)] for _ in range(3000)])
    t = Teacher(st, DegradationProfile(seed=4, confidence_law=(8, 2)))
    scores = [t.detections(f, (0, 0), 100, 100, f)[0]["score"] for f in st.frame_ids()]
    assert np.mean(scores) == pytest.approx(0.8, abs=0.01)


def test_profile_json_round_trip(tmp_path):
    prof = DegradationProfile(seed=3, confidence_law=(2.0, 5.0), small_area_fraction=0.01,
                              drop_probability=0.3, jitter_sigma=0.05)
    p = tmp_path / "profile.json"
    p.write_text(json.dumps(prof.to_dict()))
    assert DegradationProfile.load(p) == prof
    assert PERFECT.is_perfect and not prof.is_perfect


@pytest.mark.parametrize("bad", [dict(drop_probability=1.5), dict(jitter_sigma=-1), dict(confidence_law=(0, 1))])
def test_profile_validation(bad):
    with pytest.raises(ValueError):
        DegradationProfile(**bad)


def good_doc():
    return {
        "images": [{"id": 1, "file_name": "a.png", "width": 100, "height": 80}],
        "annotations": [{"id": 1, "image_id": 1, "category_id": 1, "bbox": [10, 10, 20, 20]}],
        "categories": [{"id": 1, "name": "car"}],
    }


@pytest.mark.parametrize("mutate, path", [
    (lambda d: d.pop("images"), "$.images"),
    (lambda d: d["annotations"][0].update(image_id=9), "$.annotations[0].image_id"),
    (lambda d: d["annotations"][0].update(category_id=9), "$.annotations[0].category_id"),
    (lambda d: d["annotations"][0].update(bbox=[90, 10, 20, 20]), "$.annotations[0].bbox"),
    (lambda d: d["annotations"][0].update(bbox=[1, 2, 3]), "$.annotations[0].bbox"),
    (lambda d: d["images"].append(dict(d["images"][0])), "$.images[1].id"),
    (lambda d: d["images"][0].update(width=0), "$.images[0].width"),
])
def test_ground_truth_errors_name_json_path(mutate, path):
    doc = good_doc()
    mutate(doc)
    with pytest.raises(GroundTruthError) as info:
        parse_ground_truth(doc)
    assert info.value.path == path


def test_load_ground_truth_from_file_or_dataset_dir(tmp_path):
    (tmp_path / "annotations.json").write_text(json.dumps(good_doc()))
    for p in (tmp_path, tmp_path / "annotations.json"):
        st = load_ground_truth(p)
        assert st.get("a.png") == [obj(10, 10, 30, 30)]
        assert st.sizes == {"a.png": (100, 80)} and st.image_ids == {1: "a.png"}
    with pytest.raises(GroundTruthError):
        load_ground_truth(tmp_path / "missing.json")


def test_synthetic_scene_ground_truth_loads(tmp_path):
    img_dir, gt = synthetic.write_object_scene(tmp_path, n_images=5)
    st = load_ground_truth(gt)
    assert len(st) == 5 and st.label_map.names() == ["person", "car"]
    assert all(st.get(f"{i:06d}.png") for i in range(5))


def test_http_stub_answers_like_in_process_teacher():
    st = store_of([[obj(10, 20, 50, 60)]])
    png = encode_png(np.zeros((40, 60, 3), np.uint8))
    with serve(st) as srv:
        r = httpx.post(srv.url + "/annotate", content=png, headers={
            "Content-Type": "image/png", "X-Request-Id": "q", "X-Frame-Id": "0000", "X-Crop-Offset": "5,10"})
        bad_type = httpx.post(srv.url + "/annotate", content=png, headers={
            "Content-Type": "image/jpeg", "X-Request-Id": "q", "X-Frame-Id": "0000"})
        outside = httpx.post(srv.url + "/annotate", content=png, headers={
            "Content-Type": "image/png", "X-Request-Id": "q", "X-Frame-Id": "0000", "X-Crop-Offset": "70,70"})
        not_png = httpx.post(srv.url + "/annotate", content=b"xx", headers={
            "Content-Type": "image/png", "X-Request-Id": "q", "X-Frame-Id": "0000"})
    assert r.status_code == 200
    assert r.content == Teacher(st).respond("0000", (5, 10), 60, 40, "q")
    assert bad_type.status_code == outside.status_code == not_png.status_code == 400
