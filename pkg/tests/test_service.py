import base64
import io

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from kprism.service import create_app, mask_to_png_b64, png_b64_to_array, rle_decode, rle_encode


def _png_b64(arr: np.ndarray) -> str:
    img = Image.fromarray(arr)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def _image_payload(seed=0, hw=(32, 32)) -> str:
    rng = np.random.default_rng(seed)
    return _png_b64((rng.random((*hw, 3)) * 255).astype(np.uint8))


def _gt_payload(hw=(32, 32)) -> tuple[str, np.ndarray]:
    gt = np.zeros(hw, dtype=np.uint8)
    gt[8:20, 8:20] = 1
    return _png_b64(gt * 255), gt


@pytest.fixture(scope="module")
def client(tiny_model, tiny_manifest):
    app = create_app(tiny_model, manifest=tiny_manifest)
    with TestClient(app) as c:
        yield c


# ------------------------------------------------------------ RLE


def test_rle_roundtrip_and_convention():
    mask = np.array([[0, 0, 1], [1, 1, 0]], dtype=np.uint8)
    payload = rle_encode(mask)
    assert payload["counts"][0] == 2  # first run counts zeros
    np.testing.assert_array_equal(rle_decode(payload), mask)
    lead = np.array([[1, 1], [0, 0]], dtype=np.uint8)
    payload2 = rle_encode(lead)
    assert payload2["counts"][0] == 0
    np.testing.assert_array_equal(rle_decode(payload2), lead)
    empty = np.zeros((3, 4), dtype=np.uint8)
    np.testing.assert_array_equal(rle_decode(rle_encode(empty)), empty)


def test_rle_random_masks_roundtrip():
    rng = np.random.default_rng(1)
    for _ in range(20):
        mask = (rng.random((7, 9)) > 0.5).astype(np.uint8)
        np.testing.assert_array_equal(rle_decode(rle_encode(mask)), mask)


# ------------------------------------------------------------ endpoints


def test_healthz(client):
    r = client.get("/healthz")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"


def test_classes_lists_vocabulary(client):
    r = client.get("/classes")
    assert r.status_code == 200
    assert len(r.json()["classes"]) == 3


def test_references_catalog(client, tiny_manifest):
    r = client.get("/references")
    assert r.status_code == 200
    refs = r.json()["references"]
    assert len(refs) == len(tiny_manifest.indices("train"))
    detail = client.get(f"/references/{refs[0]['id']}")
    assert detail.status_code == 200
    assert "image" in detail.json()
    assert client.get("/references/99999").status_code == 404


def test_interactive_session_starts_empty_with_dice(client):
    gt_b64, gt = _gt_payload()
    r = client.post("/sessions", json={"image": _image_payload(1), "mode": "interactive", "gt": gt_b64})
    assert r.status_code == 200
    doc = r.json()
    assert doc["click_count"] == 0
    mask = rle_decode(doc["mask"]["rle"])
    assert mask.sum() == 0
    assert doc["dice"] == 0.0  # empty prediction vs nonempty gt


def test_semantic_session_unknown_class_400_with_classes(client):
    r = client.post("/sessions", json={"image": _image_payload(2), "mode": "semantic", "class_id": 9})
    assert r.status_code == 400
    assert 1 in r.json()["detail"]["classes"]


def test_semantic_session_returns_initial_mask(client):
    r = client.post("/sessions", json={"image": _image_payload(3), "mode": "semantic", "class_id": 1})
    assert r.status_code == 200
    doc = r.json()
    assert doc["mode"] == "semantic"
    assert doc["mask"]["rle"]["size"] == [32, 32]


def test_create_get_roundtrip(client):
    r = client.post("/sessions", json={"image": _image_payload(4), "mode": "interactive"})
    sid = r.json()["session_id"]
    g = client.get(f"/sessions/{sid}")
    assert g.status_code == 200
    assert g.json()["mask"] == r.json()["mask"]
    assert g.json()["click_count"] == 0
    assert client.get("/sessions/nope").status_code == 404


def test_click_flow_and_undo_replay(client):
    r = client.post("/sessions", json={"image": _image_payload(5), "mode": "interactive"})
    sid = r.json()["session_id"]
    zero_mask = r.json()["mask"]
    c1 = client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 12, "polarity": "positive"})
    assert c1.status_code == 200
    assert c1.json()["click_count"] == 1
    first_mask = c1.json()["mask"]
    # undo returns to the zero-click mask
    u = client.post(f"/sessions/{sid}/undo")
    assert u.status_code == 200
    assert u.json()["click_count"] == 0
    assert u.json()["mask"] == zero_mask
    # identical request from identical state reproduces the identical mask
    c2 = client.post(f"/sessions/{sid}/clicks", json={"x": 10, "y": 12, "polarity": "positive"})
    assert c2.json()["mask"] == first_mask
    # undo on empty history -> 409
    client.post(f"/sessions/{sid}/undo")
    r409 = client.post(f"/sessions/{sid}/undo")
    assert r409.status_code == 409


def test_out_of_bounds_click_rejected_state_unchanged(client):
    r = client.post("/sessions", json={"image": _image_payload(6), "mode": "interactive"})
    sid = r.json()["session_id"]
    bad = client.post(f"/sessions/{sid}/clicks", json={"x": 99, "y": 0, "polarity": "positive"})
    assert bad.status_code == 400
    assert client.get(f"/sessions/{sid}").json()["click_count"] == 0
    badpol = client.post(f"/sessions/{sid}/clicks", json={"x": 1, "y": 1, "polarity": "up"})
    assert badpol.status_code == 400


def test_replay_determinism_across_sessions(client):
    """Rebuilding a session from its click log reproduces the mask exactly."""
    image = _image_payload(7)
    clicks = [(5, 5, "positive"), (20, 20, "negative"), (11, 28, "positive")]
    masks = []
    for _ in range(2):
        sid = client.post("/sessions", json={"image": image, "mode": "interactive"}).json()["session_id"]
        last = None
        for x, y, pol in clicks:
            last = client.post(f"/sessions/{sid}/clicks", json={"x": x, "y": y, "polarity": pol}).json()
        masks.append(last["mask"])
    assert masks[0] == masks[1]


def test_rle_and_png_payloads_agree(client):
    gt_b64, _ = _gt_payload()
    r = client.post("/sessions", json={"image": _image_payload(8), "mode": "semantic", "class_id": 2, "gt": gt_b64})
    doc = r.json()
    from_rle = rle_decode(doc["mask"]["rle"])
    png_arr = png_b64_to_array(doc["mask"]["png"])
    np.testing.assert_array_equal(from_rle, (png_arr > 127).astype(np.uint8))


def test_session_isolation(client):
    a = client.post("/sessions", json={"image": _image_payload(9), "mode": "interactive"}).json()
    b = client.post("/sessions", json={"image": _image_payload(10), "mode": "interactive"}).json()
    client.post(f"/sessions/{a['session_id']}/clicks", json={"x": 3, "y": 3, "polarity": "positive"})
    doc_b = client.get(f"/sessions/{b['session_id']}").json()
    assert doc_b["click_count"] == 0
    doc_a = client.get(f"/sessions/{a['session_id']}").json()
    assert doc_a["click_count"] == 1


def test_undecodable_png_422(client):
    r = client.post("/sessions", json={"image": base64.b64encode(b"nope").decode(), "mode": "interactive"})
    assert r.status_code == 422
    r2 = client.post("/sessions", json={"image": "!!!not-base64!!!", "mode": "interactive"})
    assert r2.status_code == 422


def test_oversized_image_413(client):
    big = np.zeros((2100, 2100), dtype=np.uint8)
    r = client.post("/sessions", json={"image": _png_b64(big), "mode": "interactive"})
    assert r.status_code == 413


def test_incontext_session_via_reference_catalog(client, tiny_manifest):
    refs = client.get("/references").json()["references"]
    ref = next(r for r in refs if r["classes"])
    class_id = ref["classes"][0]
    r = client.post(
        "/sessions",
        json={
            "image": _image_payload(11),
            "mode": "incontext",
            "support_ids": [ref["id"]],
            "class_id": class_id,
        },
    )
    assert r.status_code == 200
    missing = client.post(
        "/sessions", json={"image": _image_payload(12), "mode": "incontext", "class_id": 1}
    )
    assert missing.status_code == 400


def test_suggest_click_requires_gt(client):
    sid = client.post("/sessions", json={"image": _image_payload(13), "mode": "interactive"}).json()["session_id"]
    assert client.get(f"/sessions/{sid}/suggest_click").status_code == 409
    gt_b64, gt = _gt_payload()
    sid2 = client.post(
        "/sessions", json={"image": _image_payload(14), "mode": "interactive", "gt": gt_b64}
    ).json()["session_id"]
    s = client.get(f"/sessions/{sid2}/suggest_click")
    assert s.status_code == 200
    doc = s.json()
    assert doc["done"] is False
    assert doc["polarity"] == "positive"
    assert gt[doc["y"], doc["x"]] == 1


def test_mask_png_roundtrip_helpers():
    mask = (np.random.default_rng(3).random((9, 7)) > 0.5).astype(np.uint8)
    arr = png_b64_to_array(mask_to_png_b64(mask))
    np.testing.assert_array_equal((arr > 127).astype(np.uint8), mask)


def test_ui_static_mount_serves_frontend(tiny_model):
    from pathlib import Path

    ui = Path(__file__).resolve().parents[1] / "frontend"
    if not (ui / "index.html").exists():
        pytest.skip("frontend bundle not present")
    app = create_app(tiny_model, ui_dir=ui)
    with TestClient(app) as c:
        assert c.get("/healthz").status_code == 200  # API routes win over the mount
        assert "<canvas" in c.get("/").text
