import base64
import io
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from ramseg.rle import decode_mask, encode_mask
from ramseg.service import ServiceConfig, SessionState, create_app
from ramseg.synthetic import make_record, make_records, write_synthetic_dataset


def png_b64(pixels: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(pixels.astype(np.uint8)).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


@pytest.fixture()
def workbench(tmp_path):
    write_synthetic_dataset(tmp_path / "samples", n=12, seed=31, size=64)
    config = ServiceConfig(
        samples_dir=tmp_path / "samples",
        engine="transfer",
        backbone="test:0",
        default_k=4,
        embed_resolution=112,
        seg_resolution=128,
    )
    state = SessionState(config)
    return state, TestClient(create_app(state)), tmp_path


def test_health_and_stats(workbench):
    state, client, _ = workbench
    health = client.get("/api/health")
    assert health.status_code == 200
    assert health.json() == {"engine": "transfer", "checkpoint_loaded": True}
    stats = client.get("/api/index/stats").json()
    assert stats == {"count": 12, "dim": 384, "version": 0, "accepted_count": 0}


def test_build_endpoint(workbench, tmp_path):
    _, client, root = workbench
    manifest = write_synthetic_dataset(tmp_path / "other", n=5, seed=7, size=64)
    out = client.post("/api/index/build", json={"manifest_path": str(manifest)}).json()
    assert out == {"count": 5, "dim": 384, "version": 0}


def test_build_missing_manifest(workbench):
    _, client, _ = workbench
    resp = client.post("/api/index/build", json={"manifest_path": "/nope/manifest.json"})
    assert resp.status_code == 404
    assert resp.json()["code"] == "MISSING_FILE"


def test_build_empty_then_segment_conflict(workbench, tmp_path):
    _, client, _ = workbench
    path = tmp_path / "empty" / "manifest.json"
    path.parent.mkdir()
    path.write_text(json.dumps({"format_version": 1, "class_map": {"1": "disc"}, "entries": []}))
    out = client.post("/api/index/build", json={"manifest_path": str(path)}).json()
    assert out["count"] == 0
    query = make_record(99, 0, "q", size=64)
    resp = client.post("/api/segment", json={"image": png_b64(query.image.pixels), "k": 1})
    assert resp.status_code == 409
    assert resp.json()["code"] == "EMPTY_INDEX"


def test_retrieve_ordering_and_self_hit(workbench):
    state, client, _ = workbench
    first_id = state.store.ids[0]
    blob = png_b64(state.store.get(first_id).image.pixels)
    hits = client.post("/api/retrieve", json={"image": blob, "k": 3}).json()
    assert len(hits) == 3
    assert hits[0]["id"] == first_id
    assert hits[0]["distance"] == 0.0
    dists = [h["distance"] for h in hits]
    assert dists == sorted(dists)
    assert hits[0]["thumbnail_url"] == f"/api/samples/{first_id}/image"

    by_id = client.post("/api/retrieve", json={"sample_id": first_id, "k": 1}).json()
    assert by_id[0]["id"] == first_id and by_id[0]["distance"] == 0.0


def test_retrieve_k_validation(workbench):
    _, client, _ = workbench
    resp = client.post("/api/retrieve", json={"image": png_b64(np.zeros((8, 8))), "k": 0})
    assert resp.status_code == 400
    assert resp.json()["code"] == "INVALID_K"


def test_segment_matches_module_bit_for_bit(workbench, small_spec):
    state, client, _ = workbench
    from ramseg.engine import segment_image

    rec = state.store.get(state.store.ids[2])
    payload = {"image": png_b64(rec.image.pixels), "k": 3}
    out = client.post("/api/segment", json=payload).json()
    direct = segment_image(
        state.engine, state.index, state.store, rec.image, k=3,
        backbone=state.backbone, preprocess=state.spec,
    )
    for name, lbl in (("disc", 1), ("box", 2)):
        np.testing.assert_array_equal(decode_mask(out["masks"][name]), direct.class_masks[lbl])
        assert out["exemplar_ids"][name] == direct.exemplar_ids[lbl]
    # transfer engine + DB duplicate: the returned RLE decodes to the duplicate's mask
    np.testing.assert_array_equal(decode_mask(out["masks"]["disc"]), rec.mask.binary(1))


def test_segment_single_class(workbench):
    state, client, _ = workbench
    rec = state.store.get(state.store.ids[0])
    out = client.post(
        "/api/segment", json={"image": png_b64(rec.image.pixels), "k": 2, "classes": ["disc"]}
    ).json()
    assert list(out["masks"]) == ["disc"]
    assert out["masks"]["disc"]["label"] == 1


def test_segment_unknown_class(workbench):
    state, client, _ = workbench
    rec = state.store.get(state.store.ids[0])
    resp = client.post(
        "/api/segment", json={"image": png_b64(rec.image.pixels), "k": 2, "classes": ["vessel"]}
    )
    assert resp.status_code == 400
    assert resp.json()["code"] == "UNKNOWN_CLASS"


def test_malformed_base64(workbench):
    _, client, _ = workbench
    resp = client.post("/api/segment", json={"image": "@@not-base64@@", "k": 1})
    assert resp.status_code == 400


def test_accept_loop(workbench):
    state, client, _ = workbench
    query = make_record(77, 0, "query-subject", size=64)
    blob = png_b64(query.image.pixels)

    seg = client.post("/api/segment", json={"image": blob, "k": 2}).json()
    corrected = decode_mask(seg["masks"]["disc"]).copy()
    corrected[:4, :4] = True  # annotator's correction
    accept = client.post(
        "/api/annotations/accept",
        json={"image": blob, "masks": {"disc": encode_mask(corrected)}, "proposed_id": "fix-1"},
    )
    assert accept.status_code == 200
    assert accept.json() == {"id": "fix-1", "index_version": 1}

    hits = client.post("/api/retrieve", json={"image": blob, "k": 1}).json()
    assert hits[0]["id"] == "fix-1"
    assert hits[0]["distance"] == 0.0

    # segmenting the same image again with k=1 returns exactly the corrected mask
    seg2 = client.post("/api/segment", json={"image": blob, "k": 1, "classes": ["disc"]}).json()
    np.testing.assert_array_equal(decode_mask(seg2["masks"]["disc"]), corrected)

    stats = client.get("/api/index/stats").json()
    assert stats["count"] == 13
    assert stats["accepted_count"] == 1
    assert stats["version"] == 1

    dup = client.post(
        "/api/annotations/accept",
        json={"image": blob, "masks": {"disc": encode_mask(corrected)}, "proposed_id": "fix-1"},
    )
    assert dup.status_code == 409
    assert dup.json()["code"] == "DUPLICATE_ID"


def test_accept_version_strictly_increases(workbench):
    state, client, _ = workbench
    versions = []
    for i in range(3):
        rec = make_record(500 + i, 0, f"q{i}", size=64)
        resp = client.post(
            "/api/annotations/accept",
            json={
                "image": png_b64(rec.image.pixels),
                "masks": {"disc": encode_mask(rec.mask.binary(1))},
                "proposed_id": f"acc-{i}",
            },
        )
        versions.append(resp.json()["index_version"])
    assert versions == [1, 2, 3]


def test_accept_shape_mismatch(workbench):
    _, client, _ = workbench
    rec = make_record(88, 0, "q", size=64)
    wrong = np.zeros((32, 32), dtype=bool)
    resp = client.post(
        "/api/annotations/accept",
        json={
            "image": png_b64(rec.image.pixels),
            "masks": {"disc": encode_mask(wrong)},
            "proposed_id": "bad-dims",
        },
    )
    assert resp.status_code == 400
    assert resp.json()["code"] == "SHAPE_MISMATCH"


def test_journal_replay_reconstructs_state(workbench):
    state, client, root = workbench
    for i in range(2):
        rec = make_record(600 + i, 0, f"r{i}", size=64)
        client.post(
            "/api/annotations/accept",
            json={
                "image": png_b64(rec.image.pixels),
                "masks": {"disc": encode_mask(rec.mask.binary(1))},
                "proposed_id": f"re-{i}",
            },
        )
    replayed = SessionState(state.config)
    assert replayed.index.ids == state.index.ids
    assert replayed.index.version == state.index.version == 2
    assert replayed.accepted_count == 2
    assert replayed.index.rows_copy().tobytes() == state.index.rows_copy().tobytes()


def test_replay_idempotent_when_index_file_holds_accepts(workbench, tmp_path):
    state, client, _ = workbench
    rec = make_record(900, 0, "r", size=64)
    client.post(
        "/api/annotations/accept",
        json={
            "image": png_b64(rec.image.pixels),
            "masks": {"disc": encode_mask(rec.mask.binary(1))},
            "proposed_id": "already-indexed",
        },
    )
    from dataclasses import replace

    from ramseg.index import save

    extended_path = tmp_path / "extended.bin"
    save(state.index, extended_path)  # index file already containing the accepted row
    replayed = SessionState(replace(state.config, index_path=extended_path))
    assert replayed.index.ids == state.index.ids
    assert replayed.accepted_count == 1


def test_replay_bitwise_even_for_fractional_pixels(workbench):
    # fractional intensities (e.g. averaged RGB uploads) are canonicalized
    # through the persisted raster, so live and replayed rows match exactly
    state, _, _ = workbench
    from ramseg.data import ImageSlice

    rng = np.random.default_rng(3)
    pixels = (rng.random((64, 64)) * 200).astype(np.float32)  # non-integer values
    labels = np.zeros((64, 64), dtype=np.int32)
    labels[10:20, 10:20] = 1
    state.accept(ImageSlice(pixels, subject_id="frac"), labels, "frac-1")
    replayed = SessionState(state.config)
    assert replayed.index.ids == state.index.ids
    assert replayed.index.rows_copy().tobytes() == state.index.rows_copy().tobytes()


def test_masks_to_labels_overlap_goes_to_higher_label():
    from ramseg.service import masks_to_labels

    disc = np.zeros((4, 4), dtype=bool)
    disc[:2] = True
    box = np.zeros((4, 4), dtype=bool)
    box[1:3] = True
    # dict order puts the higher label first; the outcome must not depend on it
    labels = masks_to_labels(
        {"box": encode_mask(box), "disc": encode_mask(disc)}, {1: "disc", 2: "box"}, (4, 4)
    )
    assert labels[0, 0] == 1
    assert labels[1, 0] == 2  # overlap resolved to the higher label
    assert labels[2, 0] == 2
    assert labels[3, 0] == 0


def test_concurrent_accepts(workbench):
    state, _, _ = workbench
    from ramseg.data import ImageSlice
    from ramseg.errors import DuplicateId

    def accept(idx, proposed_id):
        rec = make_record(700 + idx, 0, f"c{idx}", size=64)
        labels = rec.mask.labels.copy()
        try:
            return state.accept(
                ImageSlice(rec.image.pixels, subject_id=f"c{idx}"), labels, proposed_id
            )
        except DuplicateId:
            return "conflict"

    with ThreadPoolExecutor(4) as pool:
        distinct = list(pool.map(lambda i: accept(i, f"distinct-{i}"), range(4)))
    assert all(isinstance(r, dict) for r in distinct)

    with ThreadPoolExecutor(4) as pool:
        same = list(pool.map(lambda i: accept(10 + i, "same-id"), range(4)))
    assert sum(1 for r in same if isinstance(r, dict)) == 1
    assert sum(1 for r in same if r == "conflict") == 3


def test_sample_artifacts_and_404(workbench):
    state, client, _ = workbench
    sample_id = state.store.ids[0]
    img = client.get(f"/api/samples/{sample_id}/image")
    assert img.status_code == 200
    assert img.headers["content-type"] == "image/png"
    assert "ETag" in img.headers or "etag" in img.headers
    decoded = np.asarray(Image.open(io.BytesIO(img.content)))
    np.testing.assert_array_equal(decoded.astype(np.float32), state.store.get(sample_id).image.pixels)
    mask = client.get(f"/api/samples/{sample_id}/mask")
    assert mask.status_code == 200
    assert client.get("/api/samples/ghost/image").status_code == 404


def test_index_version_header(workbench):
    _, client, _ = workbench
    resp = client.get("/api/index/stats")
    assert resp.headers["X-Index-Version"] == "0"


def test_openapi_served_at_api_spec(workbench):
    _, client, _ = workbench
    spec = client.get("/api/spec")
    assert spec.status_code == 200
    assert "/api/segment" in spec.json()["paths"]


def test_queue_full_maps_to_503():
    from ramseg.service import EngineLane, QueueFull

    lane = EngineLane(queue_limit=1)
    with lane.acquire():
        with pytest.raises(QueueFull):
            with lane.acquire():
                pass
    assert QueueFull.http_status == 503
