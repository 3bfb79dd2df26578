import numpy as np
import pytest

from ramseg.data import ImageSlice
from ramseg.embedding import Embedding
from ramseg.engine import (
    FeatureMap,
    MemoryBank,
    SegmentationResult,
    binarize_logits,
    get_engine,
    make_toy_engine,
    make_transfer_engine,
    memory_attention,
    merge_class_masks,
    save_segmentation,
    segment_image,
    segment_volume,
)
from ramseg.errors import (
    CheckpointMissing,
    EmptyIndex,
    EmptyMemoryBank,
    InvalidK,
    NonBinaryMask,
    SchemaViolation,
    ShapeMismatch,
    UnknownClass,
)
from ramseg.index import build_index, query


def toy_inputs(seed=5, hw=128):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((hw, hw, 3)).astype(np.float32)


@pytest.fixture(scope="module")
def toy():
    return make_toy_engine(11)


@pytest.fixture(scope="module")
def toy_features(toy):
    return toy.encode_image_features(toy_inputs())


def bank_of(toy, features, masks, class_label=1):
    entries = [
        toy.encode_memory(
            features, m, source_sample_id=f"s{i}", retrieval_rank=i + 1, class_label=class_label
        )
        for i, m in enumerate(masks)
    ]
    return MemoryBank(entries=entries, capacity=len(entries), class_label=class_label)


# --- toy engine structure ---------------------------------------------------


def test_toy_shape_contract_1024(toy):
    fm = toy.encode_image_features(toy_inputs(hw=1024))
    assert fm.grid.shape == (64, 64, toy.feature_dim)
    assert fm.stride == 16
    mem = toy.encode_memory(fm, np.zeros((1024, 1024), dtype=np.int32))
    assert mem.memory_grid.shape == (64, 64, toy.memory_dim)


def test_toy_encoder_deterministic(toy):
    t = toy_inputs(3)
    a = toy.encode_image_features(t)
    b = toy.encode_image_features(t)
    np.testing.assert_array_equal(a.grid, b.grid)
    np.testing.assert_array_equal(a.skips[4], b.skips[4])


def test_toy_zero_vs_one_memory_differs(toy, toy_features):
    zero = toy.encode_memory(toy_features, np.zeros((128, 128), dtype=np.int32))
    one = toy.encode_memory(toy_features, np.ones((128, 128), dtype=np.int32))
    l2 = float(np.linalg.norm((zero.memory_grid - one.memory_grid).ravel()))
    assert l2 > 0.0


def test_toy_memory_rejects_nonbinary(toy, toy_features):
    bad = np.zeros((128, 128), dtype=np.int32)
    bad[0, 0] = 2
    with pytest.raises(NonBinaryMask):
        toy.encode_memory(toy_features, bad)


def test_toy_attention_preserves_shape(toy, toy_features):
    bank = bank_of(toy, toy_features, [np.ones((128, 128), dtype=np.int32)])
    out = memory_attention(toy, toy_features, bank)
    assert out.grid.shape == toy_features.grid.shape
    assert out.native_hw == toy_features.native_hw


def test_toy_attention_permutation_invariant_bitwise(toy, toy_features):
    half = np.zeros((128, 128), dtype=np.int32)
    half[:64] = 1
    masks = [np.ones((128, 128), dtype=np.int32), half, np.zeros((128, 128), dtype=np.int32)]
    bank = bank_of(toy, toy_features, masks)
    permuted = MemoryBank(
        entries=[bank.entries[2], bank.entries[0], bank.entries[1]],
        capacity=3,
        class_label=1,
    )
    a = memory_attention(toy, toy_features, bank)
    b = memory_attention(toy, toy_features, permuted)
    np.testing.assert_array_equal(a.grid, b.grid)
    _, la = toy.decode_mask(a)
    _, lb = toy.decode_mask(b)
    np.testing.assert_array_equal(la, lb)


def test_toy_sensitivity_to_memory_mask(toy, toy_features):
    half = np.zeros((128, 128), dtype=np.int32)
    half[:64] = 1
    base = bank_of(toy, toy_features, [np.ones((128, 128), dtype=np.int32), half])
    changed = bank_of(
        toy, toy_features, [np.ones((128, 128), dtype=np.int32), np.zeros((128, 128), dtype=np.int32)]
    )
    _, l1 = toy.decode_mask(memory_attention(toy, toy_features, base))
    _, l2 = toy.decode_mask(memory_attention(toy, toy_features, changed))
    assert float(np.abs(l1 - l2).max()) > 0.0


def test_empty_bank_raises(toy, toy_features):
    empty = MemoryBank(entries=[], capacity=1, class_label=1)
    with pytest.raises(EmptyMemoryBank):
        memory_attention(toy, toy_features, empty)


def test_toy_full_pass_deterministic(toy):
    t = toy_inputs(9)
    masks = [np.ones((128, 128), dtype=np.int32)]

    def run():
        fm = toy.encode_image_features(t)
        conditioned = memory_attention(toy, fm, bank_of(toy, fm, masks))
        return toy.decode_mask(conditioned)

    m1, l1 = run()
    m2, l2 = run()
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(m1, m2)


def test_binarize_threshold_contract():
    assert not binarize_logits(np.full((4, 4), -1.0)).any()
    assert binarize_logits(np.full((4, 4), 1.0)).all()
    assert not binarize_logits(np.zeros((4, 4))).any()  # exact zero is background


def test_toy_rejects_bad_input(toy):
    with pytest.raises(ShapeMismatch):
        toy.encode_image_features(np.zeros((100, 100, 3), dtype=np.float32))  # not /16
    with pytest.raises(ShapeMismatch):
        toy.encode_image_features(np.zeros((128, 128), dtype=np.float32))


# --- memory bank validation ----------------------------------------------------


def test_bank_invariants(toy, toy_features):
    entry = toy.encode_memory(toy_features, np.ones((128, 128), dtype=np.int32), class_label=2)
    with pytest.raises(SchemaViolation):
        MemoryBank(entries=[entry], capacity=0, class_label=2)
    with pytest.raises(SchemaViolation):
        MemoryBank(entries=[entry], capacity=1, class_label=1)  # label mismatch


# --- transfer engine ---------------------------------------------------------------


def test_transfer_upsamples_rank1_mask():
    eng = make_transfer_engine()
    t = toy_inputs(2, hw=64)
    fm = eng.encode_image_features(t, native_hw=(64, 64))
    src = np.zeros((64, 64), dtype=np.int32)
    src[8:24, 8:24] = 1
    entry = eng.encode_memory(fm, src, source_sample_id="a", retrieval_rank=1)
    bank = MemoryBank(entries=[entry], capacity=1, class_label=1)
    qfm = eng.encode_image_features(toy_inputs(3, hw=64), native_hw=(128, 128))
    mask, logits = eng.decode_mask(eng.memory_attention(qfm, bank))
    assert mask.shape == (128, 128)
    from ramseg.data import resize_mask

    np.testing.assert_array_equal(mask, resize_mask(src, (128, 128)).astype(bool))
    assert set(np.unique(logits)) <= {-1.0, 1.0}


def test_transfer_rank1_independent_of_bank_order():
    eng = make_transfer_engine()
    t = toy_inputs(2, hw=64)
    fm = eng.encode_image_features(t)
    m1 = np.zeros((64, 64), dtype=np.int32)
    m1[:10] = 1
    m2 = np.ones((64, 64), dtype=np.int32)
    e1 = eng.encode_memory(fm, m1, source_sample_id="a", retrieval_rank=1)
    e2 = eng.encode_memory(fm, m2, source_sample_id="b", retrieval_rank=2)
    out1 = eng.decode_mask(eng.memory_attention(fm, MemoryBank([e1, e2], 2, 1)))[0]
    out2 = eng.decode_mask(eng.memory_attention(fm, MemoryBank([e2, e1], 2, 1)))[0]
    np.testing.assert_array_equal(out1, out2)
    np.testing.assert_array_equal(out1, m1.astype(bool))


# --- segment_image / segment_volume -----------------------------------------------


def test_transfer_self_retrieval_dice_one(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_transfer_engine()
    for rec in records[:3]:
        result = segment_image(
            eng, index, store, rec.image, k=4, backbone=backbone, preprocess=small_spec
        )
        for lbl in (1, 2):
            np.testing.assert_array_equal(result.class_masks[lbl], rec.mask.binary(lbl))


def test_exemplar_provenance_matches_hits(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_transfer_engine()
    rec = records[5]
    result = segment_image(
        eng, index, store, rec.image, k=3, backbone=backbone, preprocess=small_spec
    )
    from ramseg.data import preprocess_for_embedding
    from ramseg.embedding import embed

    q = embed(backbone, preprocess_for_embedding(rec.image, small_spec))
    hits = query(index, q, 3)
    for lbl in (1, 2):
        assert result.exemplar_ids[lbl] == [h.id for h in hits]


def test_k_clamps_with_warning(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_transfer_engine()
    with pytest.warns(RuntimeWarning, match="clamping"):
        result = segment_image(
            eng, index, store, records[0].image, k=999, backbone=backbone, preprocess=small_spec
        )
    assert result.k == len(index)
    assert len(result.exemplar_ids[1]) == len(index)


def test_segment_errors(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_transfer_engine()
    with pytest.raises(EmptyIndex):
        segment_image(eng, build_index([]), store, records[0].image, backbone=backbone)
    with pytest.raises(InvalidK):
        segment_image(eng, index, store, records[0].image, k=0, backbone=backbone)
    with pytest.raises(UnknownClass):
        segment_image(
            eng, index, store, records[0].image, classes=["vessel"], backbone=backbone,
            preprocess=small_spec,
        )
    with pytest.raises(SchemaViolation):
        segment_image(
            eng, index, store, records[0].image, k=2, strategy="nearest", backbone=backbone
        )


def test_random_strategy_deterministic(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_transfer_engine()
    r1 = segment_image(
        eng, index, store, records[0].image, k=3, strategy="random:7", preprocess=small_spec
    )
    r2 = segment_image(
        eng, index, store, records[0].image, k=3, strategy="random:7", preprocess=small_spec
    )
    assert r1.exemplar_ids == r2.exemplar_ids


def test_segment_volume_matches_per_slice(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_transfer_engine()
    volume = np.stack([records[0].image.pixels, records[1].image.pixels])
    results = segment_volume(
        eng, index, store, volume, k=2, backbone=backbone, preprocess=small_spec
    )
    assert len(results) == 2
    for z, rec in enumerate(records[:2]):
        direct = segment_image(
            eng, index, store, rec.image, k=2, backbone=backbone, preprocess=small_spec
        )
        for lbl in (1, 2):
            np.testing.assert_array_equal(results[z].class_masks[lbl], direct.class_masks[lbl])


def test_segment_volume_empty_index(shape_db, backbone):
    _, store, _ = shape_db
    with pytest.raises(EmptyIndex):
        segment_volume(
            make_transfer_engine(), build_index([]), store, np.zeros((3, 32, 32)), backbone=backbone
        )


def test_toy_segment_pipeline(shape_db, backbone, small_spec):
    records, store, index = shape_db
    eng = make_toy_engine(3)
    rec = records[0]
    r1 = segment_image(eng, index, store, rec.image, k=2, backbone=backbone, preprocess=small_spec)
    r2 = segment_image(eng, index, store, rec.image, k=2, backbone=backbone, preprocess=small_spec)
    for lbl in (1, 2):
        assert r1.class_masks[lbl].shape == rec.image.pixels.shape
        np.testing.assert_array_equal(r1.class_masks[lbl], r2.class_masks[lbl])
        np.testing.assert_array_equal(r1.class_scores[lbl], r2.class_scores[lbl])
    assert set(r1.timing) == {"embed_retrieve_ms", "memory_encode_ms", "attend_decode_ms", "total_ms"}


# --- pretrained engine ------------------------------------------------------------


def test_pretrained_bank_permutation_dice_stability():
    """Checkpoint memory attention may embed positional structure, so bank
    permutation is measured as Dice stability rather than asserted bitwise."""
    import os

    needed = ("RAMSEG_SAM2_CHECKPOINT", "RAMSEG_ACDC_INDEX_MANIFEST")
    if any(not os.environ.get(v) for v in needed):
        pytest.skip(f"SKIPPED-ASSETS: needs {', '.join(needed)}")
    from ramseg.data import load_manifest, load_sample, preprocess_for_segmentation
    from ramseg.engine import make_pretrained_engine
    from ramseg.evaluation import dice

    manifest = load_manifest(os.environ["RAMSEG_ACDC_INDEX_MANIFEST"])
    samples = [load_sample(manifest, e.id) for e in manifest.entries[:4]]
    engine = make_pretrained_engine()
    query = samples[0]
    qf = engine.encode_image_features(
        preprocess_for_segmentation(query.image), native_hw=(query.image.height, query.image.width)
    )
    entries = []
    for rank, rec in enumerate(samples[1:4], start=1):
        feats = engine.encode_image_features(
            preprocess_for_segmentation(rec.image), native_hw=(rec.image.height, rec.image.width)
        )
        entries.append(
            engine.encode_memory(
                feats, rec.mask.binary(1), source_sample_id=rec.id, retrieval_rank=rank, class_label=1
            )
        )
    forward = MemoryBank(entries=entries, capacity=3, class_label=1)
    reversed_bank = MemoryBank(entries=entries[::-1], capacity=3, class_label=1)
    mask_a, _ = engine.decode_mask(engine.memory_attention(qf, forward))
    mask_b, _ = engine.decode_mask(engine.memory_attention(qf, reversed_bank))
    assert dice(mask_a, mask_b) >= 0.99


def test_pretrained_without_checkpoint(monkeypatch):
    monkeypatch.delenv("RAMSEG_SAM2_CHECKPOINT", raising=False)
    eng = get_engine("pretrained")
    assert eng.checkpoint_loaded is False
    with pytest.raises(CheckpointMissing, match="RAMSEG_SAM2_CHECKPOINT"):
        eng.encode_image_features(np.zeros((64, 64, 3), dtype=np.float32))


def test_engine_registry():
    assert get_engine("transfer").name == "transfer"
    assert get_engine("toy:5").name == "toy:5"
    with pytest.raises(SchemaViolation):
        get_engine("unet")
    with pytest.raises(SchemaViolation):
        get_engine("toy:abc")


# --- merging & saving -----------------------------------------------------------------


def test_merge_overlap_resolution():
    m1 = np.zeros((4, 4), dtype=bool)
    m1[:, :2] = True
    m2 = np.zeros((4, 4), dtype=bool)
    m2[:, 1:3] = True
    l1 = np.zeros((4, 4), dtype=np.float32)
    l1[:, :2] = 2.0
    l2 = np.zeros((4, 4), dtype=np.float32)
    l2[:, 1:3] = 1.0
    l2[0, 1] = 2.0  # exact tie at this pixel: smaller class id wins
    result = SegmentationResult(
        class_masks={1: m1, 2: m2},
        class_scores={1: l1, 2: l2},
        exemplar_ids={1: [], 2: []},
        timing={},
    )
    merged = merge_class_masks(result)
    assert merged[0, 0] == 1
    assert merged[0, 2] == 2
    assert merged[1, 1] == 1  # logit 2.0 beats 1.0
    assert merged[0, 1] == 1  # tie resolved to smaller label
    assert merged[0, 3] == 0


def test_save_segmentation(tmp_path, shape_db, backbone, small_spec):
    records, store, index = shape_db
    result = segment_image(
        make_transfer_engine(), index, store, records[0].image, k=2,
        backbone=backbone, preprocess=small_spec,
    )
    png_path, sidecar_path = save_segmentation(result, tmp_path / "out")
    assert png_path.exists() and sidecar_path.exists()
    import json

    sidecar = json.loads(sidecar_path.read_text())
    assert set(sidecar) == {"exemplar_ids", "timings", "k", "strategy"}
    from ramseg.data import load_mask_array

    merged = load_mask_array(png_path)
    np.testing.assert_array_equal(merged, merge_class_masks(result))
