import numpy as np
import pytest

from ramseg import PreprocessSpec, SampleStore, build_index, embed, make_test_backbone
from ramseg.data import preprocess_for_embedding
from ramseg.synthetic import CLASS_MAP, make_records


@pytest.fixture(scope="session")
def small_spec():
    # Fast resolutions for weight-free tests; embed side must stay a multiple of 14.
    return PreprocessSpec(embed_resolution=112, seg_resolution=128)


@pytest.fixture(scope="session")
def backbone():
    return make_test_backbone(0, dim=32)


@pytest.fixture(scope="session")
def shape_db(small_spec, backbone):
    """12 synthetic records + store + index, shared read-only across tests."""
    records = make_records(12, seed=7)
    store = SampleStore(class_map=CLASS_MAP)
    for rec in records:
        store.add(rec)
    embeddings = [
        embed(backbone, preprocess_for_embedding(rec.image, small_spec)).with_id(rec.id)
        for rec in records
    ]
    return records, store, build_index(embeddings)


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((n, dim))
    return (rows / np.linalg.norm(rows, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))
