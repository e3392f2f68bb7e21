"""Tests for synthetic records, the QA pipeline, splits, and JSONL round-trips."""

import json
import logging

import numpy as np
import pytest

from medsegdet.datagen import (
    CATEGORIES,
    DataError,
    Description,
    ImageRecord,
    MockOracle,
    OracleError,
    QAPair,
    Verdict,
    candidate_placeholders,
    dataset_stats,
    generate_pipeline,
    read_jsonl,
    record_from_json,
    record_to_json,
    split_dataset,
    synth_records,
    thread_count,
    training_ready,
    write_jsonl,
)
from medsegdet.metrics import mask2box


def small_set(n=6, seed=3):
    return synth_records(n, seed=seed, hw=(32, 32))


# -- synthetic records ----------------------------------------------------------

def test_synth_records_deterministic():
    a = synth_records(5, seed=11, hw=(32, 32))
    b = synth_records(5, seed=11, hw=(32, 32))
    for ra, rb in zip(a, b):
        assert ra.id == rb.id and ra.label == rb.label and ra.modality == rb.modality
        np.testing.assert_array_equal(ra.image, rb.image)
        np.testing.assert_array_equal(ra.mask, rb.mask)
        assert ra.box.as_floats() == rb.box.as_floats()


def test_synth_records_box_matches_mask():
    for r in synth_records(20, seed=12, hw=(32, 32)):
        assert r.mask.any()
        assert r.box.as_floats() == mask2box(r.mask).as_floats()
        assert r.image.shape == (32, 32) and r.mask.shape == (32, 32)
        assert r.image.min() >= 0.0 and r.image.max() <= 1.0


def test_synth_records_category_balance():
    records = synth_records(1000, seed=13, hw=(16, 16))
    counts = {c: 0 for c in CATEGORIES}
    for r in records:
        counts[r.label] += 1
    for c, n in counts.items():
        assert abs(n / 1000 - 1 / len(CATEGORIES)) < 0.05


def test_synth_records_validation():
    with pytest.raises(ValueError):
        synth_records(0, seed=0)


def test_synth_records_polarity_detectable():
    for r in small_set(10, seed=14):
        inside = r.image[r.mask].mean()
        outside = r.image[~r.mask].mean()
        assert abs(inside - outside) > 0.1


# -- QA pipeline -------------------------------------------------------------------

def test_pipeline_keep_all_yields_eight_pairs():
    records = generate_pipeline(small_set(), MockOracle(), threads=1)
    for r in records:
        assert len(r.qa) == 8
        perspectives = [(p.perspective, p.length) for p in r.qa]
        assert perspectives.count(("attribute", "long")) == 2  # one per template round
        for pair in r.qa:
            assert r.label in pair.answer
            assert pair.answer.endswith(candidate_placeholders(2))
            for k in (1, 2):
                assert pair.answer.count(f"<c{k}>") == 1


def test_pipeline_drop_location_halves_counts():
    records = generate_pipeline(small_set(), MockOracle(policy="drop_location"), threads=1)
    for r in records:
        assert len(r.qa) == 4
        assert all(p.perspective == "attribute" for p in r.qa)


def test_pipeline_revise_path_rewrites_text():
    records = generate_pipeline(small_set(), MockOracle(policy="revise_long"), threads=1)
    for r in records:
        long_pairs = [p for p in r.qa if p.length == "long"]
        assert long_pairs and all(", clearly delineated" in p.question for p in long_pairs)


def test_pipeline_skips_failing_records(caplog):
    records = small_set(4)

    def flaky(desc: Description) -> Verdict:
        raise OracleError("boom")

    with caplog.at_level(logging.WARNING):
        out = generate_pipeline(records, MockOracle(policy=flaky), threads=1)
    assert out == []
    assert "skipping record" in caplog.text


def test_pipeline_parallel_matches_serial(tmp_path):
    records = small_set(8, seed=21)
    serial = generate_pipeline(records, MockOracle(), threads=1)
    parallel = generate_pipeline(records, MockOracle(), threads=4)
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(serial, p1)
    write_jsonl(parallel, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_pipeline_byte_identical_reruns(tmp_path):
    def build():
        return generate_pipeline(synth_records(6, seed=5, hw=(32, 32)), MockOracle(seed=1))

    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_jsonl(build(), p1)
    write_jsonl(build(), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_training_ready_filters_empty_qa():
    records = small_set(4)
    records[0] = ImageRecord(**{**vars(records[0]), "qa": [
        QAPair("q", "a lung <c1> <c2>", "attribute", "short")
    ]})
    ready = training_ready(records)
    assert ready == [records[0]]


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("MEDISEE_THREADS", "3")
    assert thread_count() == 3
    monkeypatch.setenv("MEDISEE_THREADS", "0")
    with pytest.raises(ValueError):
        thread_count()
    monkeypatch.delenv("MEDISEE_THREADS")
    assert thread_count() >= 1


# -- splits --------------------------------------------------------------------------

def test_split_exact_ratio():
    records = small_set(100, seed=6)
    train, val, test = split_dataset(records, seed=7)
    assert (len(train), len(val), len(test)) == (80, 10, 10)
    ids = lambda rs: {r.id for r in rs}
    assert ids(train) | ids(val) | ids(test) == ids(records)
    assert not (ids(train) & ids(val) or ids(train) & ids(test) or ids(val) & ids(test))


def test_split_large_set_within_one():
    records = [
        ImageRecord(f"r{i}", np.ones((1, 1)), np.ones((1, 1), bool),
                    mask2box(np.ones((1, 1), bool)), "lung", "ct")
        for i in range(12652)
    ]
    train, val, test = split_dataset(records, seed=8)
    assert abs(len(train) - 12652 * 0.8) <= 1
    assert abs(len(val) - 12652 * 0.1) <= 1
    assert abs(len(test) - 12652 * 0.1) <= 1
    assert len(train) + len(val) + len(test) == 12652


def test_split_deterministic_and_validated():
    records = small_set(10, seed=9)
    a = split_dataset(records, seed=10)
    b = split_dataset(records, seed=10)
    assert [[r.id for r in part] for part in a] == [[r.id for r in part] for part in b]
    with pytest.raises(ValueError):
        split_dataset(records, ratios=(0.5, 0.4, 0.2))
    with pytest.raises(ValueError):
        split_dataset(records[:2])


# -- statistics -----------------------------------------------------------------------

def test_dataset_stats_empty():
    stats = dataset_stats([])
    assert stats == {"images": {}, "qa": {}, "total_images": 0, "total_qa": 0}


def test_dataset_stats_recount():
    records = generate_pipeline(synth_records(40, seed=15, hw=(16, 16)), MockOracle(), threads=1)
    stats = dataset_stats(records)
    img_recount: dict = {}
    qa_recount: dict = {}
    for r in records:
        img_recount[r.label] = img_recount.get(r.label, 0) + 1
        qa_recount[r.label] = qa_recount.get(r.label, 0) + len(r.qa)
    assert stats["images"] == img_recount
    assert stats["qa"] == qa_recount
    assert stats["total_images"] == len(records)
    assert stats["total_qa"] == sum(len(r.qa) for r in records)


# -- serialization ----------------------------------------------------------------------

def test_jsonl_round_trip(tmp_path):
    records = generate_pipeline(small_set(5, seed=16), MockOracle(), threads=1)
    path = tmp_path / "data.jsonl"
    write_jsonl(records, path)
    loaded = read_jsonl(path)
    assert len(loaded) == len(records)
    for orig, back in zip(records, loaded):
        assert back.id == orig.id and back.label == orig.label
        np.testing.assert_array_equal(back.mask, orig.mask)
        np.testing.assert_allclose(back.image, orig.image, atol=1e-7)  # float32 storage
        assert back.box.as_floats() == orig.box.as_floats()
        assert back.qa == orig.qa


def test_jsonl_schema_fields(tmp_path):
    records = generate_pipeline(small_set(2, seed=17), MockOracle(), threads=1)
    obj = record_to_json(records[0])
    assert set(obj) == {
        "id", "width", "height", "image_b64", "mask_b64", "box", "label", "modality", "qa"
    }
    assert set(obj["qa"][0]) == {"question", "answer", "perspective", "length"}


def test_read_rejects_malformed(tmp_path):
    records = small_set(2, seed=18)
    good = record_to_json(records[0])

    bad_payload = dict(good)
    bad_payload["image_b64"] = good["image_b64"][:16]
    with pytest.raises(DataError):
        record_from_json(bad_payload)

    bad_box = dict(good)
    bad_box["box"] = [0.9, 0.1, 0.1, 0.5]
    with pytest.raises(DataError):
        record_from_json(bad_box)

    mismatched = dict(good)
    mismatched["box"] = [0.0, 0.0, 1.0, 1.0]
    if mask2box(records[0].mask).as_floats() != (0.0, 0.0, 1.0, 1.0):
        with pytest.raises(DataError):
            record_from_json(mismatched)

    path = tmp_path / "broken.jsonl"
    path.write_text("{not json}\n")
    with pytest.raises(DataError):
        read_jsonl(path)
