import hashlib
import json

import numpy as np
import pytest

from medcap.data import (
    BRAIN_ONLY,
    CaptionRecord,
    FilterSpec,
    describe,
    filter_subset,
    load_images,
    load_manifest,
    parse_caption,
    preprocess_image,
    read_corpus,
    read_image,
    read_pgm,
    resize_bilinear,
    shuffle_captions,
    split_records,
    synth_generate,
    write_manifest,
    write_pgm,
    write_tensor_image,
)
from medcap.tokenizer import DataError


def write_lines(path, rows):
    path.write_text("".join((r if isinstance(r, str) else json.dumps(r)) + "\n" for r in rows))
    return path


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def test_empty_manifest(tmp_path):
    assert load_manifest(write_lines(tmp_path / "m.jsonl", [])) == []


def test_three_line_manifest(tmp_path):
    rows = [{"id": i, "image": f"img/{i}.pgm", "caption": f"caption {i}", "labels": ["mri"], "split": s}
            for i, s in enumerate(["train", "val", "test"])]
    recs = load_manifest(write_lines(tmp_path / "m.jsonl", rows))
    assert [r.split for r in recs] == ["train", "val", "test"]
    assert recs[1].image_path == str(tmp_path / "img/1.pgm")
    assert recs[2].record_id == "2" and recs[0].labels == ["mri"]


def test_bad_line_is_skipped_and_reported(tmp_path):
    good = [{"image": f"{i}.pgm", "caption": "x y"} for i in range(10)]
    path = write_lines(tmp_path / "m.jsonl", good[:4] + ["{not json"] + good[4:])
    report = []
    recs = load_manifest(path, report)
    assert len(recs) == 10
    assert [e.line for e in report] == [5]
    assert recs[0].split == "train"


@pytest.mark.parametrize("bad", [
    {"image": "a.pgm"}, {"image": "a.pgm", "caption": "  "}, {"caption": "x"},
    {"image": "a.pgm", "caption": "x", "labels": "mri"}, {"image": "a.pgm", "caption": "x", "split": "dev"}, "[1, 2]",
])
def test_each_kind_of_bad_line_is_reported(tmp_path, bad):
    report = []
    load_manifest(write_lines(tmp_path / "m.jsonl", [bad]), report, max_bad_fraction=1.0)
    assert len(report) == 1


def test_too_many_bad_lines_is_a_data_error(tmp_path):
    good = [{"image": "a.pgm", "caption": "x"}] * 8
    with pytest.raises(DataError):
        load_manifest(write_lines(tmp_path / "m.jsonl", good + ["oops", "oops"]))


def test_manifest_round_trip(tmp_path):
    recs = [CaptionRecord(str(tmp_path / "i" / "a.pgm"), "bright mass", ["mri"], "val", "r1", {"k": 1})]
    write_manifest(recs, tmp_path / "m.jsonl")
    assert json.loads((tmp_path / "m.jsonl").read_text())["image"] == "i/a.pgm"
    assert load_manifest(tmp_path / "m.jsonl") == recs


# ---------------------------------------------------------------------------
# filtering
# ---------------------------------------------------------------------------

def rec(caption, labels):
    return CaptionRecord("x.pgm", caption, labels)


SUBSET_CASES = [
    (rec("Large tumor in the left lobe", ["MRI", "brain", "head"]), True),
    (rec("No lesions seen", ["mri", "brain", "head", "t2"]), True),
    (rec("Large tumor", ["mri", "brain"]), False),
    (rec("Normal study", ["mri", "brain", "head"]), False),
    (rec("mass effect", ["ct", "brain", "head"]), False),
]


@pytest.mark.parametrize("record,kept", SUBSET_CASES)
def test_brain_subset_examples(record, kept):
    assert (filter_subset([record], BRAIN_ONLY) == [record]) is kept


def test_filter_is_idempotent_subset_and_order_preserving():
    records = [r for r, _ in SUBSET_CASES] * 3
    once = filter_subset(records, BRAIN_ONLY)
    assert filter_subset(once, BRAIN_ONLY) == once
    assert all(r in records for r in once)
    assert [r.caption for r in once] == [r.caption for r, k in SUBSET_CASES if k] * 3


def test_filter_spec_needs_a_criterion():
    with pytest.raises(ValueError):
        FilterSpec()
    assert filter_subset([rec("anything", ["a"])], FilterSpec(required_labels=("a",)))


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def test_preprocess_identity_at_target_size():
    raw = np.random.default_rng(0).integers(0, 256, (224, 224), dtype=np.uint8)
    out = preprocess_image(raw)
    assert out.shape == (224, 224, 1) and out.dtype == np.float32
    np.testing.assert_allclose(out[..., 0], (raw / 255.0 - 0.5) / 0.5, atol=1e-6)
    np.testing.assert_allclose(preprocess_image(raw, normalize=False)[..., 0], raw / 255.0, atol=1e-7)


def test_preprocess_center_crops_tall_images():
    raw = np.random.default_rng(1).random((448, 224))
    out = preprocess_image(raw, normalize=False)
    np.testing.assert_allclose(out[..., 0], raw[112:336], atol=1e-6)


def test_preprocess_downscales_and_replicates_channels():
    raw = np.full((100, 300), 77, dtype=np.uint8)
    out = preprocess_image(raw, target=50, channels=3, normalize=False)
    assert out.shape == (50, 50, 3)
    np.testing.assert_allclose(out, 77 / 255, atol=1e-6)


def test_preprocess_errors():
    for bad in (np.zeros((0, 5)), np.zeros(5), np.zeros((4, 4, 0))):
        with pytest.raises(DataError):
            preprocess_image(bad)
    with pytest.raises(DataError):
        preprocess_image(np.zeros((8, 8, 2)), 8, channels=3)


def test_resize_bilinear_preserves_linear_ramps():
    x = np.linspace(0, 1, 8)[None, :, None] * np.ones((8, 1, 1))
    up = resize_bilinear(x, 8, 16)
    # interior samples of a linear ramp stay on the line
    np.testing.assert_allclose(np.diff(up[0, 2:-2, 0]), np.diff(up[0, 2:-2, 0])[0], atol=1e-12)


def test_pgm_and_tensor_image_round_trip(tmp_path):
    img = np.random.default_rng(2).integers(0, 256, (5, 7), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n7 5\n255\n" + img.tobytes())
    np.testing.assert_array_equal(read_image(tmp_path / "c.pgm"), img)
    f = np.random.default_rng(3).random((4, 4, 1)).astype(np.float32)
    write_tensor_image(tmp_path / "t.bin", f)
    np.testing.assert_array_equal(read_image(tmp_path / "t.bin"), f)
    with pytest.raises(DataError):
        read_image(tmp_path / "x.png")
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(DataError):
        read_pgm(tmp_path / "p2.pgm")


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

def digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_synth_is_byte_deterministic(tmp_path):
    synth_generate(30, 7, tmp_path / "a")
    synth_generate(30, 7, tmp_path / "b")
    synth_generate(30, 8, tmp_path / "c")
    assert digest(tmp_path / "a") == digest(tmp_path / "b")
    assert digest(tmp_path / "a") != digest(tmp_path / "c")


@pytest.fixture(scope="module")
def synth200(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth200")
    return root, synth_generate(200, 0, root)


def test_synth_200_properties(synth200):
    root, records = synth200
    assert len(records) == 200
    assert all(len(r.caption.split()) <= 40 for r in records)
    assert {r.split: len(split_records(records, r.split)) for r in records} == {"train": 160, "val": 20, "test": 20}
    assert any(" and " in r.caption for r in records)
    assert load_manifest(root / "manifest.jsonl") == records


def test_captions_describe_the_rendered_shapes(synth200):
    _, records = synth200
    for r in records:
        assert parse_caption(r.caption) == r.meta["findings"]
        assert describe(parse_caption(r.caption)) == r.caption


def test_bright_findings_are_visible(synth200):
    _, records = synth200
    for r in records[:40]:
        img = read_pgm(r.image_path) / 255.0
        for f in r.meta["findings"]:
            cell = img[f["row"] * 21:(f["row"] + 1) * 21, f["col"] * 21:(f["col"] + 1) * 21]
            if f["intensity"] == "bright":
                assert cell.max() > 0.95


def test_parse_caption_rejects_free_text():
    with pytest.raises(ValueError):
        parse_caption("normal brain")


def test_synth_images_load_at_model_resolution(synth200):
    _, records = synth200
    imgs = load_images(records[:4], 64, 1)
    assert imgs.shape == (4, 64, 64, 1) and imgs.dtype == np.float32
    assert -1.0 <= imgs.min() and imgs.max() <= 1.0


def test_shuffle_captions_permutes_within_the_split(synth200):
    _, records = synth200
    out = shuffle_captions(records, np.random.default_rng(0))
    train_in = sorted(r.caption for r in split_records(records, "train"))
    assert sorted(r.caption for r in split_records(out, "train")) == train_in
    assert [r.caption for r in split_records(out, "val")] == [r.caption for r in split_records(records, "val")]
    assert sum(a.caption != b.caption for a, b in zip(records, out)) > 100
    assert [r.image_path for r in out] == [r.image_path for r in records]


def test_read_corpus_text_and_jsonl(tmp_path, synth200):
    root, records = synth200
    (tmp_path / "c.txt").write_text("one line\n\nsecond line\n")
    assert read_corpus(tmp_path / "c.txt") == ["one line", "second line"]
    assert read_corpus(root / "manifest.jsonl") == [r.caption for r in records]
