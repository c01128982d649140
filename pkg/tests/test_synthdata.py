"""Corpus generation, formats, and splits."""

import filecmp
from pathlib import Path

import numpy as np
import pytest

from ofoh.errors import ContractError, DataError
from ofoh.synthdata import (P_PARTS, RenderedRecord, generate_dataset,
                            load_dataset, load_index, load_manifest,
                            load_record, read_pgm, read_ppm, split_dataset,
                            write_ppm)

SMALL = dict(n_ids=6, imgs_per_id=5, n_cameras=3, occlusion_rate=0.4,
             h=32, w=16, seed=21)


@pytest.fixture(scope="module")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    manifest = generate_dataset(out, **SMALL)
    return out, manifest


class TestGeneration:
    def test_record_count(self, small_corpus):
        out, manifest = small_corpus
        assert manifest["n_records"] == 30
        assert len(load_index(out)) == 30
        assert len(list((out / "images").glob("*.ppm"))) == 30

    def test_zero_occlusion_rate(self, tmp_path):
        generate_dataset(tmp_path / "d", **{**SMALL, "occlusion_rate": 0.0})
        records = load_dataset(tmp_path / "d")
        assert all(not r.occluded for r in records)

    def test_occluded_fraction(self, small_corpus):
        out, _ = small_corpus
        records = load_dataset(out)
        assert sum(r.occluded for r in records) == round(0.4 * 30)

    def test_byte_identical_regeneration(self, small_corpus, tmp_path):
        out, _ = small_corpus
        again = tmp_path / "again"
        generate_dataset(again, **SMALL)
        for rel in sorted(p.relative_to(out)
                          for p in out.rglob("*") if p.is_file()):
            assert filecmp.cmp(out / rel, again / rel, shallow=False), rel

    def test_mask_reflects_unoccluded_body(self, small_corpus, tmp_path):
        # occluders change pixels, never the stored part labels
        out, _ = small_corpus
        clean = tmp_path / "clean"
        generate_dataset(clean, **{**SMALL, "occlusion_rate": 0.0})
        occluded_any = False
        for row_a, row_b in zip(load_index(out), load_index(clean)):
            rec_a = load_record(out, row_a)
            rec_b = load_record(clean, row_b)
            np.testing.assert_array_equal(rec_a.part_mask, rec_b.part_mask)
            if rec_a.occluded:
                occluded_any = True
                assert not np.array_equal(rec_a.image, rec_b.image)
            else:
                np.testing.assert_array_equal(rec_a.image, rec_b.image)
        assert occluded_any

    def test_every_part_rendered(self, small_corpus):
        out, _ = small_corpus
        for r in load_dataset(out):
            assert set(np.unique(r.part_mask)) == set(range(P_PARTS + 1))

    def test_identifiability_floor_recorded(self, small_corpus):
        _, manifest = small_corpus
        rank1 = float(manifest["identifiability_rank1"])
        chance = float(manifest["identifiability_chance"])
        assert rank1 >= 3.0 * chance

    def test_bad_params(self, tmp_path):
        with pytest.raises(ContractError):
            generate_dataset(tmp_path / "x", **{**SMALL, "n_ids": 1})
        with pytest.raises(ContractError):
            generate_dataset(tmp_path / "x", **{**SMALL, "occlusion_rate": 1.5})


class TestRoundTrip:
    def test_pixels_bit_exact(self, small_corpus):
        out, _ = small_corpus
        for row in load_index(out)[:5]:
            rec = load_record(out, row)
            raw = read_ppm(out / row["relative_path"])
            np.testing.assert_array_equal(rec.image,
                                          raw.astype(np.float64) / 255.0)

    def test_mask_labels_bounded(self, small_corpus):
        out, _ = small_corpus
        for row in load_index(out):
            mask = read_pgm(out / row["mask_path"])
            assert mask.max() <= P_PARTS

    def test_corrupt_image_named(self, small_corpus, tmp_path):
        out, _ = small_corpus
        row = dict(load_index(out)[0])
        bad = tmp_path / "bad"
        (bad / "images").mkdir(parents=True)
        (bad / "masks").mkdir()
        (bad / row["relative_path"]).write_bytes(b"P6\n4 4\n255\nxx")
        (bad / row["mask_path"]).write_bytes(b"P5\n4 4\n255\n" + b"\0" * 16)
        with pytest.raises(DataError, match="truncated"):
            load_record(bad, row)

    def test_wrong_magic(self, tmp_path):
        p = tmp_path / "f.ppm"
        p.write_bytes(b"P3\n1 1\n255\n\0\0\0")
        with pytest.raises(DataError, match="not a P6"):
            read_ppm(p)

    def test_ppm_writer_layout(self, tmp_path):
        raw = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
        write_ppm(tmp_path / "t.ppm", raw)
        data = (tmp_path / "t.ppm").read_bytes()
        assert data.startswith(b"P6\n2 2\n255\n")
        np.testing.assert_array_equal(read_ppm(tmp_path / "t.ppm"), raw)


def _toy_records(n_ids=4, imgs=6, cams=3):
    recs = []
    for i in range(n_ids):
        for j in range(imgs):
            recs.append(RenderedRecord(
                image=np.zeros((4, 4, 3)), part_mask=np.ones((4, 4), np.uint8),
                identity=i, camera=(i + j) % cams, occluded=False,
                split="train"))
    return recs


class TestSplit:
    def test_half_identities_each_side(self, small_corpus):
        out, _ = small_corpus
        records = load_dataset(out)
        train_ids = {r.identity for r in records if r.split == "train"}
        test_ids = {r.identity for r in records if r.split != "train"}
        assert len(train_ids) == 3 and len(test_ids) == 3
        assert not train_ids & test_ids

    def test_every_query_has_cross_camera_match(self, small_corpus):
        out, _ = small_corpus
        records = load_dataset(out)
        gallery = [r for r in records if r.split == "gallery"]
        for q in (r for r in records if r.split == "query"):
            assert any(g.identity == q.identity and g.camera != q.camera
                       for g in gallery)

    def test_split_fraction(self):
        recs = split_dataset(_toy_records(), query_frac=0.3, seed=1)
        test_ids = {r.identity for r in recs if r.split != "train"}
        for i in test_ids:
            n_q = sum(1 for r in recs if r.identity == i and r.split == "query")
            assert n_q == 2   # round(0.3 * 6)

    def test_single_camera_identity_rejected(self):
        recs = _toy_records(cams=1)
        with pytest.raises(ContractError, match="identity 0"):
            split_dataset(recs, query_frac=0.3, seed=0)

    def test_manifest_loads(self, small_corpus):
        out, _ = small_corpus
        manifest = load_manifest(out)
        assert manifest["n_ids"] == "6"
        assert float(manifest["identifiability_rank1"]) >= 0.0
