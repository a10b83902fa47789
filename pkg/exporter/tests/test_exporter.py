"""Exporter schema conformance, determinism and validation."""

import json

import pytest

from mlm_exporter import (
    ExportJob,
    SchemaError,
    export_logits,
    read_masked_instances,
    validate,
)
from mlm_exporter.cli import main


@pytest.fixture
def masks_file(tmp_path):
    path = tmp_path / "masks.jsonl"
    records = [
        {"id": "a", "tokens": ["they", "were", "hit", "by", "[MASK]", "now"],
         "mask_index": 4, "original": ["fire"]},
        {"id": "b", "tokens": ["[MASK]", "starts", "it"], "mask_index": 0,
         "original": ["bomb"]},
        {"id": "c", "tokens": ["x", "[MASK]", "y"], "mask_index": 1},
    ]
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")
    return path


class TestReadMaskedInstances:
    def test_reads_all(self, masks_file):
        records = read_masked_instances(masks_file)
        assert [r.id for r in records] == ["a", "b", "c"]

    def test_mask_literal_required(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(
            json.dumps({"id": "a", "tokens": ["x"], "mask_index": 0}) + "\n",
            encoding="utf-8",
        )
        with pytest.raises(SchemaError, match="MASK"):
            read_masked_instances(path)

    def test_duplicate_ids(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        record = json.dumps({"id": "a", "tokens": ["[MASK]"], "mask_index": 0})
        path.write_text(record + "\n" + record + "\n", encoding="utf-8")
        with pytest.raises(SchemaError, match="duplicate"):
            read_masked_instances(path)

    def test_line_numbers_in_errors(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = json.dumps({"id": "a", "tokens": ["[MASK]"], "mask_index": 0})
        path.write_text(good + "\nnope\n", encoding="utf-8")
        with pytest.raises(SchemaError, match=":2:"):
            read_masked_instances(path)


class TestExport:
    def test_schema_and_sorting(self, masks_file, tmp_path):
        out = tmp_path / "logits.jsonl"
        count = export_logits(ExportJob(str(masks_file), "hash", 5, str(out)))
        assert count == 3
        lines = out.read_text().strip().splitlines()
        assert len(lines) == 3
        for line in lines:
            record = json.loads(line)
            logits = [c["logit"] for c in record["candidates"]]
            assert logits == sorted(logits, reverse=True)
            tokens = [c["token"] for c in record["candidates"]]
            assert len(set(tokens)) == len(tokens)
            assert len(tokens) <= 5

    def test_original_surface_removed(self, masks_file, tmp_path):
        out = tmp_path / "logits.jsonl"
        export_logits(ExportJob(str(masks_file), "hash", 50, str(out)))
        for line in out.read_text().strip().splitlines():
            record = json.loads(line)
            tokens = {c["token"] for c in record["candidates"]}
            if record["id"] == "a":
                assert "fire" not in tokens
            if record["id"] == "b":
                assert "bomb" not in tokens

    def test_ids_one_to_one(self, masks_file, tmp_path):
        out = tmp_path / "logits.jsonl"
        export_logits(ExportJob(str(masks_file), "hash", 3, str(out)))
        out_ids = [json.loads(l)["id"] for l in out.read_text().strip().splitlines()]
        in_ids = [r.id for r in read_masked_instances(masks_file)]
        assert out_ids == in_ids

    def test_byte_stable(self, masks_file, tmp_path):
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        export_logits(ExportJob(str(masks_file), "hash", 5, str(a)))
        export_logits(ExportJob(str(masks_file), "hash", 5, str(b)))
        assert a.read_bytes() == b.read_bytes()

    def test_top_n_one(self, masks_file, tmp_path):
        out = tmp_path / "logits.jsonl"
        export_logits(ExportJob(str(masks_file), "hash", 1, str(out)))
        for line in out.read_text().strip().splitlines():
            assert len(json.loads(line)["candidates"]) == 1

    def test_top_n_validated(self, masks_file, tmp_path):
        with pytest.raises(SchemaError, match="top_n"):
            ExportJob(str(masks_file), "hash", 0, str(tmp_path / "x"))

    def test_unknown_model_fails_cleanly(self, masks_file, tmp_path):
        job = ExportJob(str(masks_file), "no/such-model-404", 3, str(tmp_path / "x"))
        with pytest.raises(SchemaError, match="model load failure"):
            export_logits(job)


class TestValidate:
    def test_valid_file(self, masks_file, tmp_path):
        out = tmp_path / "logits.jsonl"
        export_logits(ExportJob(str(masks_file), "hash", 5, str(out)))
        report = validate(out)
        assert report.ok
        assert report.records == 3

    def test_unsorted_flagged(self, tmp_path):
        path = tmp_path / "logits.jsonl"
        path.write_text(
            json.dumps({"id": "a", "candidates": [
                {"token": "x", "logit": 0.0}, {"token": "y", "logit": 1.0}]}) + "\n",
            encoding="utf-8",
        )
        assert validate(path).sort_violations == 1

    def test_duplicate_surface_flagged(self, tmp_path):
        path = tmp_path / "logits.jsonl"
        path.write_text(
            json.dumps({"id": "a", "candidates": [
                {"token": "x", "logit": 1.0}, {"token": "x", "logit": 0.0}]}) + "\n",
            encoding="utf-8",
        )
        assert validate(path).duplicate_surfaces == 1


class TestCli:
    def test_export_and_validate(self, masks_file, tmp_path, capsys):
        out = tmp_path / "logits.jsonl"
        assert main(["export", "--input", str(masks_file),
                     "--output", str(out), "--model", "hash", "--top-n", "4"]) == 0
        assert main(["validate", str(out)]) == 0
        captured = capsys.readouterr().out
        assert "0 sort violations" in captured

    def test_validate_bad_file_nonzero(self, tmp_path):
        path = tmp_path / "logits.jsonl"
        path.write_text("not json\n", encoding="utf-8")
        assert main(["validate", str(path)]) == 1
