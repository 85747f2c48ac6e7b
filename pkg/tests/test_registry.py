"""Run registry: append-only records, lineage, concurrent appends."""

import json
import multiprocessing
import os

import pytest

from ctsynth.registry import RegistryError, RunRecord, RunRegistry, new_run_id


def make_record(run_id, outputs=(), command="segment"):
    return RunRecord(
        run_id=run_id,
        command=command,
        config_hash="c" * 64,
        input_hashes={"train": "a" * 64},
        outputs=list(outputs),
        started_at=1.0,
        finished_at=2.0,
        outcome="ok",
    )


class TestRecords:
    def test_append_then_load_round_trips(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        rec = make_record("r1", outputs=["a.tsv"])
        reg.append(rec)
        assert reg.load() == [rec]

    def test_appends_accumulate_in_order(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        for i in range(5):
            reg.append(make_record(f"r{i}"))
        assert [r.run_id for r in reg.load()] == [f"r{i}" for i in range(5)]

    def test_get_finds_by_id(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        reg.append(make_record("r1"))
        reg.append(make_record("r2", command="train"))
        assert reg.get("r2").command == "train"

    def test_get_unknown_id_raises(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        reg.append(make_record("r1"))
        with pytest.raises(RegistryError, match="r9"):
            reg.get("r9")

    def test_empty_registry_loads_empty(self, tmp_path):
        assert RunRegistry(str(tmp_path / "none.jsonl")).load() == []

    def test_malformed_line_raises_with_line_number(self, tmp_path):
        path = tmp_path / "runs.jsonl"
        reg = RunRegistry(str(path))
        reg.append(make_record("r1"))
        with open(path, "a", encoding="utf-8") as fh:
            fh.write("{not json\n")
        with pytest.raises(RegistryError, match="line 2"):
            reg.load()

    def test_records_are_json_lines(self, tmp_path):
        path = tmp_path / "runs.jsonl"
        RunRegistry(str(path)).append(make_record("r1"))
        payload = json.loads(path.read_text().strip())
        assert payload["run_id"] == "r1"
        assert payload["outcome"] == "ok"


class TestRunIds:
    def test_ids_are_unique_and_stamped(self):
        ids = {new_run_id() for _ in range(50)}
        assert len(ids) == 50
        for rid in ids:
            stamp, _, suffix = rid.rpartition("-")
            assert len(suffix) == 6
            assert len(stamp) == 15


class TestLineage:
    def test_each_artifact_maps_to_its_run(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        reg.append(make_record("r1", outputs=[str(tmp_path / "a.tsv")]))
        reg.append(make_record("r2", outputs=[str(tmp_path / "b.tsv")]))
        owners = reg.lineage()
        assert owners[str(tmp_path / "a.tsv")] == "r1"
        assert owners[str(tmp_path / "b.tsv")] == "r2"

    def test_doubly_claimed_artifact_raises(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        shared = str(tmp_path / "a.tsv")
        reg.append(make_record("r1", outputs=[shared]))
        reg.append(make_record("r2", outputs=[shared]))
        with pytest.raises(RegistryError, match="claimed by runs"):
            reg.lineage()

    def test_verify_outputs_reports_missing_paths(self, tmp_path):
        reg = RunRegistry(str(tmp_path / "runs.jsonl"))
        present = tmp_path / "present.tsv"
        present.write_text("x\n")
        reg.append(make_record("r1", outputs=[str(present), str(tmp_path / "gone.tsv")]))
        assert reg.verify_outputs("r1") == [str(tmp_path / "gone.tsv")]


def _append_worker(path, worker):
    reg = RunRegistry(path)
    for i in range(20):
        reg.append(make_record(f"w{worker}-{i}"))


class TestConcurrency:
    def test_parallel_appends_lose_nothing(self, tmp_path):
        path = str(tmp_path / "runs.jsonl")
        procs = [
            multiprocessing.Process(target=_append_worker, args=(path, w))
            for w in range(4)
        ]
        for p in procs:
            p.start()
        for p in procs:
            p.join()
        records = RunRegistry(path).load()
        assert len(records) == 80
        assert len({r.run_id for r in records}) == 80
