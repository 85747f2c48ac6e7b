"""Append-only run registry: one JSON line per completed command.

Each record ties a run id to the command, the resolved config hash, the
input manifest hashes, and the artifact paths it produced, so lineage
can be replayed after the fact.  Appends take an exclusive lock on the
registry file, which makes concurrent grid cells safe as long as they
write to disjoint output directories.
"""

from __future__ import annotations

import fcntl
import json
import os
import secrets
import time
from dataclasses import asdict, dataclass, field


class RegistryError(RuntimeError):
    """Missing registry file, malformed record, or unknown run id."""


@dataclass(frozen=True)
class RunRecord:
    run_id: str
    command: str
    config_hash: str
    input_hashes: dict[str, str] = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    started_at: float = 0.0
    finished_at: float = 0.0
    outcome: str = "ok"
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def new_run_id(now: float | None = None) -> str:
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime(now or time.time()))
    return f"{stamp}-{secrets.token_hex(3)}"


class RunRegistry:
    def __init__(self, path: str):
        self.path = path

    def append(self, record: RunRecord) -> None:
        os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
        line = record.to_json() + "\n"
        with open(self.path, "a", encoding="utf-8") as fh:
            fcntl.flock(fh.fileno(), fcntl.LOCK_EX)
            try:
                fh.write(line)
                fh.flush()
                os.fsync(fh.fileno())
            finally:
                fcntl.flock(fh.fileno(), fcntl.LOCK_UN)

    def load(self) -> list[RunRecord]:
        if not os.path.exists(self.path):
            return []
        records = []
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    payload = json.loads(line)
                    records.append(RunRecord(**payload))
                except (json.JSONDecodeError, TypeError) as exc:
                    raise RegistryError(
                        f"malformed registry line {lineno} in {self.path!r}: {exc}"
                    ) from exc
        return records

    def get(self, run_id: str) -> RunRecord:
        for record in self.load():
            if record.run_id == run_id:
                return record
        raise RegistryError(f"no run record with id {run_id!r} in {self.path!r}")

    def lineage(self) -> dict[str, str]:
        """Map every registered artifact path to the run id that made it.

        A path claimed by more than one run is a lineage violation and
        raises, since each artifact must be reachable from exactly one
        record.
        """
        owners: dict[str, str] = {}
        for record in self.load():
            for path in record.outputs:
                norm = os.path.abspath(path)
                if norm in owners and owners[norm] != record.run_id:
                    raise RegistryError(
                        f"artifact {norm!r} claimed by runs "
                        f"{owners[norm]!r} and {record.run_id!r}"
                    )
                owners[norm] = record.run_id
        return owners

    def verify_outputs(self, run_id: str) -> list[str]:
        """Paths recorded for the run that are missing on disk."""
        record = self.get(run_id)
        return [path for path in record.outputs if not os.path.exists(path)]
