"""Manifest file access for the adapter.

The manifest is a JSON-Lines file owned by the upstream pipeline; the
adapter treats it as an external format. Records round-trip with their
key order preserved, and the adapter only ever rewrites three fields:
image_path, status, and error_note. Writes are atomic (temp file plus
rename) under the same <path>.lock advisory-lock convention the pipeline
uses.
"""

from __future__ import annotations

import json
import os
import time

STATUS_PLANNED = "planned"
STATUS_RENDERED = "rendered"
STATUS_GENERATED = "generated"
STATUS_EMBEDDED = "embedded"

ADAPTER_FIELDS = {"image_path", "status", "error_note"}


class AdapterManifestError(ValueError):
    pass


class ManifestLock:
    def __init__(self, path: str, timeout: float = 10.0):
        self.lock_path = path + ".lock"
        self.timeout = timeout
        self._fd = None

    def __enter__(self):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                self._fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                os.write(self._fd, str(os.getpid()).encode())
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise AdapterManifestError(
                        f"timed out waiting for lock {self.lock_path}")
                time.sleep(0.05)

    def __exit__(self, *exc):
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None
        try:
            os.remove(self.lock_path)
        except FileNotFoundError:
            pass


def load_records(path: str) -> list[dict]:
    records = []
    seen = set()
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise AdapterManifestError(f"line {lineno}: invalid JSON ({e.msg})") from e
            for key in ("image_id", "status", "depth_image_path",
                        "prompt_positive", "prompt_negative", "generation_seed",
                        "inference_steps"):
                if key not in rec:
                    raise AdapterManifestError(f"line {lineno}: record missing {key!r}")
            if rec["image_id"] in seen:
                raise AdapterManifestError(f"line {lineno}: duplicate image_id")
            seen.add(rec["image_id"])
            records.append(rec)
    return records


def save_records(records: list[dict], path: str) -> None:
    tmp = path + ".tmp"
    with ManifestLock(path):
        with open(tmp, "w", encoding="utf-8", newline="\n") as f:
            for rec in records:
                f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")))
                f.write("\n")
        os.replace(tmp, path)


def update_record(record: dict, **fields) -> dict:
    """Copy of record with only adapter-owned fields changed."""
    illegal = set(fields) - ADAPTER_FIELDS
    if illegal:
        raise AdapterManifestError(f"adapter may not mutate {sorted(illegal)}")
    out = dict(record)
    out.update(fields)
    return out
