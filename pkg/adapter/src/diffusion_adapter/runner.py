"""Adapter run loop: rendered records in, generated images out.

Records already at generated (or beyond) are never touched, so a rerun
performs zero backend calls, and an interrupted run resumed later
converges to the same final manifest as an uninterrupted one. Progress
is checkpointed to the manifest periodically and once at the end.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from . import manifest as mf
from .backends import BackendError, BackendSpec, GenerationRequest, make_backend


@dataclass
class AdapterSummary:
    generated: int = 0
    skipped: int = 0
    failed: int = 0
    backend_calls: int = 0
    backend: str = ""  # identity of the service that produced the images
    errors: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "ok": True,
            "generated": self.generated,
            "skipped": self.skipped,
            "failed": self.failed,
            "backend_calls": self.backend_calls,
            "backend": self.backend,
            "errors": self.errors,
        }


def run_adapter(
    manifest_path: str,
    spec: BackendSpec,
    jobs: int = 1,
    checkpoint_every: int = 25,
    backend=None,
) -> AdapterSummary:
    """Generate an image for every record at status rendered.

    ``backend`` may be injected for tests; by default it is built from the
    spec. Paths in the manifest are resolved relative to its directory.
    """
    spec.validate()
    workdir = os.path.dirname(os.path.abspath(manifest_path))
    records = mf.load_records(manifest_path)
    backend = backend or make_backend(spec)
    identity = spec.kind if spec.kind == "mock" else f"http:{spec.url}"
    summary = AdapterSummary(backend=identity)

    todo = []
    for i, rec in enumerate(records):
        if rec["status"] == mf.STATUS_RENDERED:
            todo.append(i)
        else:
            summary.skipped += 1
    if not todo:
        return summary

    os.makedirs(os.path.join(workdir, "images"), exist_ok=True)

    def generate_one(index: int):
        rec = records[index]
        depth_path = os.path.join(workdir, rec["depth_image_path"])
        with open(depth_path, "rb") as f:
            depth_png = f.read()
        request = GenerationRequest(
            prompt=rec["prompt_positive"],
            negative_prompt=rec["prompt_negative"],
            seed=int(rec["generation_seed"]),
            steps=int(rec.get("inference_steps", spec.inference_steps)),
            depth_png=depth_png,
        )
        return backend.generate(request)

    def apply_result(index: int, image_bytes: bytes | None, error: str | None):
        rec = records[index]
        if image_bytes is None:
            records[index] = mf.update_record(rec, error_note=error or "")
            summary.failed += 1
            summary.errors.append(f"{rec['image_id']}: {error}")
            return
        rel_path = os.path.join("images", f"{rec['image_id']}.png")
        with open(os.path.join(workdir, rel_path), "wb") as f:
            f.write(image_bytes)
        records[index] = mf.update_record(
            rec, image_path=rel_path, status=mf.STATUS_GENERATED, error_note="")
        summary.generated += 1

    done_since_checkpoint = 0
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            for index, result in zip(todo, pool.map(
                    lambda i: _safe_generate(generate_one, i), todo)):
                apply_result(index, *result)
                done_since_checkpoint += 1
                if done_since_checkpoint >= checkpoint_every:
                    mf.save_records(records, manifest_path)
                    done_since_checkpoint = 0
    else:
        for index in todo:
            apply_result(index, *_safe_generate(generate_one, index))
            done_since_checkpoint += 1
            if done_since_checkpoint >= checkpoint_every:
                mf.save_records(records, manifest_path)
                done_since_checkpoint = 0

    summary.backend_calls = getattr(backend, "calls", -1)
    mf.save_records(records, manifest_path)
    return summary


def _safe_generate(fn, index: int):
    try:
        return fn(index), None
    except (BackendError, OSError) as e:
        return None, str(e)
