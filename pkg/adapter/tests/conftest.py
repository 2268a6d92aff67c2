"""Fixture helpers: build pipeline-format manifests and depth maps directly.

The adapter consumes the pipeline only through its file formats, so the
fixtures write those formats by hand rather than importing the pipeline.
"""

import json
import os

import numpy as np
import pytest
from PIL import Image


def make_record(image_id, shape_id, view, status="rendered"):
    return {
        "image_id": image_id,
        "shape_id": shape_id,
        "view_index": view,
        "image_index": 0,
        "beta_ref": f"shapes/{shape_id}.beta",
        "camera": {"distance": 250.0, "fov_degrees": 72.4, "resolution": 64},
        "depth_image_path": f"depth/{shape_id}_v{view}.png",
        "prompt_positive": f"prompt for {image_id}, studio portrait",
        "prompt_negative": "artefacts, low resolution",
        "race": "White",
        "gender": "woman",
        "occlusion": "none",
        "generation_seed": abs(hash(image_id)) % (2 ** 31),
        "inference_steps": 15,
        "images_per_prompt": 5,
        "split": "train",
        "image_path": "",
        "embedding_path": "",
        "status": status,
        "error_note": "",
    }


def write_manifest(records, path):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def build_workdir(root, n_records, status="rendered"):
    """Workdir with depth PNGs and a manifest of n_records records."""
    os.makedirs(os.path.join(root, "depth"), exist_ok=True)
    records = []
    rng = np.random.default_rng(0)
    made_depth = set()
    for i in range(n_records):
        shape_id = f"s{i // 2:06d}"
        view = i % 2
        rec = make_record(f"{shape_id}_v{view}_i0", shape_id, view, status=status)
        depth_path = os.path.join(root, rec["depth_image_path"])
        if depth_path not in made_depth:
            pixels = rng.integers(0, 256, size=(64, 64), dtype=np.uint8)
            pixels[:8, :8] = 0  # background corner
            Image.fromarray(pixels, mode="L").save(depth_path)
            made_depth.add(depth_path)
        records.append(rec)
    manifest_path = os.path.join(root, "manifest.jsonl")
    write_manifest(records, manifest_path)
    return manifest_path


@pytest.fixture
def workdir(tmp_path):
    return str(tmp_path)
