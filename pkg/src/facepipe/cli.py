"""Pipeline command-line interface.

One executable with a subcommand per stage: make-toy-model, gen-shapes,
plan, render, embed, train, evaluate, report. Stage state lives only in
the manifest's status fields; all randomness flows from --seed through
named substreams, so a whole run is reproducible byte for byte. Every
command prints exactly one machine-readable JSON line on stdout and
exits 0 iff that line has "ok": true.

Flags can come from a --config JSON file; explicit flags win. The
workdir may also come from the FACEPIPE_WORKDIR environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import embeddings as emb
from . import evaluator as ev
from . import manifest as mf
from . import meshio
from . import morphable as mm
from . import render as rd
from . import trainer as tr
from .seeds import substream_rng, substream_seed


class CommandError(RuntimeError):
    pass


def _workdir_path(workdir: str, rel: str) -> str:
    return os.path.join(workdir, rel)


def _require(path: str, hint: str) -> str:
    if not os.path.exists(path):
        raise CommandError(f"{path} not found; run `{hint}` first")
    return path


def _load_manifest(workdir: str, hint: str = "plan") -> tuple[str, list[mf.ImageRecord]]:
    path = _require(_workdir_path(workdir, "manifest.jsonl"), hint)
    return path, mf.load_manifest(path)


def _require_status(records: list[mf.ImageRecord], needed: str, command: str) -> None:
    order = mf.STATUS_ORDER
    for rec in records:
        if order.index(rec.status) < order.index(needed):
            raise CommandError(
                f"cannot run `{command}`: record {rec.image_id} has status "
                f"{rec.status!r} but {needed!r} is required; run the earlier stage first"
            )


# ---------------------------------------------------------------------------
# Commands. Each takes the resolved options dict and returns the summary.

def cmd_make_toy_model(opt: dict) -> dict:
    out = opt["out"]
    if os.path.exists(out) and not opt["force"]:
        raise CommandError(f"{out} exists; pass --force to overwrite")
    model = mm.make_toy_model(
        seed=opt["seed"],
        n_vertices=opt["vertices"],
        n_shape=opt["shape_dims"],
        n_expr=opt["expr_dims"],
    )
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    mm.save_model(model, out)
    landmarks = ev.pick_landmark_indices(model)
    lm_path = os.path.splitext(out)[0] + ".landmarks.json"
    meshio.write_landmark_indices(
        lm_path, {f"lm{j}": int(v) for j, v in enumerate(landmarks)}
    )
    return {
        "ok": True, "model": out, "landmarks": lm_path,
        "n_vertices": model.n_vertices, "n_shape": model.n_shape,
    }


def cmd_gen_shapes(opt: dict) -> dict:
    model = mm.load_model(_require(opt["model"], "make-toy-model"))
    store = mf.ShapeStore(_workdir_path(opt["workdir"], "shapes"))
    if store.exists() and not opt["force"]:
        raise CommandError(f"shape store {store.root} exists; pass --force to regenerate")
    betas = {}
    for i in range(opt["n_shapes"]):
        shape_id = mf.shape_id_name(i)
        rng = substream_rng(opt["seed"], "gen-shapes", shape_id)
        betas[shape_id] = mm.sample_shape(rng, opt["sigma"], 1, model)[0].beta
    store.write(betas)
    return {"ok": True, "store": store.root, "n_shapes": len(betas)}


def cmd_plan(opt: dict) -> dict:
    path = _workdir_path(opt["workdir"], "manifest.jsonl")
    if os.path.exists(path) and not opt["force"]:
        raise CommandError(f"{path} exists; pass --force to re-plan")
    plan = mf.DatasetPlan(
        n_shapes=opt["n_shapes"],
        views_per_shape=opt["views"],
        images_per_view=opt["images"],
        occlusion_rate=opt["occlusion_rate"],
        races=tuple(opt["races"]),
        genders=tuple(opt["genders"]),
        occlusions=tuple(opt["occlusions"]),
        split_fraction=opt["split_fraction"],
        master_seed=opt["seed"],
        camera_distance_min=opt["distance_min"],
        camera_distance_max=opt["distance_max"],
        resolution=opt["resolution"],
    )
    records = mf.plan_dataset(plan)
    os.makedirs(opt["workdir"], exist_ok=True)
    mf.save_manifest(records, path)
    return {"ok": True, "manifest": path, "n_records": len(records),
            "n_shapes": plan.n_shapes}


def cmd_render(opt: dict) -> dict:
    workdir = opt["workdir"]
    path, records = _load_manifest(workdir)
    model = mm.load_model(_require(opt["model"], "make-toy-model"))
    store = mf.ShapeStore(_workdir_path(workdir, "shapes"))
    _require(os.path.join(store.root, mf.ShapeStore.INDEX_NAME), "gen-shapes")
    os.makedirs(_workdir_path(workdir, "depth"), exist_ok=True)

    groups: dict[tuple[str, int], list[mf.ImageRecord]] = {}
    for rec in records:
        groups.setdefault((rec.shape_id, rec.view_index), []).append(rec)

    def needs_render(group: list[mf.ImageRecord]) -> bool:
        png = _workdir_path(workdir, group[0].depth_image_path)
        done = all(r.status != mf.STATUS_PLANNED for r in group)
        if not done or not os.path.exists(png):
            return True
        if opt["verify"]:
            try:
                rd.import_png(png)
            except Exception:
                return True
        return False

    todo = [key for key, group in groups.items() if needs_render(group)]
    meshes: dict[str, np.ndarray] = {}

    def render_group(key: tuple[str, int]) -> None:
        group = groups[key]
        rec = group[0]
        shape_id = rec.shape_id
        if shape_id not in meshes:
            meshes[shape_id] = mm.decode_shape(model, store.load_beta(shape_id))
        camera = rd.Camera(
            fov_degrees=rec.camera["fov_degrees"],
            distance=rec.camera["distance"],
            resolution=opt["resolution"] or rec.camera["resolution"],
        )
        buffer = rd.render_depth(mm.Mesh(meshes[shape_id], model.triangles), camera)
        noise_rng = None
        if opt["noise_background"]:
            noise_rng = substream_rng(opt["seed"], "noise-bg", shape_id, rec.view_index)
        image = rd.normalize_depth(buffer, noise_rng=noise_rng)
        rd.export_png(image, _workdir_path(workdir, rec.depth_image_path))
        if opt["save_buffers"]:
            raw = os.path.splitext(rec.depth_image_path)[0] + ".dbuf"
            rd.save_depth_buffer(buffer, _workdir_path(workdir, raw))

    # Meshes are cached per shape; prefill sequentially so worker threads
    # only read the cache.
    for key in todo:
        sid = key[0]
        if sid not in meshes:
            meshes[sid] = mm.decode_shape(model, store.load_beta(sid))
    if opt["jobs"] > 1 and todo:
        with ThreadPoolExecutor(max_workers=opt["jobs"]) as pool:
            list(pool.map(render_group, todo))
    else:
        for key in todo:
            render_group(key)

    rendered_keys = set(todo)
    updated = 0
    new_records = []
    for rec in records:
        if (rec.shape_id, rec.view_index) in rendered_keys and rec.status == mf.STATUS_PLANNED:
            rec = mf.advance_status(rec, mf.STATUS_RENDERED)
            updated += 1
        new_records.append(rec)
    mf.save_manifest(new_records, path)
    return {"ok": True, "rendered": len(todo), "skipped": len(groups) - len(todo),
            "records_updated": updated}


def cmd_embed(opt: dict) -> dict:
    workdir = opt["workdir"]
    path, records = _load_manifest(workdir)
    _require_status(records, mf.STATUS_RENDERED, "embed")
    emb_rel = "embeddings.bin"
    emb_path = _workdir_path(workdir, emb_rel)
    if all(r.status == mf.STATUS_EMBEDDED for r in records) and os.path.exists(emb_path):
        return {"ok": True, "embedded": 0, "skipped": len(records), "path": emb_path}

    if opt["mode"] == "synthetic":
        model = mm.load_model(_require(opt["model"], "make-toy-model"))
        store = mf.ShapeStore(_workdir_path(workdir, "shapes"))
        _require(os.path.join(store.root, mf.ShapeStore.INDEX_NAME), "gen-shapes")
        embedder = emb.make_synthetic_embedder(
            seed=substream_seed(opt["seed"], "embedder"),
            n_beta=model.n_shape,
            nuisance_dims=opt["nuisance_dims"],
            nuisance_scale=opt["nuisance_scale"],
        )
        betas: dict[str, np.ndarray] = {}
        for rec in records:
            if rec.shape_id not in betas:
                betas[rec.shape_id] = store.load_beta(rec.shape_id)

        def embed_one(rec: mf.ImageRecord) -> emb.Embedding:
            return emb.synth_embed(embedder, betas[rec.shape_id], rec.image_id)

        if opt["jobs"] > 1:
            with ThreadPoolExecutor(max_workers=opt["jobs"]) as pool:
                vectors = list(pool.map(embed_one, records))
        else:
            vectors = [embed_one(rec) for rec in records]
        emb.write_embeddings(vectors, emb_path)
    elif opt["mode"] == "import":
        if not opt["import_path"]:
            raise CommandError("--import-path is required with --mode import")
        imported = emb.read_embeddings(opt["import_path"])
        missing = [r.image_id for r in records if r.image_id not in imported]
        if missing:
            raise CommandError(
                f"imported container lacks {len(missing)} embeddings, first {missing[0]!r}"
            )
        emb.write_embeddings(
            [emb.Embedding(image_id=i, vector=v) for i, v in imported.items()], emb_path
        )
    else:
        raise CommandError(f"unknown embed mode {opt['mode']!r}")

    new_records = [
        replace(r, embedding_path=emb_rel, status=mf.STATUS_EMBEDDED)
        if r.status != mf.STATUS_EMBEDDED else r
        for r in records
    ]
    updated = sum(1 for a, b in zip(records, new_records) if a is not b)
    mf.save_manifest(new_records, path)
    return {"ok": True, "embedded": updated, "skipped": len(records) - updated,
            "path": emb_path}


def cmd_train(opt: dict) -> dict:
    workdir = opt["workdir"]
    net_path = _workdir_path(workdir, "network.bin")
    if os.path.exists(net_path) and not opt["force"]:
        return {"ok": True, "skipped": True, "network": net_path}
    path, records = _load_manifest(workdir)
    _require_status(records, mf.STATUS_EMBEDDED, "train")
    model = mm.load_model(_require(opt["model"], "make-toy-model"))
    embedding_set = emb.read_embeddings(
        _require(_workdir_path(workdir, "embeddings.bin"), "embed")
    )
    store = mf.ShapeStore(_workdir_path(workdir, "shapes"))
    betas = store.load_all()
    config = tr.TrainConfig(
        learning_rate=opt["learning_rate"],
        weight_decay=opt["weight_decay"],
        beta1=opt["beta1"],
        beta2=opt["beta2"],
        eps=opt["eps"],
        max_epochs=opt["max_epochs"],
        patience=opt["patience"],
        batch_size=opt["batch_size"],
        seed=opt["seed"],
    )
    mask = tr.RegionMask.from_model(model)
    hidden = tuple(opt["hidden"])
    network, history = tr.train(records, embedding_set, betas, model, mask, config,
                                hidden=hidden)
    tr.save_network(network, net_path)
    with open(_workdir_path(workdir, "history.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(history.to_csv())
    baseline = tr.zero_prediction_baseline(records, betas, model, mask)
    return {
        "ok": True, "network": net_path, "epochs": len(history.epochs),
        "best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss,
        "val_baseline": baseline,
    }


def _evaluate_manifest_mode(opt: dict) -> ev.EvalReport:
    workdir = opt["workdir"]
    _, records = _load_manifest(workdir)
    model = mm.load_model(_require(opt["model"], "make-toy-model"))
    network = tr.load_network(_require(_workdir_path(workdir, "network.bin"), "train"))
    if network.output_dim != model.n_shape:
        raise CommandError(
            f"network predicts {network.output_dim} coefficients, model has {model.n_shape}"
        )
    embedding_set = emb.read_embeddings(
        _require(_workdir_path(workdir, "embeddings.bin"), "embed")
    )
    store = mf.ShapeStore(_workdir_path(workdir, "shapes"))

    if opt["landmarks"]:
        indices = np.asarray(
            sorted(meshio.read_landmark_indices(opt["landmarks"]).values()),
            dtype=np.int64,
        )
    else:
        indices = ev.pick_landmark_indices(model)

    val = [r for r in records if r.split == mf.SPLIT_VAL]
    if not val:
        raise CommandError("manifest has no validation records")
    if opt["limit"]:
        val = val[: opt["limit"]]

    scale = model.unit_scale_mm
    preds, scans, scan_lms, ids = [], [], [], []
    gt_cache: dict[str, np.ndarray] = {}
    for rec in val:
        beta_pred = tr.forward(network, embedding_set.get(rec.image_id))
        pred_v = mm.decode_shape(model, beta_pred) * scale
        preds.append(mm.Mesh(pred_v, model.triangles))
        if rec.shape_id not in gt_cache:
            gt_cache[rec.shape_id] = mm.decode_shape(model, store.load_beta(rec.shape_id)) * scale
        scans.append(gt_cache[rec.shape_id])
        scan_lms.append(gt_cache[rec.shape_id][indices])
        ids.append(rec.image_id)
    return ev.evaluate(preds, scans, indices, scan_lms,
                       with_scale=not opt["no_scale"], image_ids=ids,
                       jobs=opt["jobs"])


def _evaluate_file_mode(opt: dict) -> ev.EvalReport:
    pred_dir, scan_dir = opt["pred_dir"], opt["scan_dir"]
    if not opt["landmarks"]:
        raise CommandError("--landmarks (model landmark indices JSON) is required")
    indices_by_name = meshio.read_landmark_indices(opt["landmarks"])
    stems = sorted(
        os.path.splitext(name)[0]
        for name in os.listdir(pred_dir)
        if name.lower().endswith((".obj", ".ply"))
    )
    if not stems:
        raise CommandError(f"no .obj or .ply predictions in {pred_dir}")
    preds, scans, scan_lms, ids = [], [], [], []
    indices = None
    scale = opt["pred_unit_scale"]
    for stem in stems:
        pred_path = next(
            os.path.join(pred_dir, stem + ext)
            for ext in (".obj", ".ply")
            if os.path.exists(os.path.join(pred_dir, stem + ext))
        )
        scan_path = next(
            (os.path.join(scan_dir, stem + ext) for ext in (".obj", ".ply")
             if os.path.exists(os.path.join(scan_dir, stem + ext))),
            None,
        )
        if scan_path is None:
            raise CommandError(f"no scan found for prediction {stem!r} in {scan_dir}")
        lm_path = os.path.join(scan_dir, stem + ".landmarks.json")
        if not os.path.exists(lm_path):
            raise CommandError(f"missing scan landmarks {lm_path}")
        verts, faces = meshio.load_scan(pred_path)
        if faces is None:
            raise CommandError(f"prediction {pred_path} has no faces")
        idx, pts = meshio.matched_landmarks(
            indices_by_name, meshio.read_landmark_points(lm_path)
        )
        if indices is None:
            indices = idx
        elif not np.array_equal(indices, idx):
            raise CommandError(
                f"scan {stem!r} matches a different landmark subset; all "
                "scans must carry the same landmark names"
            )
        preds.append(mm.Mesh(verts * scale, faces))
        scan_pts, _ = meshio.load_scan(scan_path)
        scans.append(scan_pts)
        scan_lms.append(pts)
        ids.append(stem)
    return ev.evaluate(preds, scans, indices, scan_lms,
                       with_scale=not opt["no_scale"], image_ids=ids,
                       jobs=opt["jobs"])


def cmd_evaluate(opt: dict) -> dict:
    if opt["pred_dir"]:
        report = _evaluate_file_mode(opt)
    else:
        report = _evaluate_manifest_mode(opt)
    out_dir = opt["out"] or _workdir_path(opt["workdir"], "eval")
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", encoding="utf-8",
              newline="\n") as f:
        f.write(report.to_csv())
    summary = report.summary()
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, sort_keys=True)
        f.write("\n")
    return {"ok": True, "report_dir": out_dir, **summary}


def cmd_report(opt: dict) -> dict:
    _, records = _load_manifest(opt["workdir"])
    report = mf.balance_report(records)
    out_path = _workdir_path(opt["workdir"], "balance_report.csv")
    with open(out_path, "w", encoding="utf-8", newline="\n") as f:
        f.write("race,gender,occlusion,split,count\n")
        for race, gender, occ, split, n in report.rows():
            f.write(f"{race},{gender},{occ},{split},{n}\n")
    failing = [c.name + ": " + c.detail for c in report.checks if not c.passed]
    return {
        "ok": report.passed,
        "balance": "PASS" if report.passed else "FAIL",
        "max_cell_deviation": report.max_cell_deviation,
        "n_records": len(records),
        "failures": failing,
        "table": out_path,
    }


# ---------------------------------------------------------------------------
# Argument plumbing

_COMMANDS = {
    "make-toy-model": cmd_make_toy_model,
    "gen-shapes": cmd_gen_shapes,
    "plan": cmd_plan,
    "render": cmd_render,
    "embed": cmd_embed,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

# name -> (flag kwargs, default) per command; None values fall back to
# --config entries and then to these defaults.
_COMMON = {
    "workdir": (dict(type=str, help="pipeline working directory"),
                os.environ.get("FACEPIPE_WORKDIR", ".")),
    "seed": (dict(type=int, help="global pipeline seed"), 0),
    "config": (dict(type=str, help="JSON file with flag defaults"), None),
}

_SPECS: dict[str, dict] = {
    "make-toy-model": {
        "out": (dict(type=str, required=True), None),
        "force": (dict(action="store_const", const=True), False),
        "vertices": (dict(type=int), 500),
        "shape_dims": (dict(type=int), 20),
        "expr_dims": (dict(type=int), 10),
    },
    "gen-shapes": {
        "model": (dict(type=str), None),
        "n_shapes": (dict(type=int), 10000),
        "sigma": (dict(type=float), 0.8),
        "force": (dict(action="store_const", const=True), False),
    },
    "plan": {
        "n_shapes": (dict(type=int), 10000),
        "views": (dict(type=int), 5),
        "images": (dict(type=int), 5),
        "occlusion_rate": (dict(type=float), 0.30),
        "races": (dict(type=str, nargs="+"), list(mf.RACES)),
        "genders": (dict(type=str, nargs="+"), list(mf.GENDERS)),
        "occlusions": (dict(type=str, nargs="+"), list(mf.OCCLUSIONS)),
        "split_fraction": (dict(type=float), 0.85),
        "distance_min": (dict(type=float), 150.0),
        "distance_max": (dict(type=float), 400.0),
        "resolution": (dict(type=int), 512),
        "force": (dict(action="store_const", const=True), False),
    },
    "render": {
        "model": (dict(type=str), None),
        "resolution": (dict(type=int, help="override manifest resolution"), None),
        "verify": (dict(action="store_const", const=True), False),
        "save_buffers": (dict(action="store_const", const=True), False),
        "noise_background": (dict(action="store_const", const=True), False),
        "jobs": (dict(type=int), 1),
    },
    "embed": {
        "mode": (dict(type=str, choices=["synthetic", "import"]), "synthetic"),
        "model": (dict(type=str), None),
        "nuisance_scale": (dict(type=float), 0.3),
        "nuisance_dims": (dict(type=int), 256),
        "import_path": (dict(type=str), None),
        "jobs": (dict(type=int), 1),
    },
    "train": {
        "model": (dict(type=str), None),
        "learning_rate": (dict(type=float), 1e-5),
        "weight_decay": (dict(type=float), 2e-4),
        "beta1": (dict(type=float), 0.9),
        "beta2": (dict(type=float), 0.999),
        "eps": (dict(type=float), 1e-8),
        "max_epochs": (dict(type=int), 100),
        "patience": (dict(type=int), 10),
        "batch_size": (dict(type=int), 64),
        "hidden": (dict(type=int, nargs=3), (300, 300, 300)),
        "force": (dict(action="store_const", const=True), False),
    },
    "evaluate": {
        "model": (dict(type=str), None),
        "landmarks": (dict(type=str), None),
        "limit": (dict(type=int), None),
        "no_scale": (dict(action="store_const", const=True), False),
        "pred_dir": (dict(type=str), None),
        "scan_dir": (dict(type=str), None),
        "pred_unit_scale": (dict(type=float), 1.0),
        "out": (dict(type=str), None),
        "jobs": (dict(type=int), 1),
    },
    "report": {},
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facepipe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        for arg, (kwargs, _) in {**_COMMON, **_SPECS[name]}.items():
            p.add_argument("--" + arg.replace("_", "-"), dest=arg,
                           default=None, **kwargs)
    return parser


def _resolve(args: argparse.Namespace, command: str) -> dict:
    config = {}
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            config = json.load(f)
    resolved = {}
    for arg, (_, default) in {**_COMMON, **_SPECS[command]}.items():
        value = getattr(args, arg, None)
        if value is None:
            value = config.get(arg, default)
        resolved[arg] = value
    return resolved


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    opt = _resolve(args, args.command)
    try:
        summary = _COMMANDS[args.command](opt)
    except (CommandError, mf.ManifestError, mm.ModelFormatError,
            mm.ModelValidationError, emb.EmbeddingError, tr.TrainingError,
            ev.AlignmentError, meshio.MeshFileError, FileNotFoundError,
            ValueError) as e:
        print(json.dumps({"ok": False, "error": str(e)}))
        return 1
    print(json.dumps(summary))
    return 0 if summary.get("ok") else 1


if __name__ == "__main__":
    sys.exit(main())
