import json
import os

import numpy as np
import pytest

import facepipe.manifest as mf
import facepipe.meshio as mio
import facepipe.morphable as mm
from facepipe.cli import main


def run(capsys, *args):
    code = main([str(a) for a in args])
    out = capsys.readouterr().out.strip().splitlines()[-1]
    return code, json.loads(out)


@pytest.fixture
def workdir(tmp_path):
    return str(tmp_path / "run")


@pytest.fixture
def model_path(tmp_path, capsys):
    path = str(tmp_path / "toy.m3dm")
    code, summary = run(capsys, "make-toy-model", "--out", path, "--seed", 1,
                        "--vertices", 200, "--shape-dims", 8, "--expr-dims", 4)
    assert code == 0 and summary["ok"]
    return path


def _pipeline_args(workdir, model_path, seed=3):
    return dict(workdir=workdir, model=model_path, seed=seed)


def _run_through_embed(capsys, workdir, model_path, seed=3, shapes=6):
    run(capsys, "plan", "--workdir", workdir, "--seed", seed,
        "--n-shapes", shapes, "--views", 2, "--images", 2,
        "--occlusion-rate", 0.25, "--resolution", 48)
    run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
        "--seed", seed, "--n-shapes", shapes)
    run(capsys, "render", "--workdir", workdir, "--model", model_path)
    return run(capsys, "embed", "--workdir", workdir, "--model", model_path,
               "--seed", seed)


class TestMakeToyModel:
    def test_creates_model_and_landmarks(self, model_path):
        model = mm.load_model(model_path)
        assert model.n_vertices == 200
        lm = mio.read_landmark_indices(os.path.splitext(model_path)[0] + ".landmarks.json")
        assert len(lm) == 8

    def test_refuses_overwrite(self, model_path, capsys):
        code, summary = run(capsys, "make-toy-model", "--out", model_path)
        assert code == 1
        assert not summary["ok"]
        assert "--force" in summary["error"]


class TestGenShapes:
    def test_deterministic_store(self, workdir, model_path, capsys):
        code, s1 = run(capsys, "gen-shapes", "--workdir", workdir,
                       "--model", model_path, "--seed", 7, "--n-shapes", 10)
        assert code == 0 and s1["n_shapes"] == 10
        store = mf.ShapeStore(os.path.join(workdir, "shapes"))
        first = {sid: store.load_beta(sid).copy() for sid in store.index()["shape_ids"]}

        code, _ = run(capsys, "gen-shapes", "--workdir", workdir,
                      "--model", model_path, "--seed", 7, "--n-shapes", 10,
                      "--force")
        assert code == 0
        for sid, beta in first.items():
            assert np.array_equal(store.load_beta(sid), beta)

    def test_refusal_without_force(self, workdir, model_path, capsys):
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--n-shapes", 3)
        code, summary = run(capsys, "gen-shapes", "--workdir", workdir,
                            "--model", model_path, "--n-shapes", 3)
        assert code == 1
        assert "--force" in summary["error"]

    def test_index_lists_exactly_n(self, workdir, model_path, capsys):
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--n-shapes", 5)
        store = mf.ShapeStore(os.path.join(workdir, "shapes"))
        assert store.index()["n_shapes"] == 5
        assert len(store.index()["shape_ids"]) == 5


class TestRender:
    def test_renders_each_view_once(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 4,
            "--views", 2, "--images", 2, "--resolution", 48)
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--seed", 3, "--n-shapes", 4)
        code, summary = run(capsys, "render", "--workdir", workdir,
                            "--model", model_path)
        assert code == 0
        assert summary["rendered"] == 8
        assert summary["records_updated"] == 16
        pngs = [f for f in os.listdir(os.path.join(workdir, "depth"))
                if f.endswith(".png")]
        assert len(pngs) == 8
        records = mf.load_manifest(os.path.join(workdir, "manifest.jsonl"))
        assert all(r.status == mf.STATUS_RENDERED for r in records)

    def test_rerun_is_idempotent(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 4,
            "--views", 2, "--images", 1, "--resolution", 48)
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--seed", 3, "--n-shapes", 4)
        run(capsys, "render", "--workdir", workdir, "--model", model_path)
        code, summary = run(capsys, "render", "--workdir", workdir,
                            "--model", model_path)
        assert code == 0
        assert summary["rendered"] == 0
        assert summary["skipped"] == 8

    def test_verify_rerenders_corrupt_png(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 2,
            "--views", 1, "--images", 1, "--resolution", 48)
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--seed", 3, "--n-shapes", 2)
        run(capsys, "render", "--workdir", workdir, "--model", model_path)
        victim = os.path.join(workdir, "depth", "s000000_v0.png")
        with open(victim, "wb") as f:
            f.write(b"not a png")
        code, summary = run(capsys, "render", "--workdir", workdir,
                            "--model", model_path, "--verify")
        assert code == 0
        assert summary["rendered"] == 1
        from facepipe.render import import_png
        import_png(victim)  # readable again

    def test_missing_store_is_prerequisite_error(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 2,
            "--views", 1, "--images", 1)
        code, summary = run(capsys, "render", "--workdir", workdir,
                            "--model", model_path)
        assert code == 1
        assert "gen-shapes" in summary["error"]


class TestEmbedAndTrain:
    def test_embed_updates_statuses(self, workdir, model_path, capsys):
        code, summary = _run_through_embed(capsys, workdir, model_path)
        assert code == 0
        assert summary["embedded"] == 6 * 2 * 2
        records = mf.load_manifest(os.path.join(workdir, "manifest.jsonl"))
        assert all(r.status == mf.STATUS_EMBEDDED for r in records)
        assert all(r.embedding_path == "embeddings.bin" for r in records)

    def test_embed_rerun_skips(self, workdir, model_path, capsys):
        _run_through_embed(capsys, workdir, model_path)
        code, summary = run(capsys, "embed", "--workdir", workdir,
                            "--model", model_path, "--seed", 3)
        assert code == 0
        assert summary["embedded"] == 0

    def test_train_before_embed_names_prerequisite(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 4,
            "--views", 1, "--images", 1, "--resolution", 48)
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--seed", 3, "--n-shapes", 4)
        code, summary = run(capsys, "train", "--workdir", workdir,
                            "--model", model_path)
        assert code == 1
        assert "embedded" in summary["error"]
        assert "status" in summary["error"]

    def test_embed_before_render_names_prerequisite(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 2,
            "--views", 1, "--images", 1)
        code, summary = run(capsys, "embed", "--workdir", workdir,
                            "--model", model_path)
        assert code == 1
        assert "rendered" in summary["error"]


class TestReport:
    def test_balanced_plan_passes(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 5, "--n-shapes", 14,
            "--views", 1, "--images", 1, "--occlusion-rate", 0.0)
        code, summary = run(capsys, "report", "--workdir", workdir)
        assert code == 0
        assert summary["balance"] == "PASS"
        assert os.path.exists(summary["table"])

    def test_exit_code_matches_ok(self, workdir, capsys):
        code, summary = run(capsys, "report", "--workdir", workdir)
        assert code == 1
        assert not summary["ok"]


class TestWorkerFlags:
    def test_parallel_render_matches_serial(self, tmp_path, model_path, capsys):
        import filecmp
        dirs = {}
        for tag, jobs in (("serial", 1), ("parallel", 3)):
            wd = str(tmp_path / tag)
            run(capsys, "plan", "--workdir", wd, "--seed", 3, "--n-shapes", 4,
                "--views", 2, "--images", 1, "--resolution", 48)
            run(capsys, "gen-shapes", "--workdir", wd, "--model", model_path,
                "--seed", 3, "--n-shapes", 4)
            code, _ = run(capsys, "render", "--workdir", wd,
                          "--model", model_path, "--jobs", jobs)
            assert code == 0
            dirs[tag] = wd
        for name in sorted(os.listdir(os.path.join(dirs["serial"], "depth"))):
            assert filecmp.cmp(os.path.join(dirs["serial"], "depth", name),
                               os.path.join(dirs["parallel"], "depth", name),
                               shallow=False)

    def test_noise_background_render(self, workdir, model_path, capsys):
        run(capsys, "plan", "--workdir", workdir, "--seed", 3, "--n-shapes", 1,
            "--views", 1, "--images", 1, "--resolution", 48)
        run(capsys, "gen-shapes", "--workdir", workdir, "--model", model_path,
            "--seed", 3, "--n-shapes", 1)
        code, _ = run(capsys, "render", "--workdir", workdir,
                      "--model", model_path, "--noise-background")
        assert code == 0
        from facepipe.render import import_png
        image = import_png(os.path.join(workdir, "depth", "s000000_v0.png"))
        assert image.pixels.min() >= 1  # background filled with noise


class TestPlanCategories:
    def test_custom_category_lists(self, workdir, capsys):
        code, summary = run(capsys, "plan", "--workdir", workdir, "--seed", 2,
                            "--n-shapes", 4, "--views", 1, "--images", 1,
                            "--occlusion-rate", 0.5,
                            "--races", "A", "B", "--genders", "x", "y",
                            "--occlusions", "veil")
        assert code == 0
        records = mf.load_manifest(os.path.join(workdir, "manifest.jsonl"))
        assert {r.race for r in records} <= {"A", "B"}
        occluded = [r for r in records if r.occlusion != "none"]
        assert len(occluded) == 2
        assert all(r.occlusion == "veil" for r in occluded)
        assert all("veil," in r.prompt_positive for r in occluded)


class TestConfigFile:
    def test_config_supplies_defaults_flags_override(self, tmp_path, workdir,
                                                     model_path, capsys):
        config = {"workdir": workdir, "n_shapes": 3, "views": 1, "images": 1,
                  "seed": 9, "resolution": 48}
        config_path = str(tmp_path / "config.json")
        with open(config_path, "w") as f:
            json.dump(config, f)
        code, summary = run(capsys, "plan", "--config", config_path)
        assert code == 0
        assert summary["n_records"] == 3
        records = mf.load_manifest(os.path.join(workdir, "manifest.jsonl"))
        assert len(records) == 3
        # Explicit flag wins over the config value.
        code, summary = run(capsys, "plan", "--config", config_path,
                            "--n-shapes", 5, "--force")
        assert summary["n_records"] == 5


class TestEvaluateFileMode:
    def test_obj_predictions_against_scans(self, tmp_path, capsys):
        model = mm.make_toy_model(seed=4, n_vertices=160, n_shape=6, n_expr=3)
        from facepipe.evaluator import pick_landmark_indices
        indices = pick_landmark_indices(model)
        pred_dir = tmp_path / "pred"
        scan_dir = tmp_path / "scan"
        pred_dir.mkdir()
        scan_dir.mkdir()
        rng = np.random.default_rng(0)
        for k in range(2):
            beta = rng.normal(0, 0.8, model.n_shape)
            scan = mm.decode_shape(model, beta)
            pred = mm.decode_shape(model, beta + rng.normal(0, 0.1, model.n_shape))
            mio.write_obj(str(pred_dir / f"im{k}.obj"), pred, model.triangles)
            mio.write_obj(str(scan_dir / f"im{k}.obj"), scan, model.triangles)
            mio.write_landmark_points(
                str(scan_dir / f"im{k}.landmarks.json"),
                {f"lm{j}": scan[v] for j, v in enumerate(indices)},
            )
        lm_path = str(tmp_path / "model_landmarks.json")
        mio.write_landmark_indices(lm_path,
                                   {f"lm{j}": int(v) for j, v in enumerate(indices)})
        out_dir = str(tmp_path / "eval")
        code, summary = run(capsys, "evaluate", "--pred-dir", str(pred_dir),
                            "--scan-dir", str(scan_dir), "--landmarks", lm_path,
                            "--workdir", str(tmp_path), "--out", out_dir)
        assert code == 0
        assert summary["n_images"] == 2
        assert summary["n_failed"] == 0
        assert 0.0 < summary["mean_mm"] < 5.0
        assert os.path.exists(os.path.join(out_dir, "report.csv"))
        assert os.path.exists(os.path.join(out_dir, "report.json"))


class TestFullPipeline:
    def test_desk_scale_end_to_end(self, workdir, model_path, capsys):
        seed = 3
        _run_through_embed(capsys, workdir, model_path, seed=seed, shapes=8)
        code, summary = run(capsys, "train", "--workdir", workdir,
                            "--model", model_path, "--seed", seed,
                            "--learning-rate", 1e-3, "--max-epochs", 12,
                            "--patience", 11, "--hidden", 32, 32, 32)
        assert code == 0 and summary["ok"]
        assert os.path.exists(os.path.join(workdir, "network.bin"))
        assert os.path.exists(os.path.join(workdir, "history.csv"))
        header = open(os.path.join(workdir, "history.csv")).readline().strip()
        assert header == "epoch,train_loss,val_loss,wall_seconds"

        code, summary = run(capsys, "evaluate", "--workdir", workdir,
                            "--model", model_path)
        assert code == 0 and summary["ok"]
        assert summary["n_images"] == 4  # 1 val shape x 2 views x 2 images
        assert np.isfinite(summary["median_mm"])

    def test_train_skips_when_done(self, workdir, model_path, capsys):
        _run_through_embed(capsys, workdir, model_path, shapes=8)
        run(capsys, "train", "--workdir", workdir, "--model", model_path,
            "--max-epochs", 3, "--patience", 2, "--hidden", 16, 16, 16)
        code, summary = run(capsys, "train", "--workdir", workdir,
                            "--model", model_path)
        assert code == 0
        assert summary.get("skipped") is True
