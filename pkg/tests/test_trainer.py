import dataclasses

import numpy as np
import pytest

import facepipe.manifest as mf
import facepipe.morphable as mm
import facepipe.trainer as tr


@pytest.fixture(scope="module")
def toy():
    return mm.make_toy_model(seed=1, n_vertices=200, n_shape=8, n_expr=4)


@pytest.fixture(scope="module")
def mask(toy):
    return tr.RegionMask.from_model(toy)


def _tiny_net(weights, biases):
    return tr.MappingNetwork(
        weights=[np.asarray(w, dtype=np.float64) for w in weights],
        biases=[np.asarray(b, dtype=np.float64) for b in biases],
    )


class TestRegionMask:
    def test_weight_table(self, toy, mask):
        assert mask.weights.shape == (toy.n_vertices,)
        assert set(np.unique(mask.weights)) == {0.1, 1.0, 150.0}
        assert (mask.weights[toy.region_labels == mm.REGION_FACE] == 150.0).all()
        assert (mask.weights[toy.region_labels == mm.REGION_BACK_OF_HEAD] == 1.0).all()
        assert (mask.weights[toy.region_labels == mm.REGION_EYES] == 0.1).all()
        assert (mask.weights[toy.region_labels == mm.REGION_EARS] == 0.1).all()


class TestForward:
    def test_zero_network_outputs_zero(self):
        net = _tiny_net(
            [np.zeros((512, 4)), np.zeros((4, 4)), np.zeros((4, 4)), np.zeros((4, 3))],
            [np.zeros(4), np.zeros(4), np.zeros(4), np.zeros(3)],
        )
        out = tr.forward(net, np.ones(512) / np.sqrt(512.0))
        assert np.array_equal(out, np.zeros(3))

    def test_matches_hand_computed_toy_net(self):
        # Oracle: the same 2-2-2 forward chain evaluated by hand.
        w1 = [[0.5, -0.25], [0.1, 0.3]]
        b1 = [0.05, -0.02]
        w2 = [[0.2, 0.4], [-0.6, 0.1]]
        b2 = [0.0, 0.1]
        w3 = [[1.0, 0.0], [0.0, 1.0]]
        b3 = [0.0, 0.0]
        w4 = [[0.7, -0.3], [0.2, 0.9]]
        b4 = [0.01, -0.04]
        net = _tiny_net([w1, w2, w3, w4], [b1, b2, b3, b4])
        x = np.array([0.6, -0.4])

        h1 = np.maximum(np.array(x) @ np.array(w1) + b1, 0.0)
        h2 = np.maximum(h1 @ np.array(w2) + b2, 0.0)
        h3 = np.maximum(h2 @ np.array(w3) + b3, 0.0)
        expected = h3 @ np.array(w4) + b4
        got = tr.forward(net, x)
        assert np.abs(got - expected).max() < 1e-7

    def test_lipschitz_bound_from_spectral_norms(self):
        # Oracle: power iteration gives each layer's spectral norm; ReLU is
        # 1-Lipschitz, so the product bounds the network's gain.
        net = tr.init_network(3, input_dim=32, hidden=(16, 16, 16), output_dim=5)

        def spectral_norm(w, iters=200):
            v = np.ones(w.shape[1]) / np.sqrt(w.shape[1])
            for _ in range(iters):
                u = w @ v
                u /= np.linalg.norm(u)
                v = w.T @ u
                v /= np.linalg.norm(v)
            return float(np.linalg.norm(w @ v))

        bound = np.prod([spectral_norm(w) for w in net.weights])
        rng = np.random.default_rng(4)
        x = rng.standard_normal(32)
        for _ in range(20):
            delta = rng.standard_normal(32)
            delta *= 1e-6 / np.linalg.norm(delta)
            diff = tr.forward(net, x + delta) - tr.forward(net, x)
            assert np.linalg.norm(diff) <= bound * 1e-6 * (1.0 + 1e-9)

    def test_dimension_mismatch(self):
        net = tr.init_network(0, input_dim=16, hidden=(4, 4, 4), output_dim=2)
        with pytest.raises(tr.TrainingError, match="input"):
            tr.forward(net, np.zeros(17))


class TestMaskedMeshLoss:
    def test_exact_fit_gives_zero_loss_and_grad(self, toy, mask):
        beta = np.random.default_rng(0).normal(0, 0.8, toy.n_shape)
        mesh = mm.Mesh(mm.decode_shape(toy, beta), toy.triangles)
        loss, grad = tr.masked_mesh_loss(toy, mask, beta, mesh)
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros(toy.n_shape))

    def test_single_face_vertex_offset(self, toy, mask):
        # Oracle: independent scalar loop over vertices and coordinates.
        beta = np.zeros(toy.n_shape)
        gt = mm.decode_shape(toy, beta).copy()
        v = int(np.nonzero(toy.region_labels == mm.REGION_FACE)[0][0])
        delta = 0.37
        gt[v, 0] -= delta  # prediction is +delta off along x at one face vertex
        loss, _ = tr.masked_mesh_loss(toy, mask, beta, mm.Mesh(gt, toy.triangles))
        assert abs(loss - 150.0 * delta) < 1e-9

        pred = mm.decode_shape(toy, beta)
        oracle = 0.0
        for vi in range(toy.n_vertices):
            for c in range(3):
                oracle += mask.weights[vi] * abs(pred[vi, c] - gt[vi, c])
        assert abs(loss - oracle) < 1e-12

    def test_gradient_matches_finite_differences(self, toy, mask):
        # Oracle: central finite differences, residuals kept away from the
        # L1 kinks so the subgradient is unambiguous.
        rng = np.random.default_rng(5)
        for _ in range(20):
            beta_gt = rng.normal(0, 0.8, toy.n_shape)
            gt = mm.Mesh(mm.decode_shape(toy, beta_gt), toy.triangles)
            while True:
                beta = rng.normal(0, 0.8, toy.n_shape)
                resid = mm.decode_shape(toy, beta) - gt.vertices
                if np.abs(resid).min() > 1e-2:
                    break
            _, grad = tr.masked_mesh_loss(toy, mask, beta, gt)
            step = 1e-4
            for i in range(toy.n_shape):
                e = np.zeros(toy.n_shape)
                e[i] = step
                lp, _ = tr.masked_mesh_loss(toy, mask, beta + e, gt)
                lm, _ = tr.masked_mesh_loss(toy, mask, beta - e, gt)
                fd = (lp - lm) / (2 * step)
                assert abs(grad[i] - fd) / max(abs(fd), 1e-12) < 1e-4

    def test_permutation_invariance(self, toy, mask):
        rng = np.random.default_rng(6)
        beta = rng.normal(0, 0.8, toy.n_shape)
        gt = mm.decode_shape(toy, rng.normal(0, 0.8, toy.n_shape))
        loss, _ = tr.masked_mesh_loss(toy, mask, beta, mm.Mesh(gt, toy.triangles))
        perm = rng.permutation(toy.n_vertices)
        permuted_model = dataclasses.replace(
            toy,
            template_vertices=toy.template_vertices[perm],
            shape_basis=toy.shape_basis[:, perm],
            expression_basis=toy.expression_basis[:, perm],
            pose_basis=toy.pose_basis[:, perm],
            joint_regressor=toy.joint_regressor[:, perm],
            skin_weights=toy.skin_weights[perm],
            region_labels=toy.region_labels[perm],
        )
        pmask = tr.RegionMask.from_model(permuted_model)
        ploss, _ = tr.masked_mesh_loss(permuted_model, pmask, beta,
                                       mm.Mesh(gt[perm], toy.triangles))
        assert abs(loss - ploss) < 1e-9

    def test_vertex_count_mismatch(self, toy, mask):
        with pytest.raises(tr.TrainingError, match="vertices"):
            tr.masked_mesh_loss(toy, mask, np.zeros(toy.n_shape),
                                mm.Mesh(np.zeros((3, 3)), toy.triangles))


class TestAdamW:
    def test_zero_gradient_leaves_params(self):
        params = {"w": np.array([1.0, -2.0])}
        grads = {"w": np.zeros(2)}
        config = tr.TrainConfig(weight_decay=1e-30)  # decay off in the limit
        state = tr.AdamWState()
        tr.adamw_step(params, grads, state, config)
        assert np.allclose(params["w"], [1.0, -2.0], atol=1e-20)

    def test_first_step_closed_form(self):
        # Oracle: bias-corrected first step is -lr * g/(sqrt(g^2)+eps).
        config = tr.TrainConfig(learning_rate=1e-5, weight_decay=1e-30)
        params = {"w": np.array([0.5])}
        grads = {"w": np.array([1.0])}
        tr.adamw_step(params, grads, tr.AdamWState(), config)
        expected = 0.5 - 1e-5 * 1.0 / (1.0 + config.eps)
        assert abs(params["w"][0] - expected) < 1e-18

    def test_decay_only_shrinks_multiplicatively(self):
        config = tr.TrainConfig(learning_rate=1e-2, weight_decay=0.5)
        params = {"w": np.array([2.0])}
        grads = {"w": np.zeros(1)}
        tr.adamw_step(params, grads, tr.AdamWState(), config)
        assert abs(params["w"][0] - 2.0 * (1.0 - 1e-2 * 0.5)) < 1e-15

    def test_nonfinite_gradient_names_block(self):
        config = tr.TrainConfig()
        with pytest.raises(tr.TrainingError, match="'b3'"):
            tr.adamw_step({"b3": np.zeros(2)}, {"b3": np.array([1.0, np.nan])},
                          tr.AdamWState(), config)

    def test_step_bounded_by_lr(self):
        # One step moves each parameter by at most lr*(1 + decay*|p|).
        rng = np.random.default_rng(8)
        config = tr.TrainConfig(learning_rate=1e-3, weight_decay=2e-4)
        params = {"w": rng.standard_normal(100)}
        before = params["w"].copy()
        grads = {"w": rng.standard_normal(100) * 1e3}
        tr.adamw_step(params, grads, tr.AdamWState(), config)
        bound = config.learning_rate * (1.0 + config.weight_decay * np.abs(before))
        assert (np.abs(params["w"] - before) <= bound + 1e-15).all()


class TestEarlyStopper:
    def test_strictly_increasing_after_best(self):
        stopper = tr.EarlyStopper(patience=10)
        values = [5.0, 4.0, 3.0] + [3.0 + 0.1 * k for k in range(1, 11)]
        stopped_at = None
        for epoch, v in enumerate(values, start=1):
            if stopper.update(epoch, v):
                stopped_at = epoch
                break
        assert stopped_at == 13
        assert stopper.best_epoch == 3

    def test_plateau_counts_as_failure(self):
        stopper = tr.EarlyStopper(patience=2)
        assert not stopper.update(1, 1.0)
        assert not stopper.update(2, 1.0)
        assert stopper.update(3, 1.0)
        assert stopper.best_epoch == 1


def _linear_dataset(toy, n_shapes=60, images_per_shape=4, seed=3):
    """Records + embeddings that are noise-free linear images of beta."""
    rng = np.random.default_rng(seed)
    proj = np.linalg.qr(rng.standard_normal((512, toy.n_shape)))[0]
    records, vectors, betas = [], {}, {}
    n_train = round(0.85 * n_shapes)
    for i in range(n_shapes):
        sid = mf.shape_id_name(i)
        beta = rng.normal(0, 0.8, toy.n_shape)
        betas[sid] = beta
        for k in range(images_per_shape):
            image_id = f"{sid}_v0_i{k}"
            records.append(mf.ImageRecord(
                image_id=image_id, shape_id=sid, view_index=0, image_index=k,
                beta_ref="", camera={}, depth_image_path="",
                prompt_positive="", prompt_negative="", race="White",
                gender="woman", occlusion="none", generation_seed=i * 100 + k,
                inference_steps=15, images_per_prompt=images_per_shape,
                split=mf.SPLIT_TRAIN if i < n_train else mf.SPLIT_VAL,
            ))
            vectors[image_id] = (proj @ beta) / 4.0  # constant scale, linear
    return records, vectors, betas


class TestTrain:
    def test_noise_free_linear_recovery(self, toy, mask):
        # Oracle: a linear least-squares readout achieves near-zero loss on
        # noise-free linear embeddings, so training must cut the untrained
        # network's validation loss by at least 100x (observed: ~0.2%).
        records, vectors, betas = _linear_dataset(toy)
        config = tr.TrainConfig(learning_rate=3e-4, max_epochs=2000, patience=400,
                                batch_size=64, seed=0)
        net, history = tr.train(records, vectors, betas, toy, mask, config,
                                hidden=(48, 48, 48))
        assert history.best_val_loss <= 0.01 * history.initial_val_loss

    def test_two_runs_identical_history(self, toy, mask):
        records, vectors, betas = _linear_dataset(toy, n_shapes=20, seed=9)
        config = tr.TrainConfig(learning_rate=1e-3, max_epochs=6, patience=5,
                                seed=11)
        _, h1 = tr.train(records, vectors, betas, toy, mask, config, hidden=(32, 32, 32))
        _, h2 = tr.train(records, vectors, betas, toy, mask, config, hidden=(32, 32, 32))
        assert h1.losses() == h2.losses()
        assert h1.best_epoch == h2.best_epoch

    def test_best_network_is_best_epoch(self, toy, mask):
        records, vectors, betas = _linear_dataset(toy, n_shapes=20, seed=13)
        config = tr.TrainConfig(learning_rate=1e-3, max_epochs=8, patience=7, seed=2)
        net, history = tr.train(records, vectors, betas, toy, mask, config,
                                hidden=(32, 32, 32))
        recorded = min(e.val_loss for e in history.epochs)
        assert history.best_val_loss == recorded
        # Recompute the returned network's val loss: must equal the minimum.
        val = [r for r in records if r.split == mf.SPLIT_VAL]
        losses = []
        for rec in val:
            beta_pred = tr.forward(net, vectors[rec.image_id])
            loss, _ = tr.masked_mesh_loss(
                toy, mask, beta_pred,
                mm.Mesh(mm.decode_shape(toy, betas[rec.shape_id]), toy.triangles))
            losses.append(loss)
        assert abs(np.mean(losses) - recorded) < 1e-9 * max(recorded, 1.0)

    def test_missing_embedding_names_image(self, toy, mask):
        records, vectors, betas = _linear_dataset(toy, n_shapes=20, seed=1)
        del vectors[records[3].image_id]
        with pytest.raises(tr.TrainingError, match=records[3].image_id):
            tr.train(records, vectors, betas, toy, mask, tr.TrainConfig(seed=0))

    def test_empty_split_rejected(self, toy, mask):
        records, vectors, betas = _linear_dataset(toy, n_shapes=20, seed=1)
        train_only = [r for r in records if r.split == mf.SPLIT_TRAIN]
        with pytest.raises(tr.TrainingError, match="val"):
            tr.train(train_only, vectors, betas, toy, mask, tr.TrainConfig(seed=0))

    def test_config_validation(self):
        with pytest.raises(tr.TrainingError):
            tr.TrainConfig(patience=100, max_epochs=100).validate()
        with pytest.raises(tr.TrainingError):
            tr.TrainConfig(learning_rate=0.0).validate()


class TestNetworkContainer:
    def test_round_trip_identical_predictions(self, tmp_path):
        net = tr.init_network(7, input_dim=64, hidden=(16, 16, 16), output_dim=8)
        path = str(tmp_path / "net.bin")
        tr.save_network(net, path)
        loaded = tr.load_network(path)
        rng = np.random.default_rng(0)
        for _ in range(100):
            x = rng.standard_normal(64)
            assert np.array_equal(tr.forward(net, x), tr.forward(loaded, x))

    def test_round_trip_bit_exact(self, tmp_path):
        net = tr.init_network(8, input_dim=32, hidden=(8, 8, 8), output_dim=4)
        p1 = str(tmp_path / "a.bin")
        p2 = str(tmp_path / "b.bin")
        tr.save_network(net, p1)
        tr.save_network(tr.load_network(p1), p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_wrong_output_dim_detectable(self, toy, tmp_path):
        net = tr.init_network(9, input_dim=512, hidden=(8, 8, 8),
                              output_dim=toy.n_shape + 1)
        path = str(tmp_path / "net.bin")
        tr.save_network(net, path)
        loaded = tr.load_network(path)
        assert loaded.output_dim != toy.n_shape

    def test_truncated_rejected(self, tmp_path):
        net = tr.init_network(10, input_dim=32, hidden=(8, 8, 8), output_dim=4)
        path = str(tmp_path / "net.bin")
        tr.save_network(net, path)
        blob = open(path, "rb").read()
        with open(path, "wb") as f:
            f.write(blob[:-64])
        with pytest.raises(tr.TrainingError, match="truncated"):
            tr.load_network(path)
