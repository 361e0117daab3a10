"""Acceptance criteria, one marked group per criterion.

Run ``pytest tests/test_acceptance.py -v`` to get the per-criterion
pass/fail summary at the end of the report.
"""

import math
import os
import time

import numpy as np
import pytest

from vibe import cli, nd, pipeline
from vibe.config import RunConfig
from vibe.data.container import decode, encode
from vibe.data.dataset import Dataset
from vibe.data.presets import get_preset
from vibe.data.regions import REGIONS, VISUAL_PATHWAY, region_config, region_mask
from vibe.data.splits import make_splits, preset_unit_count
from vibe.data.synth import SynthDataset, SynthSpec
from vibe.errors import FormatError, TruncatedError
from vibe.losses import AlignmentLossConfig, alignment_loss, sample_projections, swd, w1_1d
from vibe.metrics import cosine, evaluate_batch, mse, pearson, scale_bridge_check
from vibe.nd.gradcheck import check_gradients, directional_check
from vibe.qformer import Mapper, QFormer, QFormerConfig
from vibe.train import UnitSet, gather, identity_residual, predict, reconstruct, train_stage1, train_stage2
from vibe.vae import TSCVAE, LatentGaussian, VaeArchitecture, elbo_loss, kl_gaussian, reparameterize

from gradcases import OP_CASES
from test_data import random_tensor
from test_losses import grid_instances, hungarian_w1, reference_swd
from test_vae import monte_carlo_kl

criterion = pytest.mark.criterion


@criterion(1, "gradient suite: ops at 1e-4, composed losses at 1e-3, under 2 min")
def test_gradient_suite():
    start = time.perf_counter()
    for name, build in sorted(OP_CASES.items()):
        for seed in range(20):
            loss_fn, leaves = build(np.random.default_rng([seed, 101]))
            assert max(check_gradients(loss_fn, leaves)) < 1e-4, (name, seed)

    # ELBO as a function of its inputs, then through a whole float64 VAE
    for seed in range(20):
        rng = np.random.default_rng([seed, 202])
        x = nd.Tensor(rng.standard_normal((2, 1, 3, 4)))
        x_hat = nd.Tensor(rng.standard_normal((2, 1, 3, 4)), requires_grad=True)
        mu = nd.Tensor(rng.standard_normal((2, 4, 1, 1)), requires_grad=True)
        lv = nd.Tensor(rng.uniform(-1, 1, (2, 4, 1, 1)), requires_grad=True)
        errors = check_gradients(lambda: elbo_loss(x_hat, x, LatentGaussian(mu, lv), 0.3), [x_hat, mu, lv])
        assert max(errors) < 1e-4, seed
    arch = VaeArchitecture(6, 8, stem_kernel=3, widths=(2, 2, 2), temporal_kernels=(3, 3, 3), dtype="float64")
    for seed in range(20):
        model = TSCVAE(arch, np.random.default_rng([seed, 303]))
        x = nd.Tensor(np.random.default_rng([seed, 304]).standard_normal((2, 1, 6, 8)))

        def loss():
            x_hat, lat = model(x, np.random.default_rng(seed))
            return elbo_loss(x_hat, x, lat, 0.1)

        params = model.parameters()
        assert directional_check(loss, params, eps=1e-5, rng=np.random.default_rng(seed)) < 1e-3
        err = check_gradients(loss, params, eps=1e-5, max_entries=3, rng=np.random.default_rng(seed))
        assert max(err) < 1e-3, seed

    # alignment objective, alone and through a float64 mapper
    cfg = AlignmentLossConfig(lam=1.0, num_projections=6)
    theta = sample_projections(3, 6, 0)
    qcfg = QFormerConfig(num_queries=2, hidden_dim=4, layers=2, heads=2, embed_dim=4, head_hidden=6,
                         output_latent_shape=(3, 2, 2), dtype="float64")
    for seed in range(20):
        rng = np.random.default_rng([seed, 404])
        zh = nd.Tensor(rng.standard_normal((2, 3, 2, 2)), requires_grad=True)
        z = nd.Tensor(rng.standard_normal((2, 3, 2, 2)))
        assert check_gradients(lambda: alignment_loss(zh, z, cfg, projections=theta), [zh])[0] < 1e-4
        mapper = Mapper(qcfg, rng)
        e = rng.standard_normal((2, 5, 4))

        def aligned():
            return alignment_loss(mapper(e), z, cfg, projections=theta)

        params = mapper.parameters()
        assert directional_check(aligned, params, eps=1e-5, rng=rng) < 1e-3
        assert max(check_gradients(aligned, params, eps=1e-5, max_entries=3, rng=rng)) < 1e-3, seed
    assert time.perf_counter() - start < 120


@criterion(2, "shape suite at published sizes")
def test_vae_shapes():
    for (c, t), latent in (((63, 250), (4, 16, 63)), ((271, 200), (4, 68, 50))):
        model = TSCVAE(VaeArchitecture(c, t), np.random.default_rng(0))
        x = np.random.default_rng(1).standard_normal((1, c, t)).astype(np.float32)
        with nd.no_grad():
            lat = model.encode(x)
            assert lat.mu.shape == lat.log_var.shape == latent
            assert model.decode(lat.mu).shape == (1, c, t)


@criterion(2, "shape suite at published sizes")
def test_qformer_shapes():
    e = (np.random.default_rng(2).standard_normal((257, 768)) * 0.025).astype(np.float32)
    with nd.no_grad():
        assert QFormer(QFormerConfig(), np.random.default_rng(0))(e).shape == (64, 768)
        for latent in ((4, 16, 63), (4, 68, 50)):
            mapper = Mapper(QFormerConfig(output_latent_shape=latent), np.random.default_rng(0))
            assert mapper(e).shape == latent
            del mapper


@criterion(3, "SWD and W1 oracles, randomized properties, under 2 min")
def test_swd_matches_independent_reimplementation():
    rng = np.random.default_rng(30)
    for i in range(50):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(1, 7)))
        x = rng.standard_normal(shape) * rng.uniform(0.1, 3)
        y = rng.standard_normal(shape) + rng.normal()
        cfg = AlignmentLossConfig(num_projections=int(rng.integers(1, 60)), projection_seed=1000 + i)
        assert abs(swd(x, y, cfg).item() - reference_swd(x, y, cfg.num_projections, 1000 + i)) < 1e-9


@criterion(3, "SWD and W1 oracles, randomized properties, under 2 min")
def test_w1_against_assignment_solver():
    start = time.perf_counter()
    count = 0
    for a, b in grid_instances(8):
        assert abs(w1_1d(a, b).item() - hungarian_w1(a, b)) < 1e-12
        count += 1
    assert count > 0
    assert time.perf_counter() - start < 120


@criterion(3, "SWD and W1 oracles, randomized properties, under 2 min")
def test_swd_properties():
    rng = np.random.default_rng(31)
    for case in range(1000):
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        x, y = rng.standard_normal(shape), rng.standard_normal(shape) * 1.5 + 0.2
        cfg = AlignmentLossConfig(num_projections=8, projection_seed=case)
        d = swd(x, y, cfg).item()
        assert swd(x, x, cfg).item() == 0.0
        assert abs(d - swd(y, x, cfg).item()) < 1e-12
        a = rng.uniform(-3, 3)
        assert abs(swd(a * x, a * y, cfg).item() - abs(a) * d) <= 1e-10 * max(d, 1.0)
        flat = np.moveaxis(x, 1, -1).reshape(-1, shape[1])
        moved = flat[rng.permutation(len(flat))].reshape(shape[0], shape[2], shape[3], shape[1])
        assert abs(swd(np.moveaxis(moved, -1, 1), y, cfg).item() - d) <= 1e-10 * max(d, 1.0)


@criterion(4, "KL closed form against Monte Carlo")
def test_kl_monte_carlo():
    assert kl_gaussian(LatentGaussian(nd.Tensor(np.zeros((4, 3, 2))), nd.Tensor(np.zeros((4, 3, 2))))).item() == 0.0
    rng = np.random.default_rng(40)
    for _ in range(10):
        mu = rng.normal(0, 1, (2, 3))
        lv = rng.uniform(-1.5, 1.0, (2, 3))
        est, se = monte_carlo_kl(mu, lv, 1_000_000, rng)
        closed = kl_gaussian(LatentGaussian(nd.Tensor(mu), nd.Tensor(lv))).item()
        assert abs(closed - est) < 3 * se


OVERFIT_WIDTHS = (8, 16, 16)
OVERFIT_LR = 5e-3


@criterion(5, "stage-I overfit: 8 EEG recordings, 500 steps, Pearson >= 0.95, under 10 min")
def test_stage1_overfit():
    synth = SynthDataset(SynthSpec("eeg", n_subjects=1))
    x = np.stack([np.mean([synth.signal(0, "train", c, 0, r) for r in range(4)], axis=0)
                  for c in range(8)]).astype(np.float32)
    units = UnitSet(x, np.zeros((8, 3), np.int64))
    # one batch of 8 per epoch, so 500 epochs are 500 optimiser steps
    cfg = RunConfig(preset="eeg", epochs=500, batch=8, lr=OVERFIT_LR, widths=OVERFIT_WIDTHS, val_fraction=0.0)
    start = time.perf_counter()
    result = train_stage1(cfg, units)
    elapsed = time.perf_counter() - start
    score = evaluate_batch(reconstruct(result.model, x), x).pearson
    print(f"stage-I overfit pearson {score:.4f} in {elapsed:.0f} s")
    assert len(result.history) == 500
    assert score >= 0.95
    assert elapsed < 600


LEARN_EPOCHS = 60


@pytest.fixture(scope="module")
def learning_signal(tmp_path_factory):
    """Toy pipeline on one subject's 64 training images, for lam = 0 and lam = 1."""
    root = tmp_path_factory.mktemp("signal")
    pipeline.synth_command(RunConfig(preset="toy", out=str(root), synth_subjects=1))
    ds = Dataset(root)
    units = gather(ds, [(0, "train")], with_embeddings=True)
    base = RunConfig(preset="toy", data=str(root), epochs=LEARN_EPOCHS, lr=1e-3, val_fraction=0.0)
    s1 = train_stage1(base, units)
    runs = {}
    for lam in (0.0, 1.0):
        encoder = TSCVAE(s1.model.arch, np.random.default_rng(0))
        encoder.load_state_dict(s1.model.state_dict())
        runs[lam] = (encoder, train_stage2(base.replace(lam=lam), units, encoder))
    return units, runs


def shuffled_baseline(pred, truth, rng, draws=20):
    """Mean Pearson of predictions against derangements of the ground truth."""
    n = len(truth)
    scores = []
    for _ in range(draws):
        perm = rng.permutation(n)
        while np.any(perm == np.arange(n)):
            perm = rng.permutation(n)
        scores.append(evaluate_batch(pred, truth[perm]).pearson)
    return float(np.mean(scores))


@criterion(6, "stage-II learning signal over the shuffled-pairing baseline, loss identity")
def test_learning_signal_beats_shuffled(learning_signal):
    units, runs = learning_signal
    assert len(units) == 64
    encoder, result = runs[1.0]
    pred, _ = predict(encoder, result.mapper, units.embeddings)
    matched = evaluate_batch(pred, units.signals).pearson
    shuffled = shuffled_baseline(pred, units.signals, np.random.default_rng(60))
    print(f"matched pearson {matched:.4f}, shuffled {shuffled:.4f}, lift {matched - shuffled:.4f}")
    assert matched - shuffled >= 0.2


@criterion(6, "stage-II learning signal over the shuffled-pairing baseline, loss identity")
def test_logging_identity_for_both_lambdas(learning_signal):
    _, runs = learning_signal
    for lam, (_, result) in runs.items():
        assert all(s["lam"] == lam for s in result.steps)
        assert identity_residual(result.steps) <= 1e-6


@criterion(7, "amplitude mechanism and scale bridge")
@pytest.mark.parametrize("c", [0.4, 2.5])
def test_scaled_prediction_signature(c):
    y = np.random.default_rng(70).standard_normal((63, 250))
    y_hat = c * y
    assert abs(pearson(y_hat, y) - 1.0) <= 1e-12
    assert abs(cosine(y_hat, y) - 1.0) <= 1e-12
    assert mse(y_hat, y) == pytest.approx((1 - c) ** 2 * np.mean(y ** 2), rel=1e-12)
    assert mse(y_hat, y) > 0.1


@criterion(7, "amplitude mechanism and scale bridge")
def test_bridge_on_published_stds():
    report = scale_bridge_check(0.0247, 1.0465, 2.5414)
    assert report.passed
    assert report.proxy_over_clip == pytest.approx(42.4, abs=0.05)
    assert report.latent_over_proxy == pytest.approx(2.43, abs=0.005)


@criterion(8, "LOSO training counts and region partitions")
def test_loso_counts():
    for name, per_fold in (("eeg", 148_860), ("meg", 66_744)):
        preset = get_preset(name)
        plan = make_splits(preset.n_subjects, "loso")
        count = preset_unit_count(preset)
        assert [plan.train_units(f, count) for f in plan.folds] == [per_fold] * preset.n_subjects


@criterion(8, "LOSO training counts and region partitions")
def test_region_partitions():
    sizes = {"eeg": {"frontal": 22, "central": 14, "temporal": 10, "parietal": 14, "occipital": 3},
             "meg": {"frontal": 67, "central": 52, "parietal": 45, "occipital": 39, "temporal": 68}}
    for name, total, vp in (("eeg", 63, 13), ("meg", 271, 107)):
        regions = region_config(name)
        assert {r: len(regions[r]) for r in REGIONS} == sizes[name]
        assert sorted(i for r in REGIONS for i in regions[r]) == list(range(total))
        assert len(region_mask(name, VISUAL_PATHWAY)) == vp


def run_cli_pipeline(root):
    common = ["--preset", "toy", "--seed", "11"]
    data, run = str(root / "data"), str(root / "run")
    steps = [
        ["synth", *common, "--out", data],
        ["train-stage1", *common, "--data", data, "--out", run, "--epochs", "3"],
        ["train-stage2", *common, "--data", data, "--out", run, "--epochs", "3",
         "--ckpt", os.path.join(run, "stage1.vibe")],
        ["infer", *common, "--data", data, "--out", run,
         "--ckpt", os.path.join(run, "stage1.vibe"), os.path.join(run, "stage2.vibe")],
        ["eval", *common, "--data", data, "--out", run, "--pred", os.path.join(run, "predictions.vibe")],
    ]
    for argv in steps:
        assert cli.main(argv) == 0, argv
    files = {}
    for dirpath, _, names in os.walk(root):
        for n in names:
            path = os.path.join(dirpath, n)
            with open(path, "rb") as fh:
                files[os.path.relpath(path, root)] = fh.read()
    return files


@criterion(9, "byte-identical end-to-end runs")
def test_end_to_end_determinism(tmp_path, capsys):
    first = run_cli_pipeline(tmp_path / "one")
    second = run_cli_pipeline(tmp_path / "two")
    capsys.readouterr()
    assert sorted(first) == sorted(second)
    for name in ("run/stage1.vibe", "run/stage2.vibe", "run/predictions.vibe", "run/report.csv",
                 "run/report.svg", "data/manifest.txt"):
        assert name in first
    assert [n for n in first if first[n] != second[n]] == []


@criterion(10, "container fuzz round trip and corrupt-header rejection")
def test_container_fuzz():
    rng = np.random.default_rng(100)
    for trial in range(1000):
        arr = random_tensor(rng)
        back = decode(encode({"t": arr}, {"trial": trial}))["t"]
        assert back.dtype == arr.dtype and back.shape == arr.shape and back.tobytes() == arr.tobytes()


@criterion(10, "container fuzz round trip and corrupt-header rejection")
def test_corrupt_headers_rejected(tmp_path):
    buf = encode({"a": np.arange(6.0).reshape(2, 3), "b": np.ones(4, np.float32)}, {"k": "v"})
    corruptions = [b"XIBE" + buf[4:], buf[:4] + (9).to_bytes(4, "little") + buf[8:]]
    corruptions += [buf[:i] for i in range(len(buf))]
    rng = np.random.default_rng(101)
    for _ in range(200):
        bad = bytearray(buf)
        pos = int(rng.integers(0, 40))
        bad[pos] ^= 1 << int(rng.integers(0, 8))
        corruptions.append(bytes(bad))
    rejected = 0
    for bad in corruptions:
        try:
            c = decode(bad)
        except (FormatError, TruncatedError):
            rejected += 1
            continue
        # a flipped bit inside the payload or a name can still parse; it must then round-trip exactly
        assert encode(c.tensors, c.manifest) == bad
    assert rejected >= len(buf) + 2
