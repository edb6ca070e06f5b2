import dataclasses

import numpy as np
import pytest

from oracles import roc_auc_pairs
from wildsplat.io import ImageRecord, load_dataset, save_checkpoint
from wildsplat.scene import SceneConfig
from wildsplat.synth import SynthConfig, synth_scene
from wildsplat.trainer import (EvalReport, NumericAbort, TrainConfig, Trainer, adapt_embeddings,
                               evaluate, format_progress, half_columns, param_hash, psnr,
                               render_view, roc_auc, swap_lighting, train)

RNG = np.random.default_rng


def short_config(**kw):
    base = dict(iterations=30, prune_from=10, prune_every=10, prune_window=5, log_every=0,
                scene=SceneConfig(n_offsets=4, feature_dim=16, hidden=16), light_dim=8,
                transient_dim=4)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def small_ds(tmp_path_factory):
    cfg = SynthConfig(width=48, height=40, focal=60.0, n_poses=4, test_poses=(1,), n_objects=2,
                      prims_per_object=8, occluder_size=(6, 12))
    return load_dataset(synth_scene(cfg, tmp_path_factory.mktemp("small") / "d"))


@pytest.fixture(scope="module")
def short_run(small_ds):
    tr = Trainer.create(small_ds, short_config())
    for _ in range(tr.cfg.iterations):
        tr.step()
    return tr


def test_zero_iterations_is_initialisation(small_ds):
    ckpt, hist = train(small_ds, short_config(iterations=0))
    assert hist == [] and ckpt.iteration == 0
    fresh = Trainer.create(small_ds, short_config())
    assert param_hash(ckpt.model, ()) == param_hash(fresh.model, ())


def test_training_twice_bit_identical(small_ds, short_run, tmp_path):
    ckpt, _ = train(small_ds, short_config())
    save_checkpoint(tmp_path / "a.nxsp", ckpt)
    save_checkpoint(tmp_path / "b.nxsp", short_run.checkpoint())
    assert (tmp_path / "a.nxsp").read_bytes() == (tmp_path / "b.nxsp").read_bytes()


def test_every_parameter_receives_gradient(short_run):
    assert set(short_run.grad_seen) == set(short_run.model.params())


def test_breakdown_recomposes(short_run):
    for br in short_run.history:
        assert abs(br.recompose() - br.total) < 1e-9


def test_pruning_only_removes_low_opacity(short_run):
    cfg = short_run.cfg
    assert len(short_run.prune_log) == 3  # iterations 10, 20, 30
    limit = cfg.prune_threshold * cfg.prune_window
    for report, acc in short_run.prune_log:
        assert np.all(acc[report.removed] < limit)
        assert report.after == report.before - len(report.removed)
    # a pruned model still renders
    rec = short_run.dataset.train[0]
    assert np.isfinite(render_view(short_run.model, rec.camera, rec.id).mapped).all()


def test_prune_schedule_with_threshold_zero_keeps_all(small_ds):
    tr = Trainer.create(small_ds, short_config(iterations=12, prune_threshold=0.0))
    n = len(tr.model.kernels)
    for _ in range(12):
        tr.step()
    assert len(tr.model.kernels) == n and len(tr.prune_log) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_aborts_with_term(small_ds):
    tr = Trainer.create(small_ds, short_config())
    tr.model.kernels.features[:] = np.nan
    with pytest.raises(NumericAbort) as exc:
        tr.step()
    assert exc.value.iteration == 1 and exc.value.term in ("total", "color", "dssim", "l1", "uncert", "reg")


def test_progress_line_fields(short_run):
    line = format_progress(7, short_run.history[0], 12)
    keys = [tok.split("=")[0] for tok in line.split()]
    assert keys == ["iter", "total", "color", "dssim", "l1", "uncert", "reg", "kernels"]


def test_rejects_nonpositive_lr():
    with pytest.raises(ValueError):
        TrainConfig(lr_heads=0.0)


def test_half_columns():
    assert half_columns(97, "left") == slice(0, 48)
    assert half_columns(97, "right") == slice(48, 97)
    with pytest.raises(ValueError):
        half_columns(10, "top")


# -- adaptation and evaluation ----------------------------------------------

def test_adaptation_zero_iterations_unchanged(short_run, small_ds):
    rec = small_ds.test[0]
    init = (RNG(0).normal(size=8), RNG(1).normal(size=4))
    light, trans = adapt_embeddings(short_run.model, rec, iterations=0, init=init)
    assert np.array_equal(light, init[0]) and np.array_equal(trans, init[1])


def test_adaptation_freezes_model_and_lowers_left_l1(short_run, small_ds):
    model = short_run.model
    before = param_hash(model, ())
    rec = small_ds.test[0]
    zeros = (np.zeros(8), np.zeros(4))
    light, trans = adapt_embeddings(model, rec, iterations=30, init=zeros)
    assert param_hash(model, ()) == before
    cols = half_columns(rec.camera.width, "left")

    def left_l1(lv, tv):
        out = render_view(model, rec.camera, lv, tv)
        return np.abs(out.mapped[:, cols] - rec.image[:, cols]).mean()

    assert left_l1(light, trans) < left_l1(*zeros)


def test_adaptation_defaults():
    import inspect
    assert inspect.signature(adapt_embeddings).parameters["iterations"].default == 100
    assert TrainConfig().adapt_iterations == 100
    assert inspect.signature(evaluate).parameters["region"].default == "right"


def test_psnr_values():
    a = RNG(0).uniform(0.2, 0.8, (8, 8, 3))
    assert psnr(a, a) == 99.0
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)


def self_record(model, camera, light, trans, image=None):
    out = render_view(model, camera, light, trans)
    img = np.clip(out.mapped, 0, 1) if image is None else image
    return ImageRecord("self", img, camera, "test")


def test_evaluate_perfect_and_left_corruption(short_run, small_ds):
    model = short_run.model
    cam = small_ds.test[0].camera
    emb = {"self": (np.zeros(8), np.zeros(4))}
    rec = self_record(model, cam, *emb["self"])
    rep = evaluate(model, [rec], emb)
    assert rep.psnr["self"] == 99.0 and rep.ssim["self"] == pytest.approx(1.0, abs=1e-12)
    bad = rec.image.copy()
    bad[:, : cam.width // 2] = RNG(0).uniform(size=bad[:, : cam.width // 2].shape)
    rep2 = evaluate(model, [dataclasses.replace(rec, image=bad)], emb)
    assert rep2.psnr == rep.psnr and rep2.ssim == rep.ssim
    with pytest.raises(KeyError):
        evaluate(model, [rec], {})


def test_report_text(short_run):
    rep = EvalReport({"a": 25.0, "b": 27.0}, {"a": 0.9, "b": 0.8}, occlusion_auc=0.75)
    text = rep.to_text()
    assert "mean_psnr=26.000000" in text and "occlusion_auc=0.750000" in text
    assert text.splitlines()[-2].split()[0] == "a"


@pytest.mark.parametrize("seed", range(5))
def test_roc_auc_matches_pairs(seed):
    rng = RNG(seed)
    scores = rng.integers(0, 6, 200).astype(float)
    labels = rng.random(200) < 0.3
    assert roc_auc(scores, labels) == pytest.approx(roc_auc_pairs(scores, labels), abs=1e-12)


def test_render_view_light_forms(short_run, small_ds):
    model = short_run.model
    rec = small_ds.train[0]
    row = model.image_index(rec.id)
    by_id = render_view(model, rec.camera, rec.id)
    by_vec = render_view(model, rec.camera, model.light_emb[row], model.trans_emb[row])
    assert np.array_equal(by_id.mapped, by_vec.mapped)
    assert np.array_equal(by_id.mapped, render_view(model, rec.camera, rec.id).mapped)
    a, b = swap_lighting(model, rec.camera, small_ds.train[0].id, small_ds.train[1].id)
    assert np.array_equal(a.alpha, b.alpha) and np.array_equal(a.raw, b.raw)
    with pytest.raises(KeyError):
        render_view(model, rec.camera, "nope")


def test_default_run_improves_and_recomposes(trained):
    _, probes = trained
    assert probes["psnr100"] < probes["psnr2000"]
    assert probes["recompose"] < 1e-9
