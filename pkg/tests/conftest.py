import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from wildsplat.io import load_dataset  # noqa: E402
from wildsplat.losses import LossConfig  # noqa: E402
from wildsplat.model import Model  # noqa: E402
from wildsplat.scene import Camera, SceneConfig  # noqa: E402
from wildsplat.synth import SynthConfig, synth_scene  # noqa: E402
from wildsplat.trainer import TrainConfig, Trainer, psnr, render_view  # noqa: E402

# acceptance criterion number -> (passed, detail), filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")


def tiny_model(seed=1, n_points=30, sky=0, randomize_mapper=True):
    rng = np.random.default_rng(seed)
    pts = rng.normal(0, 1, (n_points, 3))
    cfg = SceneConfig(n_offsets=3, feature_dim=8, appearance_dim=4, uncertainty_dim=4,
                      hidden=8, sky_count=sky, voxel_size=1.0)
    m = Model.create(pts, ["a", "b"], cfg, rng, light_dim=4, transient_dim=3)
    if randomize_mapper:
        w = m.mapper.mlp.weights[-1]
        w[:] = rng.normal(0, 0.3, w.shape)
    return m


def tiny_camera(width=24, height=20, z=-6.0):
    return Camera.look_at([0, 0, z], [0, 0, 0], [0, -1, 0], 30, 30, width / 2, height / 2,
                          width, height)


@pytest.fixture
def model():
    return tiny_model()


@pytest.fixture
def camera():
    return tiny_camera()


@pytest.fixture(scope="session")
def synth_manifest(tmp_path_factory):
    return synth_scene(SynthConfig(), tmp_path_factory.mktemp("synth") / "data")


@pytest.fixture(scope="session")
def dataset(synth_manifest):
    return load_dataset(synth_manifest)


def mean_train_psnr(model, ds):
    vals = [psnr(np.clip(render_view(model, r.camera, r.id).mapped, 0, 1), r.image)
            for r in ds.train]
    return float(np.mean(vals))


@pytest.fixture(scope="session")
def trained(dataset):
    """One default 5000-iteration run on the default synthetic scene, with probes."""
    import time

    tr = Trainer.create(dataset, TrainConfig(log_every=0))
    probes = {"recompose": 0.0}

    def probe(t):
        if t.iteration in (100, 2000):
            probes[f"psnr{t.iteration}"] = mean_train_psnr(t.model, dataset)
        br = t.history[-1]
        probes["recompose"] = max(probes["recompose"], abs(br.recompose() - br.total))

    start = time.perf_counter()
    for _ in range(tr.cfg.iterations):
        tr.step()
        probe(tr)
    probes["seconds"] = time.perf_counter() - start
    return tr, probes


@pytest.fixture(scope="session")
def trained_no_boundary(dataset):
    tr = Trainer.create(dataset, TrainConfig(log_every=0, loss=LossConfig(enable_boundary=False)))
    for _ in range(tr.cfg.iterations):
        tr.step()
    return tr


@pytest.fixture(scope="session")
def adapted(trained, dataset):
    from wildsplat.trainer import adapt_embeddings

    model = trained[0].model
    return {r.id: adapt_embeddings(model, r) for r in dataset.test}
