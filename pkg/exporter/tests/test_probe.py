import numpy as np
import pytest

from vitseg_export.container import read_container, write_container
from vitseg_export.errors import ExportError
from vitseg_export.probe import parity_probe
from vitseg_export.vision import export_vision


@pytest.fixture(scope="module")
def probe_setup(tiny, tmp_path_factory):
    model, _ = tiny
    root = tmp_path_factory.mktemp("probe")
    image = np.random.default_rng(5).random((16, 16, 3)).astype(np.float32)
    weights = root / "weights.lhtw"
    export_vision(model, weights, source="tiny")
    ref_path = root / "probe.lhtw"
    meta = parity_probe(model, image, ref_path)
    return model, image, weights, ref_path, meta


def stage_rel(a, b):
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-3))


def engine_worst_rel(weights_path, image, ref):
    """Engine forward replayed stage by stage against the reference."""
    from vitseg import engine
    from vitseg.container import load_weights

    weights = load_weights(weights_path)
    worst = {}
    x = engine.tokenize(image, weights)
    worst["layer_00"] = stage_rel(x.stacked(), ref["layer_00"])
    for i, lw in enumerate(weights.layers, start=1):
        x = engine.layer_forward(x, lw, cfg=weights.config)
        worst[f"layer_{i:02d}"] = stage_rel(x.stacked(), ref[f"layer_{i:02d}"])
    worst["projected"] = stage_rel(engine.project(x.stacked(), weights),
                                   ref["projected"])
    return worst


def test_emits_every_stage(probe_setup):
    _, _, _, ref_path, meta = probe_setup
    header, tensors = read_container(ref_path)
    assert meta["stages"] == ["layer_00", "layer_01", "layer_02", "layer_03",
                              "projected"]
    assert header["meta"]["ln_eps"] == pytest.approx(1e-5)
    assert tensors["layer_00"].shape == (17, 64)
    assert tensors["projected"].shape == (17, 24)


def test_probe_is_deterministic(probe_setup, tmp_path):
    model, image, _, ref_path, _ = probe_setup
    again = tmp_path / "again.lhtw"
    parity_probe(model, image, again)
    assert again.read_bytes() == ref_path.read_bytes()


def test_engine_parity_within_tolerance(probe_setup):
    _, image, weights_path, ref_path, _ = probe_setup
    _, ref = read_container(ref_path)
    worst = engine_worst_rel(weights_path, image, ref)
    assert max(worst.values()) <= 1e-3, worst


def test_ln_eps_mismatch_breaks_parity(probe_setup, tmp_path):
    """Negative control: a wrong norm epsilon in the container must push the
    comparison past tolerance, proving the parity check can fail."""
    _, image, weights_path, ref_path, _ = probe_setup
    header, tensors = read_container(weights_path)
    bad_config = dict(header["config"], ln_eps=1e-1)
    bad_path = tmp_path / "bad_eps.lhtw"
    write_container(bad_path, tensors, kind="vit_weights", config=bad_config)
    _, ref = read_container(ref_path)
    worst = engine_worst_rel(bad_path, image, ref)
    assert max(worst.values()) > 1e-3, worst


def test_rejects_wrong_geometry(tiny, tmp_path):
    model, _ = tiny
    out = tmp_path / "p.lhtw"
    with pytest.raises(ExportError, match="16×16"):
        parity_probe(model, np.zeros((8, 8, 3), dtype=np.float32), out)
    with pytest.raises(ExportError, match="H×W×3"):
        parity_probe(model, np.zeros((16, 16), dtype=np.float32), out)
