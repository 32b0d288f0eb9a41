import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from toys import toy_config, toy_weights  # noqa: E402


@pytest.fixture(scope="session")
def small_config():
    return toy_config()


@pytest.fixture(scope="session")
def small_weights(small_config):
    return toy_weights(small_config, seed=0)


@pytest.fixture(scope="session")
def artifact_dir(tmp_path_factory, small_config):
    """On-disk toy artifacts shared by the service and CLI tests: a weight
    container, text embeddings, and labeled two-cluster sample images."""
    from vitseg.container import config_dict, random_weight_tensors, write_container
    from vitseg.imaging import save_label_map, save_raw_image
    from toys import orthogonal_text, split_labels, two_tone_image, write_text_container

    root = tmp_path_factory.mktemp("artifacts")
    tensors = random_weight_tensors(small_config, seed=31)
    write_container(root / "weights.lhtw", tensors, kind="vit_weights",
                    config=config_dict(small_config))
    write_text_container(root / "text.lhtw",
                         orthogonal_text(2, small_config.projection_dim),
                         ["left", "right"])

    image = two_tone_image(small_config)
    labels = split_labels(small_config)
    pixel_labels = labels.labels.reshape(4, 4).repeat(4, axis=0).repeat(4, axis=1)
    for i in range(3):
        save_raw_image(root / f"img{i}.lhtw", image)
        save_label_map(root / f"gt{i}.png", pixel_labels)

    from PIL import Image
    import numpy as np
    Image.fromarray((image * 255).astype(np.uint8)).save(root / "img.png")

    lines = [f"{root}/img{i}.lhtw {root}/gt{i}.png ds{i % 2}" for i in range(3)]
    (root / "samples.txt").write_text("\n".join(lines) + "\n")
    return root


# ---------------------------------------------------------------------------
# acceptance reporting: one verdict line per release criterion

_ACCEPTANCE = {
    "test_c01_hoyer_closed_forms": ("c01", "hoyer-closed-forms"),
    "test_c02_head_decomposition_identity": ("c02", "head-decomposition"),
    "test_c03_ssr_alpha_zero_is_identity": ("c03", "ssr-alpha-zero-identity"),
    "test_c04_atr_spike_suite": ("c04", "atr-spike-suite"),
    "test_c05_auc_matches_brute_force_exactly": ("c05", "auc-exact-rank"),
    "test_c06_she_mask_properties": ("c06", "she-mask-properties"),
    "test_c07_miou_hand_fixtures": ("c07", "miou-hand-fixtures"),
    "test_c08_pipeline_determinism_across_runs_and_threads":
        ("c08", "pipeline-determinism"),
    "test_c09_engine_matches_exported_reference": ("c09", "export-parity"),
    "test_c10_directional_reproduction_on_real_weights":
        ("c10", "real-weights-directional"),
    "test_c11_exporter_round_trip": ("c11", "exporter-round-trip"),
}


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error", "skipped"):
        for rep in terminalreporter.stats.get(outcome, []):
            name = getattr(rep, "nodeid", "").rsplit("::", 1)[-1]
            entry = _ACCEPTANCE.get(name.split("[", 1)[0])
            if entry is None:
                continue
            if rep.passed:
                verdict = "PASS"
            elif rep.skipped:
                reason = ""
                if isinstance(rep.longrepr, tuple):
                    reason = f" ({rep.longrepr[2].removeprefix('Skipped: ')})"
                verdict = "SKIP" + reason
            else:
                verdict = "FAIL"
            # a failure in any phase trumps an earlier verdict for the test
            if entry[0] not in rows or verdict == "FAIL":
                rows[entry[0]] = (entry[1], verdict)
    if not rows:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(rows):
        label, verdict = rows[cid]
        terminalreporter.write_line(f"ACCEPTANCE {cid} {label}: {verdict}")
