import numpy as np
import pytest
import torch

from vitseg_export.convert import (OPENAI_IMAGE_MEAN, OPENAI_IMAGE_STD,
                                   extract_vision)
from vitseg_export.errors import ExportError
from vitseg_export.testing import tiny_model
from vitseg_export.vision import export_vision


@pytest.fixture(scope="module")
def exported(tiny, tmp_path_factory):
    model, _ = tiny
    path = tmp_path_factory.mktemp("vision") / "weights.lhtw"
    manifest = export_vision(model, path, source="tiny")
    return model, path, manifest


class TestExport:
    def test_engine_validates_the_container(self, exported):
        from vitseg.container import load_weights

        _, path, _ = exported
        weights = load_weights(path)
        cfg = weights.config
        assert (cfg.layers, cfg.heads, cfg.width) == (3, 2, 64)
        assert (cfg.patch_size, cfg.image_size) == (4, 16)
        assert cfg.ln_eps == pytest.approx(1e-5)
        assert cfg.projection_dim == 24
        assert weights.pre_norm is not None

    def test_manifest_traces_every_tensor(self, exported):
        from vitseg.container import read_container

        _, path, manifest = exported
        header, tensors = read_container(path)
        assert set(manifest.tensor_map) == set(tensors)
        for name, entry in manifest.tensor_map.items():
            assert entry["source"], name
            assert entry["transform"], name
        assert header["meta"]["source"] == "tiny"
        assert header["meta"]["tensor_map"] == manifest.tensor_map

    def test_linear_weights_are_transposed(self, exported):
        from vitseg.container import read_container

        model, path, _ = exported
        _, tensors = read_container(path)
        attn = model.vision_model.encoder.layers[1].self_attn
        np.testing.assert_array_equal(
            tensors["layers.1.attn_q_w"], attn.q_proj.weight.detach().numpy().T)
        np.testing.assert_array_equal(
            tensors["layers.1.attn_o_w"], attn.out_proj.weight.detach().numpy().T)
        np.testing.assert_array_equal(
            tensors["visual_proj"],
            model.visual_projection.weight.detach().numpy().T)

    def test_folded_patch_projection_matches_conv(self, exported):
        model, path, _ = exported
        from vitseg.container import read_container

        _, tensors = read_container(path)
        rng = np.random.default_rng(3)
        patch = rng.random((4, 4, 3)).astype(np.float32)  # one patch, unit range
        flat = patch.transpose(2, 0, 1).reshape(-1)  # channel-major like the engine
        ours = tensors["patch_proj"] @ flat.astype(np.float64) \
            + tensors["patch_bias"].astype(np.float64)

        mean = np.asarray(OPENAI_IMAGE_MEAN)
        std = np.asarray(OPENAI_IMAGE_STD)
        normalized = (patch.astype(np.float64) - mean) / std
        pixel = torch.from_numpy(normalized.transpose(2, 0, 1)[None, :].astype(np.float32))
        with torch.no_grad():
            theirs = model.vision_model.embeddings.patch_embedding(pixel)
        np.testing.assert_allclose(ours, theirs[0, :, 0, 0].numpy(),
                                   rtol=0, atol=1e-5)

    def test_re_export_is_byte_identical(self, exported, tmp_path):
        model, path, _ = exported
        again = tmp_path / "again.lhtw"
        export_vision(model, again, source="tiny")
        assert again.read_bytes() == path.read_bytes()


class TestRejections:
    def test_corrupt_source_shape_names_the_tensor(self, tmp_path):
        model, _ = tiny_model(seed=1)
        layer = model.vision_model.encoder.layers[0]
        layer.self_attn.q_proj.weight = torch.nn.Parameter(torch.zeros(3, 3))
        with pytest.raises(ExportError,
                           match=r"encoder\.layers\.0\.self_attn\.q_proj\.weight"):
            export_vision(model, tmp_path / "w.lhtw")

    def test_missing_source_tensor(self, tmp_path):
        model, _ = tiny_model(seed=1)
        del model.vision_model.encoder.layers[2].mlp.fc2.bias
        with pytest.raises(ExportError, match=r"missing tensor .*fc2\.bias"):
            export_vision(model, tmp_path / "w.lhtw")

    def test_tower_without_projection(self, tmp_path, tiny):
        model, _ = tiny
        with pytest.raises(ExportError, match="projection"):
            export_vision(model.vision_model, tmp_path / "w.lhtw")

    def test_not_a_vision_model(self):
        with pytest.raises(ExportError, match="unknown architecture"):
            extract_vision(object())

    def test_unsupported_ffn_ratio(self, tmp_path):
        from transformers import CLIPConfig, CLIPModel

        cfg = CLIPConfig(
            projection_dim=8,
            vision_config=dict(hidden_size=64, intermediate_size=96,
                               num_hidden_layers=3, num_attention_heads=2,
                               patch_size=4, image_size=16, hidden_act="gelu"),
            text_config=dict(hidden_size=32, intermediate_size=128,
                             num_hidden_layers=2, num_attention_heads=2,
                             vocab_size=64, max_position_embeddings=16),
        )
        model = CLIPModel(cfg).eval()
        with pytest.raises(ExportError, match="FFN width"):
            export_vision(model, tmp_path / "w.lhtw")

    def test_non_erf_activation_warns(self, tmp_path):
        from transformers import CLIPConfig, CLIPModel

        cfg = CLIPConfig(
            projection_dim=8,
            vision_config=dict(hidden_size=64, intermediate_size=256,
                               num_hidden_layers=3, num_attention_heads=2,
                               patch_size=4, image_size=16,
                               hidden_act="quick_gelu"),
            text_config=dict(hidden_size=32, intermediate_size=128,
                             num_hidden_layers=2, num_attention_heads=2,
                             vocab_size=64, max_position_embeddings=16),
        )
        model = CLIPModel(cfg).eval()
        with pytest.warns(UserWarning, match="quick_gelu"):
            export_vision(model, tmp_path / "w.lhtw")


def test_vitb16_architecture_constants():
    """The published base model exports to L=12 H=12 D=768 P=16 proj=512,
    with tensor shapes following directly from those constants."""
    import types

    from transformers import CLIPVisionConfig, CLIPVisionModel

    from vitseg_export.cli import ARCHITECTURES

    torch.manual_seed(0)
    tower = CLIPVisionModel(
        CLIPVisionConfig(**ARCHITECTURES["vitb16"]["vision_config"]))
    model = types.SimpleNamespace(
        vision_model=tower,
        visual_projection=torch.nn.Linear(768, 512, bias=False))
    config, tensors, _ = extract_vision(model)
    assert config == {"layers": 12, "heads": 12, "width": 768, "patch_size": 16,
                      "image_size": 224, "ln_eps": pytest.approx(1e-5),
                      "projection_dim": 512}
    assert tensors["patch_proj"].shape == (768, 3 * 16 * 16)
    assert tensors["pos_embed"].shape == (1 + 14 * 14, 768)
    assert tensors["visual_proj"].shape == (768, 512)
    assert tensors["layers.11.ffn_w1"].shape == (768, 3072)
    assert len(tensors) == 7 + 2 + 16 * 12
