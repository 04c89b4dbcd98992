import numpy as np
import pytest
import torch

from promptad.config import EncoderConfig
from promptad.errors import FormatError, InputError
from promptad.vision import (FeaturePyramid, StageFeatures, ToyVisionEncoder,
                             load_feature_pyramid, save_feature_pyramid)


@pytest.fixture(scope="module")
def encoder():
    return ToyVisionEncoder(EncoderConfig(), image_size=64, seed=0)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(1).random((64, 64, 3)).astype(np.float32)


def test_stage_shapes(encoder, image):
    pyr = encoder.encode_image(image)
    assert len(pyr.stages) == 4
    for stage in pyr.stages:
        assert stage.qkv.shape == (8, 8, 64)
        assert stage.vv.shape == (8, 8, 64)
    assert pyr.global_feature.shape == (64,)
    assert pyr.image_size == (64, 64)


def test_determinism(encoder, image):
    a = encoder.encode_image(image)
    b = encoder.encode_image(image)
    assert torch.equal(a.global_feature, b.global_feature)
    for sa, sb in zip(a.stages, b.stages):
        assert torch.equal(sa.qkv, sb.qkv)
        assert torch.equal(sa.vv, sb.vv)


def test_vv_equals_qkv_before_switch(encoder, image):
    # taps are (2, 4, 6, 8) and the vv stream starts at layer 3
    pyr = encoder.encode_image(image)
    assert torch.equal(pyr.stages[0].qkv, pyr.stages[0].vv)
    assert not torch.equal(pyr.stages[1].qkv, pyr.stages[1].vv)


def test_vv_attention_row_stochastic(encoder, image):
    weights = encoder.vv_attention_weights(image, layer=4)
    rows = weights.sum(dim=-1)
    assert torch.allclose(rows, torch.ones_like(rows), atol=1e-6)


def test_shapes_invariant_to_weights(image):
    shapes = []
    for seed in (0, 123):
        enc = ToyVisionEncoder(EncoderConfig(), image_size=64, seed=seed)
        pyr = enc.encode_image(image)
        shapes.append([tuple(s.qkv.shape) for s in pyr.stages])
    assert shapes[0] == shapes[1]


def test_seed_reproducible(image):
    a = ToyVisionEncoder(EncoderConfig(), image_size=64, seed=7)
    torch.manual_seed(999)  # global RNG state must not matter
    b = ToyVisionEncoder(EncoderConfig(), image_size=64, seed=7)
    assert torch.equal(a.encode_image(image).global_feature,
                       b.encode_image(image).global_feature)


def test_rejects_bad_dimensions(encoder):
    with pytest.raises(InputError):
        encoder.encode_image(np.zeros((60, 64, 3), dtype=np.float32))
    with pytest.raises(InputError):
        encoder.encode_image(np.zeros((64, 64), dtype=np.float32))


def test_pyramid_round_trip(tmp_path, encoder, image):
    pyr = encoder.encode_image(image)
    path = tmp_path / "pyr.fpk"
    save_feature_pyramid(pyr, path)
    loaded = load_feature_pyramid(path)
    assert torch.equal(loaded.global_feature, pyr.global_feature)
    assert loaded.image_size == pyr.image_size
    for a, b in zip(loaded.stages, pyr.stages):
        assert torch.equal(a.qkv, b.qkv)
        assert torch.equal(a.vv, b.vv)


def test_truncated_pyramid_file(tmp_path, encoder, image):
    path = tmp_path / "pyr.fpk"
    save_feature_pyramid(encoder.encode_image(image), path)
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(FormatError):
        load_feature_pyramid(path)


def test_manifest_stage_count_mismatch(tmp_path, encoder, image):
    from promptad import tensorio

    path = tmp_path / "pyr.fpk"
    save_feature_pyramid(encoder.encode_image(image), path)
    tensors = tensorio.read_tensors(path)
    tensors["meta"] = np.array([5, 64, 64], dtype=np.float32)  # claims 5 stages
    tensorio.write_tensors(path, tensors)
    with pytest.raises(FormatError) as err:
        load_feature_pyramid(path)
    assert "stage" in str(err.value)


def test_pyramid_rejects_mixed_channels():
    with pytest.raises(InputError):
        FeaturePyramid(
            stages=[StageFeatures(torch.zeros(2, 2, 8), torch.zeros(2, 2, 8))],
            global_feature=torch.zeros(16), image_size=(16, 16))
