"""Tests for the segmentation network."""

import pytest
import torch

from morel.checkpoint import module_digest
from morel.motionops import seg_loss
from morel.segnet import (
    DECODER_CHANNELS,
    EMBEDDING_DIM,
    Encoder,
    MaskDecoder,
    SegNet,
    encoder_output_size,
)


def test_output_shapes():
    """Test output shapes at the default frame size."""
    model = SegNet(num_masks=20, seed=0)
    out = model(torch.rand(3, 2, 84, 84))
    assert out.masks.shape == (3, 20, 84, 84)
    assert out.object_translations.shape == (3, 20, 2)
    assert out.camera_translation.shape == (3, 2)
    assert out.embedding.shape == (3, EMBEDDING_DIM)
    assert out.num_masks == 20
    assert out.masks.min() > 0 and out.masks.max() < 1


def test_layer_sizes():
    """Test the derived fully-connected sizes."""
    assert encoder_output_size(84) == 7
    encoder = Encoder(frame_size=84)
    assert encoder.fc.in_features == 64 * 7 * 7
    decoder = MaskDecoder(20, frame_size=84)
    assert decoder.fc.out_features == DECODER_CHANNELS * 21 * 21


def test_smallest_frame_size():
    """Test the smallest supported frame and rejection of smaller ones."""
    assert encoder_output_size(36) == 1
    SegNet(num_masks=2, frame_size=36)(torch.rand(1, 2, 36, 36))
    with pytest.raises(ValueError, match="too small"):
        Encoder(frame_size=24)
    with pytest.raises(ValueError, match="multiple of 4"):
        MaskDecoder(3, frame_size=38)


def test_wrong_input_shape():
    """Test that mis-shaped input is an argument error."""
    model = SegNet(num_masks=2, frame_size=36)
    with pytest.raises(ValueError, match="encoder input"):
        model(torch.rand(1, 3, 36, 36))
    with pytest.raises(ValueError, match="embedding"):
        model.decode(torch.rand(1, 100))


def test_seeded_init_is_reproducible():
    """Test that the seed alone determines the initial parameters."""
    torch.manual_seed(1)
    a = SegNet(num_masks=3, frame_size=36, seed=7)
    torch.manual_seed(2)
    b = SegNet(num_masks=3, frame_size=36, seed=7)
    c = SegNet(num_masks=3, frame_size=36, seed=8)
    assert module_digest(a) == module_digest(b)
    assert module_digest(a) != module_digest(c)


def test_biases_start_at_zero():
    """Test orthogonal initialization leaves biases at zero."""
    model = SegNet(num_masks=3, frame_size=36, seed=0)
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            assert torch.count_nonzero(p) == 0, name


def test_zero_embedding_decodes_to_half_masks_and_no_motion():
    """Test that with zero biases a zero embedding gives 0.5 masks and zero translations."""
    model = SegNet(num_masks=3, frame_size=36, seed=0)
    with torch.no_grad():
        out = model.decode(torch.zeros(2, EMBEDDING_DIM))
    assert torch.equal(out.masks, torch.full((2, 3, 36, 36), 0.5))
    assert torch.equal(out.object_translations, torch.zeros(2, 3, 2))
    assert torch.equal(out.camera_translation, torch.zeros(2, 2))


def test_translations_take_both_signs():
    """Test that translations are unbounded linear outputs, negatives included."""
    model = SegNet(num_masks=3, frame_size=36, seed=0)
    with torch.no_grad():
        out = model.decode(torch.randn(4, EMBEDDING_DIM, generator=torch.Generator().manual_seed(0)))
    assert (out.object_translations < 0).any()
    assert (out.object_translations > 0).any()


def test_embedding_is_the_only_path(monkeypatch):
    """Test that outputs depend on the input only through the embedding."""
    model = SegNet(num_masks=4, frame_size=36, seed=0)
    fixed = torch.rand(1, EMBEDDING_DIM)
    monkeypatch.setattr(model.encoder, "forward", lambda x: fixed.expand(len(x), -1))
    a = model(torch.rand(1, 2, 36, 36))
    b = model(torch.rand(1, 2, 36, 36))
    assert torch.equal(a.masks, b.masks)
    assert torch.equal(a.object_translations, b.object_translations)
    assert torch.equal(a.camera_translation, b.camera_translation)


def test_decode_matches_forward():
    """Test that forward equals decode(encode(x))."""
    model = SegNet(num_masks=3, frame_size=36, seed=1)
    x = torch.rand(2, 2, 36, 36)
    out = model(x)
    again = model.decode(model.encode(x))
    assert torch.equal(out.masks, again.masks)
    assert torch.equal(out.embedding, again.embedding)


def test_network_gradient_matches_finite_differences(grad_check):
    """Test seg-loss gradients through the whole network in double precision."""
    torch.manual_seed(0)
    model = SegNet(num_masks=3, frame_size=36, seed=0).double()
    pair = torch.rand(2, 2, 36, 36, dtype=torch.float64)

    def loss():
        return seg_loss(pair, model(pair), reg_reduction="mean").total

    grad_check(loss, [model.encoder.convs[0].weight, model.translation.fc.weight, model.decoder.head.weight])
