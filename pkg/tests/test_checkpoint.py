"""Checkpoint container round trips and failure modes."""

import numpy as np
import pytest
import torch

from msfseg.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from msfseg.config import ModelConfig
from msfseg.data import SupportSequence
from msfseg.errors import FormatError
from msfseg.model import MSFSegNet

CFG = ModelConfig(input_size=32, channels=(8, 16), head_channels=8,
                  fused_channels=8, decoder_channels=(16, 8))


class TestCheckpoint:
    def test_round_trip_preserves_predictions(self, tmp_path):
        torch.manual_seed(0)
        model = MSFSegNet(CFG)
        path = tmp_path / "m.msfckpt"
        save_checkpoint(model, path, extra={"note": "round-trip"})
        back, header = load_checkpoint(path)
        assert header["extra"]["note"] == "round-trip"
        for (ka, va), (kb, vb) in zip(sorted(model.state_dict().items()),
                                      sorted(back.state_dict().items())):
            assert ka == kb
            assert torch.equal(va, vb), ka
        rng = np.random.default_rng(0)
        q = rng.random((32, 32), dtype=np.float32)
        sup = SupportSequence(slices=rng.random((1, 32, 32), dtype=np.float32),
                              masks=(rng.random((1, 32, 32)) > 0.5).astype(np.uint8))
        np.testing.assert_array_equal(model.predict(q, [sup]).logits,
                                      back.predict(q, [sup]).logits)

    def test_digest_stable_and_sensitive(self, tmp_path):
        torch.manual_seed(1)
        model = MSFSegNet(CFG)
        p1, p2 = tmp_path / "a.msfckpt", tmp_path / "b.msfckpt"
        save_checkpoint(model, p1)
        save_checkpoint(model, p2)
        assert checkpoint_digest(p1) == checkpoint_digest(p2)
        with torch.no_grad():
            next(model.parameters()).add_(0.1)
        save_checkpoint(model, p2)
        assert checkpoint_digest(p1) != checkpoint_digest(p2)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk"
        path.write_bytes(b"NOTCKPT!" + b"\0" * 32)
        with pytest.raises(FormatError, match="magic"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        torch.manual_seed(2)
        model = MSFSegNet(CFG)
        path = tmp_path / "m.msfckpt"
        save_checkpoint(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-100])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)
