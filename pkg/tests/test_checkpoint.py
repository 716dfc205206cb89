"""Checkpoint round trips and manifest validation."""

import json
import os

import numpy as np
import pytest

from glt.checkpoint import (BLOB_NAME, MANIFEST_NAME, CheckpointError,
                            load_checkpoint, save_checkpoint)
from glt.model import ModelConfig, forward, init_params


@pytest.fixture()
def saved(tmp_path):
    cfg = ModelConfig(vocab_size=7, n_answers=5, h_dim=8, feat_dim=4, max_len=5,
                      grounded=False, dropout=0.0)
    params = init_params(cfg, np.random.default_rng(3))
    out = str(tmp_path / "ck")
    save_checkpoint(out, params, cfg, {"step": 12, "best_val_acc": 0.5})
    return out, params, cfg


class TestRoundTrip:
    def test_bitwise_params(self, saved):
        out, params, cfg = saved
        loaded, cfg2, manifest = load_checkpoint(out)
        assert cfg2 == cfg
        assert set(loaded) == set(params)
        for name in params:
            assert np.array_equal(loaded[name].data, params[name].data), name
            assert loaded[name].data.dtype == params[name].data.dtype
        assert manifest["step"] == 12

    def test_forward_bitwise(self, saved):
        out, params, cfg = saved
        loaded, cfg2, _ = load_checkpoint(out)
        ids = np.array([[1, 4], [2, 0], [3, 3], [6, 5]])
        r1 = forward(params, cfg, ids)
        r2 = forward(loaded, cfg2, ids)
        assert np.array_equal(r1.answer_logits.data, r2.answer_logits.data)

    def test_loaded_params_require_grad(self, saved):
        out, _, _ = saved
        loaded, _, _ = load_checkpoint(out)
        assert all(t.requires_grad for t in loaded.values())

    def test_resave_identical_bytes(self, saved, tmp_path):
        out, _, _ = saved
        loaded, cfg2, manifest = load_checkpoint(out)
        again = str(tmp_path / "ck2")
        extra = {k: v for k, v in manifest.items()
                 if k not in ("format", "model_config", "params")}
        save_checkpoint(again, loaded, cfg2, extra)
        for name in (BLOB_NAME, MANIFEST_NAME):
            with open(os.path.join(out, name), "rb") as a, \
                 open(os.path.join(again, name), "rb") as b:
                assert a.read() == b.read(), name


class TestValidation:
    def _manifest(self, out):
        with open(os.path.join(out, MANIFEST_NAME)) as fh:
            return json.load(fh)

    def _write(self, out, manifest):
        with open(os.path.join(out, MANIFEST_NAME), "w") as fh:
            json.dump(manifest, fh)

    def test_corrupt_nbytes_names_parameter(self, saved):
        out, _, _ = saved
        manifest = self._manifest(out)
        manifest["params"]["w_l"]["nbytes"] += 4
        self._write(out, manifest)
        with pytest.raises(CheckpointError, match="w_l"):
            load_checkpoint(out)

    def test_corrupt_shape_names_parameter(self, saved):
        out, _, _ = saved
        manifest = self._manifest(out)
        manifest["params"]["ff_rep_b"]["shape"] = [9]
        self._write(out, manifest)
        with pytest.raises(CheckpointError, match="ff_rep_b"):
            load_checkpoint(out)

    def test_truncated_blob_names_parameter(self, saved):
        out, _, _ = saved
        blob_path = os.path.join(out, BLOB_NAME)
        size = os.path.getsize(blob_path)
        with open(blob_path, "rb") as fh:
            data = fh.read(size - 10)
        with open(blob_path, "wb") as fh:
            fh.write(data)
        with pytest.raises(CheckpointError, match="w_ans"):  # last parameter saved
            load_checkpoint(out)

    def test_config_mismatch_rejected(self, saved):
        out, _, cfg = saved
        import dataclasses
        smaller = dataclasses.replace(cfg, h_dim=4)
        with pytest.raises(CheckpointError, match="h_dim"):
            load_checkpoint(out, expected=smaller)

    def test_matching_expected_accepted(self, saved):
        out, _, cfg = saved
        loaded, _, _ = load_checkpoint(out, expected=cfg)
        assert loaded

    def test_unknown_format_rejected(self, saved):
        out, _, _ = saved
        manifest = self._manifest(out)
        manifest["format"] = "glt-checkpoint-v999"
        self._write(out, manifest)
        with pytest.raises(CheckpointError, match="format"):
            load_checkpoint(out)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(str(tmp_path))
