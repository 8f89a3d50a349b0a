"""Checkpoint format: round-trips, integrity errors, canonical headers."""

import json
import struct

import numpy as np
import pytest

from msdem.checkpoint import Checkpoint, FORMAT_VERSION, MAGIC, load_checkpoint, save_checkpoint
from msdem.errors import CheckpointError
from msdem.model import ModelConfig, MsdemModel
from msdem.stream import BackboneSpec, SynthStreamConfig, TaskSpec, build_stream, generate_synthetic_dataset
from msdem.trainer import TrainConfig, train_task


def trained_model(tmp_path, n_tasks=2, dtype="float32"):
    cfg = SynthStreamConfig(
        seed=31,
        backbones=[BackboneSpec("bb0", 8), BackboneSpec("bb1", 8)],
        n_domains=n_tasks,
        tasks_per_domain=1,
        classes_per_task=3,
        samples_per_class=10,
    )
    stream = build_stream(generate_synthetic_dataset(cfg, tmp_path / "data"))
    model = MsdemModel(stream.backbones, ModelConfig(d_e=8, heads=2, seed=3, dtype=dtype))
    log = None
    for t in range(1, n_tasks + 1):
        x, y = stream.train_data(t)
        log = train_task(model, stream.spec(t), x, y, TrainConfig(epochs_per_task=2, batch_size=8, seed=3))
        if t < n_tasks:
            stream.advance()
    return model, stream, log


class TestRoundTrip:
    def test_forward_outputs_bit_identical(self, tmp_path):
        model, stream, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        rebuilt, _ = load_checkpoint(path)
        for t in (1, 2):
            x, _ = stream.test_data(t)
            a, _ = model.forward_batch(x, t, mode="eval")
            b, _ = rebuilt.forward_batch(x, t, mode="eval")
            np.testing.assert_array_equal(a.data, b.data)
            np.testing.assert_array_equal(model.predict_batch(x, t), rebuilt.predict_batch(x, t))

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model, _, log = trained_model(tmp_path)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(model, p1, optimizers=log.optimizers, train_seed=3)
        Checkpoint.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_frozen_flags_survive(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        rebuilt, _ = load_checkpoint(path)
        for p in rebuilt.parameters():
            assert p.frozen == p.name.startswith("task01"), p.name
        rebuilt.audit_frozen()

    def test_float64_model_round_trips(self, tmp_path):
        model, stream, _ = trained_model(tmp_path, dtype="float64")
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        rebuilt, _ = load_checkpoint(path)
        x, _ = stream.test_data(1)
        a, _ = model.forward_batch(x, 1, mode="eval")
        b, _ = rebuilt.forward_batch(x, 1, mode="eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_current_task_and_specs_rebuilt(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        rebuilt, ckpt = load_checkpoint(path)
        assert rebuilt.current_task == 2
        assert rebuilt.task_specs[1].class_ids == model.task_specs[1].class_ids
        assert ckpt.header["relation_row_lengths"] == [1, 2]


class TestHeader:
    def test_header_json_is_canonical(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        blob = path.read_bytes()
        _, _, hlen = struct.unpack_from("<4sIQ", blob, 0)
        raw = blob[16 : 16 + hlen]
        parsed = json.loads(raw)
        assert raw == json.dumps(parsed, sort_keys=True, separators=(",", ":")).encode()

    def test_optimizer_section(self, tmp_path):
        model, _, log = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, optimizers=log.optimizers, train_seed=3)
        ckpt = Checkpoint.load(path)
        summary = dict((name, (lr, steps)) for name, lr, steps in ckpt.optimizer_summary())
        expected_steps = log.steps_per_epoch * log.epochs
        assert summary["expert"] == (1e-3, expected_steps)
        assert summary["router"] == (1e-2, expected_steps)
        assert summary["attention"] == (1e-3, expected_steps)
        assert ckpt.header["train_seed"] == 3

    def test_optimizer_moments_stored_exactly(self, tmp_path):
        model, _, log = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, optimizers=log.optimizers)
        ckpt = Checkpoint.load(path)
        group = next(g for g in ckpt.header["optimizer"]["groups"] if g["name"] == "router")
        state_entry = group["states"][0]
        adam = log.optimizers["router"]
        stored = ckpt._segment_bytes(state_entry["first_moment"])
        assert stored == adam.states[state_entry["param"]].first_moment.tobytes()

    def test_parameter_rows_match_model(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        rows = Checkpoint.load(path).parameter_rows()
        assert [r[0] for r in rows] == [p.name for p in model.parameters()]
        total = sum(r[3] for r in rows)
        assert total == sum(p.data.size for p in model.parameters())


class TestCorruption:
    def make_file(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        return path

    def patch(self, path, offset, new_bytes):
        blob = bytearray(path.read_bytes())
        blob[offset : offset + len(new_bytes)] = new_bytes
        path.write_bytes(bytes(blob))

    def test_bad_magic(self, tmp_path):
        path = self.make_file(tmp_path)
        self.patch(path, 0, b"XXXX")
        with pytest.raises(CheckpointError) as exc:
            Checkpoint.load(path)
        assert exc.value.offset == 0

    def test_newer_version_rejected_explicitly(self, tmp_path):
        path = self.make_file(tmp_path)
        self.patch(path, 4, struct.pack("<I", FORMAT_VERSION + 1))
        with pytest.raises(CheckpointError) as exc:
            Checkpoint.load(path)
        assert exc.value.offset == 4
        assert "newer" in str(exc.value)

    def test_header_length_beyond_file(self, tmp_path):
        path = self.make_file(tmp_path)
        self.patch(path, 8, struct.pack("<Q", 10**9))
        with pytest.raises(CheckpointError) as exc:
            Checkpoint.load(path)
        assert exc.value.offset == 8

    def test_truncated_file(self, tmp_path):
        path = self.make_file(tmp_path)
        path.write_bytes(path.read_bytes()[:10])
        with pytest.raises(CheckpointError) as exc:
            Checkpoint.load(path)
        assert exc.value.offset == 10

    def test_flipped_payload_byte_fails_checksum(self, tmp_path):
        path = self.make_file(tmp_path)
        blob = path.read_bytes()
        self.patch(path, len(blob) - 20, bytes([blob[-20] ^ 0xFF]))
        with pytest.raises(CheckpointError) as exc:
            Checkpoint.load(path)
        assert exc.value.offset == len(blob) - 4
        assert "checksum" in str(exc.value)

    def test_corrupt_header_byte_fails_checksum(self, tmp_path):
        path = self.make_file(tmp_path)
        blob = path.read_bytes()
        self.patch(path, 20, bytes([blob[20] ^ 0x01]))
        with pytest.raises(CheckpointError):
            Checkpoint.load(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            Checkpoint.load(tmp_path / "nope.ckpt")


class TestTamperedHeader:
    def resave(self, path, mutate):
        ckpt = Checkpoint.load(path)
        mutate(ckpt.header)
        ckpt.save(path)

    def test_shape_mismatch_detected(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        self.resave(path, lambda h: h["params"][0].update(shape=[1, 2, 3]))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path)
        assert "shape" in str(exc.value)

    def test_unknown_config_key_detected(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        self.resave(path, lambda h: h["config"].update(mystery=1))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_wrong_frozen_flag_detected(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        self.resave(path, lambda h: h["params"][0].update(frozen=False))
        with pytest.raises(CheckpointError) as exc:
            load_checkpoint(path)
        assert "frozen" in str(exc.value)

    def test_gap_in_segments_detected(self, tmp_path):
        model, _, _ = trained_model(tmp_path)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        ckpt = Checkpoint.load(path)
        ckpt.header["params"][1]["offset"] += 4
        ckpt.save(path)
        with pytest.raises(CheckpointError):
            Checkpoint.load(path)


class TestFreshModel:
    def test_untrained_multi_task_model_round_trips(self, tmp_path):
        model = MsdemModel([BackboneSpec("a", 4)], ModelConfig(d_e=4, heads=2, seed=9))
        model.begin_task(TaskSpec(1, 0, (0, 1)))
        model.begin_task(TaskSpec(2, 0, (2, 3)))
        path = tmp_path / "fresh.ckpt"
        save_checkpoint(model, path)
        rebuilt, _ = load_checkpoint(path)
        x = np.random.default_rng(0).normal(size=(3, 4)).astype(np.float32)
        a, _ = model.forward_batch(x, 2, mode="eval")
        b, _ = rebuilt.forward_batch(x, 2, mode="eval")
        np.testing.assert_array_equal(a.data, b.data)
