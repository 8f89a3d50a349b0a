"""Versioned binary snapshots of a model and its training state.

File layout, all little-endian:

    offset 0   4 bytes   magic "MSCK"
    offset 4   uint32    format version (currently 1)
    offset 8   uint64    header length H
    offset 16  H bytes   canonical JSON header (sorted keys, compact)
    16 + H     payload   raw array bytes at the offsets the header lists
    last 4     uint32    CRC32 over header + payload

The header describes the model config, backbones, task history, every
parameter (name, shape, frozen flag, payload segment) in registration
order, relation row lengths, and optionally the final optimizer moments
of the most recently trained task.  Because the JSON is canonicalised
and the payload order is fixed, save -> load -> save reproduces the
file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from dataclasses import asdict

import numpy as np

from .errors import CheckpointError
from .model import ModelConfig, MsdemModel
from .optim import Adam
from .stream import BackboneSpec, TaskSpec

MAGIC = b"MSCK"
FORMAT_VERSION = 1
_PREAMBLE = struct.Struct("<4sIQ")  # magic, version, header length

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}

_HEADER_KEYS = {
    "array_dtype",
    "backbones",
    "config",
    "current_task",
    "optimizer",
    "params",
    "relation_row_lengths",
    "tasks",
    "train_seed",
}


def _canonical_json(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _le_bytes(array: np.ndarray, code: str) -> bytes:
    return np.ascontiguousarray(array, dtype=np.dtype(code)).tobytes()


class Checkpoint:
    """Parsed checkpoint: a header dict plus the raw payload bytes."""

    def __init__(self, header: dict, payload: bytes):
        self.header = header
        self.payload = payload

    # ------------------------------------------------------------------
    # construction

    @classmethod
    def from_model(
        cls,
        model: MsdemModel,
        optimizers: dict[str, Adam] | None = None,
        train_seed: int | None = None,
    ) -> "Checkpoint":
        code = _DTYPE_CODES[model.config.dtype]
        chunks: list[bytes] = []
        offset = 0

        def append(array: np.ndarray) -> dict:
            nonlocal offset
            raw = _le_bytes(array, code)
            chunks.append(raw)
            entry = {"offset": offset, "nbytes": len(raw)}
            offset += len(raw)
            return entry

        params = []
        for p in model.parameters():
            entry = append(p.data)
            params.append(
                {
                    "name": p.name,
                    "shape": list(p.data.shape),
                    "frozen": p.frozen,
                    **entry,
                }
            )

        opt_section = None
        if optimizers is not None:
            groups = []
            for group_name in sorted(optimizers):
                opt = optimizers[group_name]
                states = []
                for p in opt.params:
                    s = opt.states[p.name]
                    states.append(
                        {
                            "param": p.name,
                            "step_count": s.step_count,
                            "first_moment": append(s.first_moment),
                            "second_moment": append(s.second_moment),
                        }
                    )
                sample = opt.states[opt.params[0].name] if opt.params else None
                groups.append(
                    {
                        "name": group_name,
                        "learning_rate": sample.learning_rate if sample else None,
                        "beta1": sample.beta1 if sample else None,
                        "beta2": sample.beta2 if sample else None,
                        "epsilon": sample.epsilon if sample else None,
                        "states": states,
                    }
                )
            opt_section = {"groups": groups}

        header = {
            "array_dtype": code,
            "backbones": [{"name": bb.name, "dim": bb.dim} for bb in model.backbones],
            "config": asdict(model.config),
            "current_task": model.current_task,
            "optimizer": opt_section,
            "params": params,
            "relation_row_lengths": [t for t in range(1, model.current_task + 1)],
            "tasks": [
                {
                    "task_id": spec.task_id,
                    "domain_id": spec.domain_id,
                    "class_ids": list(spec.class_ids),
                }
                for spec in model.task_specs.values()
            ],
            "train_seed": train_seed,
        }
        return cls(header, b"".join(chunks))

    # ------------------------------------------------------------------
    # file IO

    def save(self, path) -> None:
        header_bytes = _canonical_json(self.header)
        crc = zlib.crc32(header_bytes + self.payload) & 0xFFFFFFFF
        blob = (
            _PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes))
            + header_bytes
            + self.payload
            + struct.pack("<I", crc)
        )
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            with open(path, "rb") as f:
                blob = f.read()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

        if len(blob) < _PREAMBLE.size + 4:
            raise CheckpointError(
                f"file is {len(blob)} bytes, too short for a checkpoint", offset=len(blob)
            )
        magic, version, header_len = _PREAMBLE.unpack_from(blob, 0)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}", offset=0)
        if version > FORMAT_VERSION:
            raise CheckpointError(
                f"format version {version} is newer than the supported {FORMAT_VERSION}", offset=4
            )
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}", offset=4)
        body_end = len(blob) - 4
        if _PREAMBLE.size + header_len > body_end:
            raise CheckpointError(
                f"header length {header_len} exceeds the file body", offset=8
            )
        header_bytes = blob[_PREAMBLE.size : _PREAMBLE.size + header_len]
        payload = blob[_PREAMBLE.size + header_len : body_end]
        (stored_crc,) = struct.unpack_from("<I", blob, body_end)
        actual_crc = zlib.crc32(header_bytes + payload) & 0xFFFFFFFF
        if stored_crc != actual_crc:
            raise CheckpointError(
                f"checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}",
                offset=body_end,
            )
        try:
            header = json.loads(header_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"header is not valid JSON: {exc}", offset=_PREAMBLE.size) from exc
        if not isinstance(header, dict) or set(header) != _HEADER_KEYS:
            raise CheckpointError(
                "header keys do not match the format; expected "
                + ", ".join(sorted(_HEADER_KEYS))
            )
        ckpt = cls(header, payload)
        ckpt._validate_segments()
        return ckpt

    def _segments(self) -> list[dict]:
        out = [{"what": f"parameter {e['name']!r}", **{k: e[k] for k in ("offset", "nbytes")}} for e in self.header["params"]]
        opt = self.header.get("optimizer")
        if opt:
            for group in opt["groups"]:
                for s in group["states"]:
                    for moment in ("first_moment", "second_moment"):
                        out.append({"what": f"{moment} of {s['param']!r}", **s[moment]})
        return out

    def _validate_segments(self) -> None:
        expected = 0
        for seg in self._segments():
            if seg["offset"] != expected:
                raise CheckpointError(
                    f"payload segment for {seg['what']} starts at {seg['offset']}, expected {expected}"
                )
            expected += seg["nbytes"]
        if expected != len(self.payload):
            raise CheckpointError(
                f"payload holds {len(self.payload)} bytes but the header describes {expected}"
            )

    def _segment_bytes(self, entry: dict) -> bytes:
        return self.payload[entry["offset"] : entry["offset"] + entry["nbytes"]]

    # ------------------------------------------------------------------
    # model reconstruction

    def build_model(self) -> MsdemModel:
        h = self.header
        if h["array_dtype"] not in _DTYPE_CODES.values():
            raise CheckpointError(f"unknown array dtype {h['array_dtype']!r}")
        try:
            config = ModelConfig(**h["config"])
        except TypeError as exc:
            raise CheckpointError(f"config section does not match the model fields: {exc}") from exc
        config.validate()
        if _DTYPE_CODES[config.dtype] != h["array_dtype"]:
            raise CheckpointError(
                f"config dtype {config.dtype} does not match stored arrays {h['array_dtype']!r}"
            )
        backbones = [BackboneSpec(b["name"], b["dim"]) for b in h["backbones"]]
        model = MsdemModel(backbones, config)

        tasks = sorted(h["tasks"], key=lambda t: t["task_id"])
        if [t["task_id"] for t in tasks] != list(range(1, h["current_task"] + 1)):
            raise CheckpointError(
                f"task list {[t['task_id'] for t in tasks]} does not cover 1..{h['current_task']}"
            )
        for t in tasks:
            model.begin_task(TaskSpec(t["task_id"], t["domain_id"], tuple(t["class_ids"])))

        registry = {p.name: p for p in model.parameters()}
        stored = {e["name"]: e for e in h["params"]}
        if set(registry) != set(stored):
            missing = sorted(set(registry) - set(stored))
            extra = sorted(set(stored) - set(registry))
            raise CheckpointError(
                f"parameter names do not match the rebuilt model (missing {missing}, unexpected {extra})"
            )
        for name, p in registry.items():
            entry = stored[name]
            if tuple(entry["shape"]) != p.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {tuple(entry['shape'])} in the file, "
                    f"model expects {p.data.shape}"
                )
            # replay freezes every column before the current one, so the
            # stored flags must show the same pattern
            if entry["frozen"] != p.frozen:
                raise CheckpointError(
                    f"parameter {name!r} frozen flag {entry['frozen']} contradicts task order"
                )
            p.load_bytes(self._segment_bytes(entry))
        return model

    # ------------------------------------------------------------------
    # introspection helpers (used by the CLI inspect command)

    def parameter_rows(self) -> list[tuple[str, tuple[int, ...], bool, int]]:
        """(name, shape, frozen, element count) per stored parameter."""
        return [
            (e["name"], tuple(e["shape"]), e["frozen"], int(np.prod(e["shape"], dtype=np.int64)))
            for e in self.header["params"]
        ]

    def optimizer_summary(self) -> list[tuple[str, float, int]]:
        """(group name, learning rate, final step count) per stored group."""
        opt = self.header.get("optimizer")
        if not opt:
            return []
        out = []
        for group in opt["groups"]:
            steps = max((s["step_count"] for s in group["states"]), default=0)
            out.append((group["name"], group["learning_rate"], steps))
        return out


def save_checkpoint(
    model: MsdemModel,
    path,
    optimizers: dict[str, Adam] | None = None,
    train_seed: int | None = None,
) -> None:
    Checkpoint.from_model(model, optimizers=optimizers, train_seed=train_seed).save(path)


def load_checkpoint(path) -> tuple[MsdemModel, Checkpoint]:
    ckpt = Checkpoint.load(path)
    return ckpt.build_model(), ckpt
