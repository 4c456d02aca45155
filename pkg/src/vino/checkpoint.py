"""Checkpoint container: both encoders, distillation state, optimiser, step, RNG."""

from __future__ import annotations

import io
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .distill import DistillState
from .errors import ConfigError, DataError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    student: dict
    teacher: dict
    state: DistillState
    optimizer: dict
    step: int
    rng: dict
    config_hash: str
    config_text: str = ""
    version: int = FORMAT_VERSION


def _state_to_dict(state: DistillState):
    d = asdict(state)
    d["center"] = state.center.clone()
    return d


def save_checkpoint(path, ckpt: Checkpoint):
    payload = {
        "version": ckpt.version,
        "student": ckpt.student,
        "teacher": ckpt.teacher,
        "state": _state_to_dict(ckpt.state),
        "optimizer": ckpt.optimizer,
        "step": ckpt.step,
        "rng": ckpt.rng,
        "config_hash": ckpt.config_hash,
        "config_text": ckpt.config_text,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path, expected_hash: str | None = None, force: bool = False) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    if payload.get("version") != FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint version {payload.get('version')}")
    if expected_hash is not None and payload["config_hash"] != expected_hash and not force:
        raise ConfigError(
            f"checkpoint config hash {payload['config_hash']} does not match current config {expected_hash}"
        )
    return Checkpoint(
        student=payload["student"],
        teacher=payload["teacher"],
        state=DistillState(**payload["state"]),
        optimizer=payload["optimizer"],
        step=payload["step"],
        rng=payload["rng"],
        config_hash=payload["config_hash"],
        config_text=payload.get("config_text", ""),
        version=payload["version"],
    )
