"""
On-disk formats.

Episode file (.mtep), little-endian:
    b"MTEP" | uint16 version | uint32 header length | UTF-8 JSON header
    | mic counts uint16 (T x 10) | robot pos float64 (T x 3)
    | robot vel float64 (T x 3) | F/T float64 (T x 6)

Checkpoint file (.mtck), little-endian:
    b"MTCK" | uint16 version | uint32 header length | UTF-8 JSON header
    | float32 tensor payloads in header order

Manifest: JSON list of episode records with sha256 content hashes, replaced
atomically. Window datasets: .npz archives.
"""
import dataclasses
import hashlib
import json
import logging
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
import torch

from errors import DataError
from neural_model import ModelConfig, TactileEncoder
from sensor_sim import FT_CHANNELS, MIC_CHANNELS, N_MICS, ROBOT_POS_CHANNELS, ROBOT_VEL_CHANNELS, DragEpisode
from signal_pipeline import WindowDataset


logger = logging.getLogger(__name__)

EPISODE_MAGIC = b"MTEP"
CHECKPOINT_MAGIC = b"MTCK"
EPISODE_VERSION = 1
CHECKPOINT_VERSION = 1
MANIFEST_VERSION = 1
_PREFIX = struct.Struct("<4sHI")

DATASET_KEYS = ("data", "label_texture", "label_pos_mm", "label_vel_mm_s", "nominal_velocity",
                "drag_id", "episode_id", "noise_floor", "window_start")


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temp file in the target directory, then os.replace."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from exc


def _pack(magic: bytes, version: int, header: Dict, payload: bytes) -> bytes:
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(magic, version, len(header_bytes)) + header_bytes + payload


def _unpack(blob: bytes, magic: bytes, version: int, what: str) -> Tuple[Dict, memoryview]:
    if len(blob) < _PREFIX.size:
        raise DataError(f"{what}: truncated header")
    got_magic, got_version, header_len = _PREFIX.unpack_from(blob)
    if got_magic != magic:
        raise DataError(f"{what}: bad magic {got_magic!r}")
    if got_version != version:
        raise DataError(f"{what}: unsupported version {got_version}")
    start = _PREFIX.size
    try:
        header = json.loads(bytes(blob[start:start + header_len]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{what}: corrupt header: {exc}") from exc
    return header, memoryview(blob)[start + header_len:]


# ============================================================================
# EPISODES
# ============================================================================

def encode_episode(episode: DragEpisode) -> bytes:
    episode.validate()
    n = episode.n_samples
    header = {
        "episode_id": episode.episode_id,
        "texture": episode.texture,
        "nominal_velocity_mm_s": episode.nominal_velocity_mm_s,
        "kind": episode.kind,
        "rng_seed": episode.rng_seed,
        "sample_rate_hz": episode.sample_rate_hz,
        "n_samples": n,
        "channels": {
            "mic": list(MIC_CHANNELS),
            "robot_pos": list(ROBOT_POS_CHANNELS),
            "robot_vel": list(ROBOT_VEL_CHANNELS),
            "ft": list(FT_CHANNELS),
        },
        "metadata": episode.metadata,
    }
    payload = b"".join([
        np.ascontiguousarray(episode.mic_counts, dtype="<u2").tobytes(),
        np.ascontiguousarray(episode.robot_pos_mm, dtype="<f8").tobytes(),
        np.ascontiguousarray(episode.robot_vel_mm_s, dtype="<f8").tobytes(),
        np.ascontiguousarray(episode.ft_n, dtype="<f8").tobytes(),
    ])
    return _pack(EPISODE_MAGIC, EPISODE_VERSION, header, payload)


def decode_episode(blob: bytes, what: str = "episode") -> DragEpisode:
    header, body = _unpack(blob, EPISODE_MAGIC, EPISODE_VERSION, what)
    n = int(header["n_samples"])
    blocks = (("<u2", N_MICS), ("<f8", 3), ("<f8", 3), ("<f8", 6))
    expected = sum(np.dtype(dt).itemsize * n * width for dt, width in blocks)
    if len(body) != expected:
        raise DataError(f"{what}: payload is {len(body)} bytes, expected {expected}")
    arrays, offset = [], 0
    for dt, width in blocks:
        size = np.dtype(dt).itemsize * n * width
        arrays.append(np.frombuffer(body[offset:offset + size], dtype=dt).reshape(n, width))
        offset += size
    return DragEpisode(
        episode_id=header["episode_id"],
        texture=header["texture"],
        nominal_velocity_mm_s=float(header["nominal_velocity_mm_s"]),
        sample_rate_hz=float(header["sample_rate_hz"]),
        mic_counts=arrays[0].astype(np.int32),
        robot_pos_mm=arrays[1].astype(np.float64),
        robot_vel_mm_s=arrays[2].astype(np.float64),
        ft_n=arrays[3].astype(np.float64),
        rng_seed=int(header["rng_seed"]),
        kind=header["kind"],
        metadata=header["metadata"],
    )


def write_episode(path, episode: DragEpisode) -> str:
    """Write one episode file; returns its sha256."""
    blob = encode_episode(episode)
    atomic_write_bytes(path, blob)
    return sha256_bytes(blob)


def read_episode(path, expected_sha256: Optional[str] = None) -> DragEpisode:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read episode {path}: {exc}") from exc
    if expected_sha256 is not None and sha256_bytes(blob) != expected_sha256:
        raise DataError(f"{path}: content hash mismatch (corrupt episode)")
    return decode_episode(blob, str(path))


# ============================================================================
# MANIFEST
# ============================================================================

@dataclasses.dataclass(frozen=True)
class EpisodeRecord:
    episode_id: str
    path: str
    texture: Optional[str]
    nominal_velocity: float
    kind: str
    seed: int
    sample_rate_hz: float
    sha256: str


@dataclasses.dataclass
class DatasetManifest:
    records: List[EpisodeRecord] = dataclasses.field(default_factory=list)
    version: int = MANIFEST_VERSION

    def validate(self) -> None:
        ids = [r.episode_id for r in self.records]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DataError(f"manifest has duplicate episode ids: {dupes[:3]}")

    def add(self, episode: DragEpisode, rel_path: str, sha256: str) -> None:
        self.records.append(EpisodeRecord(
            episode_id=episode.episode_id,
            path=rel_path,
            texture=episode.texture,
            nominal_velocity=episode.nominal_velocity_mm_s,
            kind=episode.kind,
            seed=episode.rng_seed,
            sample_rate_hz=episode.sample_rate_hz,
            sha256=sha256,
        ))

    def to_dict(self) -> Dict:
        return {"version": self.version, "episodes": [dataclasses.asdict(r) for r in self.records]}


def save_manifest(manifest: DatasetManifest, path) -> None:
    manifest.validate()
    text = json.dumps(manifest.to_dict(), sort_keys=True, indent=2) + "\n"
    atomic_write_bytes(path, text.encode("utf-8"))


def load_manifest(path) -> DatasetManifest:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc
    if data.get("version") != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {data.get('version')}")
    try:
        records = [EpisodeRecord(**rec) for rec in data.get("episodes", [])]
    except TypeError as exc:
        raise DataError(f"{path}: malformed episode record: {exc}") from exc
    manifest = DatasetManifest(records=records)
    manifest.validate()
    return manifest


def iter_episodes(manifest: DatasetManifest, root, kind: Optional[str] = None,
                  verify: bool = True) -> Iterator[DragEpisode]:
    """Load episodes in manifest order; raises DataError on a hash mismatch."""
    root = Path(root)
    for rec in manifest.records:
        if kind is not None and rec.kind != kind:
            continue
        yield read_episode(root / rec.path, rec.sha256 if verify else None)


# ============================================================================
# WINDOW DATASETS
# ============================================================================

def save_dataset(path, dataset: WindowDataset) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                **{key: getattr(dataset, key) for key in DATASET_KEYS},
                window_size=np.array(dataset.window_size),
                sample_rate_hz=np.array(dataset.sample_rate_hz),
            )
    except OSError as exc:
        raise DataError(f"cannot write dataset {path}: {exc}") from exc


def load_dataset(path) -> WindowDataset:
    try:
        with np.load(path, allow_pickle=False) as archive:
            missing = [k for k in DATASET_KEYS if k not in archive.files]
            if missing:
                raise DataError(f"{path}: dataset missing arrays {missing}")
            arrays = {k: archive[k] for k in DATASET_KEYS}
            window_size = int(archive["window_size"])
            sample_rate = float(archive["sample_rate_hz"])
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    return WindowDataset(**arrays, window_size=window_size, sample_rate_hz=sample_rate)


# ============================================================================
# CHECKPOINTS
# ============================================================================

def encode_checkpoint(model: TactileEncoder, extra: Optional[Dict] = None) -> bytes:
    state = model.state_dict()
    tensors = [{"name": name, "shape": list(t.shape)} for name, t in state.items()]
    header = {
        "model_config": model.config.to_dict(),
        "seed": model.config.seed,
        "dtype": "float32",
        "tensors": tensors,
        "extra": extra or {},
    }
    payload = b"".join(
        np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes() for t in state.values()
    )
    return _pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, payload)


def decode_checkpoint(blob: bytes, what: str = "checkpoint") -> Tuple[TactileEncoder, Dict]:
    header, body = _unpack(blob, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, what)
    model = TactileEncoder(ModelConfig.from_dict(header["model_config"])).to(torch.float32)
    state, offset = {}, 0
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        size = count * 4
        if offset + size > len(body):
            raise DataError(f"{what}: payload truncated at tensor {entry['name']}")
        values = np.frombuffer(body[offset:offset + size], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(values.astype(np.float32))
        offset += size
    if offset != len(body):
        raise DataError(f"{what}: {len(body) - offset} trailing payload bytes")
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise DataError(f"{what}: tensors do not match the model config: {exc}") from exc
    model.eval()
    return model, header


def save_checkpoint(path, model: TactileEncoder, extra: Optional[Dict] = None) -> str:
    blob = encode_checkpoint(model, extra)
    atomic_write_bytes(path, blob)
    return sha256_bytes(blob)


def load_checkpoint(path) -> Tuple[TactileEncoder, Dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    return decode_checkpoint(path.read_bytes(), str(path))
