"""Binary artifact files: worlds, datasets, checkpoints and encoders.

Layout (all integers little-endian)::

    b"WIDN1"            magic
    u8                  format version
    u8                  kind tag
    u32                 header length in bytes
    header              UTF-8 JSON: metadata plus the array manifest
    payload             every array as little-endian float64, manifest order
    u64                 checksum: first 8 bytes of SHA-256 over everything above

Integer arrays (labels, ids) are stored as doubles and cast back on load;
they are far below 2**53 so the round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np

from widin.autodiff import Tensor
from widin.core.config import TrainConfig
from widin.core.params import MLP, Linear, WidinModel
from widin.encoders import FrozenLanguageEncoder, Vocabulary
from widin.errors import BadMagic, ChecksumError, EncoderMismatch, KindMismatch, MissingArtifact, VersionMismatch
from widin.synthworld import DatasetSplit, World, WorldSpec, generate_world

MAGIC = b"WIDN1"
VERSION = 1
_PREFIX = struct.Struct("<5sBBI")
_CHECKSUM = struct.Struct("<Q")


class Kind(IntEnum):
    WORLD = 1
    DATASET = 2
    CHECKPOINT = 3
    ENCODER = 4


@dataclass
class Artifact:
    kind: Kind
    header: dict
    arrays: dict[str, np.ndarray] = field(default_factory=dict)


def _checksum(blob: bytes) -> int:
    return _CHECKSUM.unpack(hashlib.sha256(blob).digest()[:8])[0]


def encode_artifact(art: Artifact) -> bytes:
    manifest = []
    chunks = []
    for name, arr in art.arrays.items():
        a = np.asarray(arr)
        manifest.append({"name": name, "shape": list(a.shape), "dtype": a.dtype.kind})
        chunks.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    header = json.dumps({"meta": art.header, "arrays": manifest}, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, int(art.kind), len(header)) + header + b"".join(chunks)
    return body + _CHECKSUM.pack(_checksum(body))


def decode_artifact(blob: bytes, expected: Kind | None = None) -> Artifact:
    """Parse and verify.  Checks run in order: magic, version, checksum, kind."""
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagic("not a WIDN1 artifact")
    if len(blob) < _PREFIX.size + _CHECKSUM.size:
        raise ChecksumError("artifact truncated")
    _, version, kind, header_len = _PREFIX.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatch(f"artifact version {version}, reader supports {VERSION}")
    body, tail = blob[: -_CHECKSUM.size], blob[-_CHECKSUM.size :]
    if _CHECKSUM.unpack(tail)[0] != _checksum(body):
        raise ChecksumError("artifact checksum mismatch (corrupt or truncated)")
    try:
        kind = Kind(kind)
    except ValueError:
        raise KindMismatch(f"unknown kind tag {kind}") from None
    if expected is not None and kind != expected:
        raise KindMismatch(f"expected a {expected.name.lower()} artifact, found {kind.name.lower()}")
    start = _PREFIX.size
    header = json.loads(body[start : start + header_len])
    offset = start + header_len
    arrays = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        a = np.frombuffer(body, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        offset += 8 * count
        arrays[entry["name"]] = a.astype(np.int64) if entry["dtype"] in "iub" else a.astype(np.float64)
    if offset != len(body):
        raise ChecksumError("payload length does not match the manifest")
    return Artifact(kind, header["meta"], arrays)


def write_artifact(path, art: Artifact) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_artifact(art))
    return path


def read_artifact(path, expected: Kind | None = None) -> Artifact:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing artifact {path}")
    return decode_artifact(path.read_bytes(), expected)


# ---------------------------------------------------------------- typed helpers


def world_artifact(world: World, config: dict | None = None) -> Artifact:
    arrays = {"A": world.A, "B": world.B, "domain_factors": world.domain_factors, "M": world.M, "class_text": world.class_text}
    header = {
        "spec": asdict(world.spec),
        "world_id": world.world_id,
        "encoder": world.encoder.checksum(),
        "spread": world.spread,
        "config": config or {},
    }
    return Artifact(Kind.WORLD, header, arrays)


def load_world(art: Artifact) -> World:
    """Regenerate the world from its spec and confirm it matches the stored arrays bit for bit."""
    world = generate_world(WorldSpec(**art.header["spec"]))
    if world.world_id != art.header["world_id"] or world.encoder.checksum() != art.header["encoder"]:
        raise ChecksumError("stored world does not match its regenerated spec")
    for name in ("A", "B", "domain_factors", "M", "class_text"):
        if not np.array_equal(getattr(world, name), art.arrays[name]):
            raise ChecksumError(f"world array {name} differs from its regenerated spec")
    return world


def dataset_artifact(split: DatasetSplit, config: dict | None = None) -> Artifact:
    arrays = {
        "x": split.x,
        "y": split.y,
        "domain": split.domain,
        "uid": split.uid,
        "class_part": split.class_part,
        "domain_part": split.domain_part,
    }
    return Artifact(Kind.DATASET, {"role": split.role, "world_id": split.world_id, "config": config or {}}, arrays)


def load_dataset(art: Artifact) -> DatasetSplit:
    a = art.arrays
    return DatasetSplit(
        art.header["role"], a["x"], a["y"], a["domain"], a["uid"], a["class_part"], a["domain_part"], art.header["world_id"]
    )


def _module_arrays(prefix: str, module) -> dict[str, np.ndarray]:
    if isinstance(module, MLP):
        return {**_module_arrays(f"{prefix}.first", module.first), **_module_arrays(f"{prefix}.second", module.second)}
    return {f"{prefix}.weight": module.weight.data, f"{prefix}.bias": module.bias.data}


def _linear(arrays: dict, prefix: str) -> Linear:
    return Linear(
        Tensor(arrays[f"{prefix}.weight"].copy(), requires_grad=True),
        Tensor(arrays[f"{prefix}.bias"].copy(), requires_grad=True),
    )


def checkpoint_artifact(model: WidinModel, cfg: TrainConfig, world: World, extra: dict | None = None) -> Artifact:
    arrays = {}
    for name, module in model.modules().items():
        arrays.update(_module_arrays(name, module))
    if model.feature_mean is not None:
        arrays["features.mean"] = model.feature_mean
        arrays["features.std"] = model.feature_std
    header = {
        "config": cfg.as_dict(),
        "world_id": world.world_id,
        "encoder": world.encoder.checksum(),
        "stage_a_done": model.stage_a_done,
        "stage_b_done": model.stage_b_done,
        "has_bridge": model.bridge is not None,
        "extra": extra or {},
    }
    return Artifact(Kind.CHECKPOINT, header, arrays)


def load_checkpoint(art: Artifact, world: World | None = None) -> tuple[WidinModel, TrainConfig]:
    """Rebuild a model; with ``world`` given, refuse checkpoints from a different encoder."""
    h = art.header
    if world is not None and h["encoder"] != world.encoder.checksum():
        raise EncoderMismatch("checkpoint was trained against a different encoder than this world's")
    a = art.arrays
    model = WidinModel(
        projector=MLP(_linear(a, "projector.first"), _linear(a, "projector.second")),
        disentangler=_linear(a, "disentangler"),
        classifier=_linear(a, "classifier"),
        bridge=_linear(a, "bridge") if h["has_bridge"] else None,
        feature_mean=a["features.mean"].copy() if "features.mean" in a else None,
        feature_std=a["features.std"].copy() if "features.std" in a else None,
        stage_a_done=h["stage_a_done"],
        stage_b_done=h["stage_b_done"],
    )
    return model, TrainConfig(**h["config"])


def encoder_artifact(enc: FrozenLanguageEncoder) -> Artifact:
    header = {"d": enc.d, "seed": enc.seed, "vocab": list(enc.vocab.words), "checksum": enc.checksum()}
    return Artifact(Kind.ENCODER, header, dict(sorted(enc.weights.items())))


def load_encoder(art: Artifact) -> FrozenLanguageEncoder:
    weights = {k: v.copy() for k, v in art.arrays.items()}
    for v in weights.values():
        v.setflags(write=False)
    enc = FrozenLanguageEncoder(art.header["d"], art.header["seed"], Vocabulary(art.header["vocab"]), weights)
    if enc.checksum() != art.header["checksum"]:
        raise ChecksumError("encoder weights do not match their recorded checksum")
    return enc
