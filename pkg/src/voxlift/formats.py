"""On-disk formats: weight files, raw float32 tensor blobs, scene manifests, run configs.

Weight file layout::

    b"VXLWGT01"                      8-byte magic
    u64 little-endian                header length in bytes
    UTF-8 JSON header                {name: {"shape", "dtype": "f32", "offset"}, "__metadata__": {...}}
    raw little-endian float32 data   row-major, offsets relative to the data start

Tensor blobs are bare little-endian float32, row-major; shapes live in the
JSON that references them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .decoder import DEFAULT_KNN, DecoderConfig, DecoderWeights
from .errors import FormatError, InvalidArgument
from .geometry import CameraView, Extrinsics, Intrinsics
from .mlp import MlpWeights
from .objective import DEFAULT_TEMPERATURE, Box3D
from .pooling import DEFAULT_CAP

MAGIC = b"VXLWGT01"
SCHEMA_VERSION = "voxlift/1"
CONVENTION = "camera_to_world"


def dump_json(obj, path: Path | None = None) -> str:
    text = json.dumps(obj, indent=2) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


# ---------------------------------------------------------------------------
# tensor blobs

def write_f32(path, array: np.ndarray) -> None:
    Path(path).write_bytes(np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_f32(path, shape) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing blob file: {path}")
    data = path.read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(data) != expected:
        raise FormatError(f"{path}: {len(data)} bytes, expected {expected} for shape {tuple(shape)}")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)


def write_tensor_set(stem, tensors: dict[str, np.ndarray], meta: dict | None = None) -> Path:
    """Write each tensor to ``<stem>.<name>.f32`` plus a ``<stem>.json`` sidecar of shapes."""
    stem = Path(stem)
    sidecar = {"tensors": {}}
    for name, arr in tensors.items():
        blob = stem.with_name(f"{stem.name}.{name}.f32")
        write_f32(blob, arr)
        sidecar["tensors"][name] = {"file": blob.name, "shape": list(arr.shape)}
    if meta:
        sidecar["meta"] = meta
    side = stem.with_name(stem.name + ".json")
    dump_json(sidecar, side)
    return side


def read_tensor_set(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a tensor set given its sidecar path or its stem."""
    path = Path(path)
    side = path if path.suffix == ".json" else path.with_name(path.name + ".json")
    if not side.is_file():
        raise FormatError(f"missing tensor sidecar: {side}")
    try:
        sidecar = json.loads(side.read_text(encoding="utf-8"))
        entries = sidecar["tensors"]
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{side}: malformed sidecar ({exc})") from exc
    tensors = {name: read_f32(side.parent / e["file"], e["shape"]) for name, e in entries.items()}
    return tensors, sidecar.get("meta", {})


# ---------------------------------------------------------------------------
# weight files

def save_weights(path, tensors: dict[str, np.ndarray], metadata: dict | None = None) -> None:
    header: dict = {"__metadata__": {k: str(v) for k, v in (metadata or {}).items()}}
    blobs = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        header[name] = {"shape": list(arr.shape), "dtype": "f32", "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for b in blobs:
            fh.write(b)


def load_weights(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing weight file: {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from exc
    data = raw[16 + hlen:]
    meta = header.pop("__metadata__", {})
    tensors = {}
    for name, e in header.items():
        if e.get("dtype") != "f32":
            raise FormatError(f"{path}: tensor {name} has unsupported dtype {e.get('dtype')}")
        n = int(np.prod(e["shape"]))
        start = e["offset"]
        if start + 4 * n > len(data):
            raise FormatError(f"{path}: tensor {name} runs past end of file")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=n, offset=start).reshape(e["shape"]).copy()
    return tensors, meta


@dataclass(frozen=True)
class WeightBundle:
    pos_mlp: MlpWeights
    decoder: Optional[DecoderWeights] = None
    seed: Optional[int] = None

    @property
    def dim(self) -> int:
        return self.pos_mlp.d_out

    @classmethod
    def init(cls, dim: int, layers: int, seed: int = 0) -> "WeightBundle":
        rng = np.random.default_rng(seed)
        pos_mlp = MlpWeights.init(rng, 3, dim, dim)
        return cls(pos_mlp, DecoderWeights.init(rng, dim, layers), seed)

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"pos_mlp." + k: v for k, v in self.pos_mlp.tensors().items()}
        if self.decoder is not None:
            out.update(self.decoder.named_tensors())
        return out

    def save(self, path) -> None:
        meta = {"seed": self.seed} if self.seed is not None else {}
        save_weights(path, self.named_tensors(), meta)

    @classmethod
    def load(cls, path) -> "WeightBundle":
        tensors, meta = load_weights(path)
        try:
            pos = MlpWeights(*(tensors["pos_mlp." + k] for k in ("w1", "b1", "w2", "b2")))
            dec = DecoderWeights.from_named(tensors) if "decoder.query_pos.w1" in tensors else None
        except KeyError as exc:
            raise FormatError(f"{path}: missing tensor {exc}") from exc
        except InvalidArgument as exc:
            raise FormatError(f"{path}: {exc}") from exc
        seed = int(meta["seed"]) if "seed" in meta else None
        return cls(pos, dec, seed)


# ---------------------------------------------------------------------------
# scene manifests

@dataclass
class ViewRecord:
    width: int
    height: int
    patch: int
    intrinsics: dict
    camera_to_world: list
    depth_blob: str
    feature_blob: Optional[str]
    feature_dim: int


@dataclass
class SceneManifest:
    scene_id: str
    views: list
    gt_boxes: list  # {"center", "size", "label"}
    target_index: int = 0
    loc_blob: Optional[str] = None
    schema_version: str = SCHEMA_VERSION
    extrinsics_convention: str = CONVENTION
    root: Path = field(default=Path("."), repr=False, compare=False)

    def to_json(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "scene_id": self.scene_id,
            "extrinsics_convention": self.extrinsics_convention,
            "views": [asdict(v) for v in self.views],
            "gt_boxes": self.gt_boxes,
            "target_index": self.target_index,
            "loc_blob": self.loc_blob,
        }

    def save(self, path) -> None:
        dump_json(self.to_json(), path)

    @property
    def feature_dim(self) -> int:
        return self.views[0].feature_dim if self.views else 0

    def boxes(self) -> list[Box3D]:
        return [Box3D(b["center"], b["size"]) for b in self.gt_boxes]

    def target_box(self) -> Box3D:
        return self.boxes()[self.target_index]

    def camera_views(self) -> list[CameraView]:
        out = []
        for v in self.views:
            intr = Intrinsics(v.intrinsics["fx"], v.intrinsics["fy"], v.intrinsics["cx"],
                              v.intrinsics["cy"], v.width, v.height)
            extr = Extrinsics(np.array(v.camera_to_world, dtype=np.float64).reshape(4, 4))
            depth = read_f32(self.root / v.depth_blob, (v.height, v.width))
            w, h = v.width // v.patch, v.height // v.patch
            if v.feature_blob is not None:
                feats = read_f32(self.root / v.feature_blob, (h, w, v.feature_dim))
            else:
                feats = np.zeros((h, w, v.feature_dim), dtype=np.float32)
            out.append(CameraView(intr, extr, depth, feats, v.patch))
        return out

    def location_embedding(self) -> np.ndarray:
        if self.loc_blob is None:
            raise FormatError(f"scene {self.scene_id} has no location token blob")
        return read_f32(self.root / self.loc_blob, (self.feature_dim,))


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.is_file():
        raise FormatError(f"missing manifest: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise FormatError(f"{path}: unrecognized schema_version {doc.get('schema_version')!r}")
    if doc.get("extrinsics_convention") != CONVENTION:
        raise FormatError(f"{path}: extrinsics_convention must be {CONVENTION!r}")
    try:
        views = [ViewRecord(**v) for v in doc["views"]]
        m = SceneManifest(
            scene_id=doc["scene_id"], views=views, gt_boxes=doc["gt_boxes"],
            target_index=int(doc.get("target_index", 0)), loc_blob=doc.get("loc_blob"),
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed manifest ({exc})") from exc
    if m.gt_boxes and not 0 <= m.target_index < len(m.gt_boxes):
        raise FormatError(f"{path}: target_index {m.target_index} out of range")
    for v in m.views:
        for blob, shape in ((v.depth_blob, (v.height, v.width)),
                            (v.feature_blob, (v.height // v.patch, v.width // v.patch, v.feature_dim))):
            if blob is None:
                continue
            p = m.root / blob
            if not p.is_file():
                raise FormatError(f"missing blob file: {p}")
            if p.stat().st_size != 4 * int(np.prod(shape)):
                raise FormatError(f"{p}: size does not match declared shape {shape}")
    return m


# ---------------------------------------------------------------------------
# run configuration

def default_schedule(layers: int) -> tuple:
    """The default k schedule truncated, or extended by doubling, to ``layers`` entries."""
    ks = list(DEFAULT_KNN[:layers])
    while len(ks) < layers:
        ks.append(ks[-1] * 2)
    return tuple(ks)

@dataclass
class PoolingConfig:
    strategy: str = "voxel"
    voxel_size: Optional[float] = 0.2
    count: Optional[int] = None
    seed: int = 0
    cap: Optional[int] = DEFAULT_CAP

    def __post_init__(self):
        if self.strategy not in ("voxel", "fps"):
            raise InvalidArgument(f"unknown pooling strategy {self.strategy!r}")
        if (self.voxel_size is None) == (self.count is None):
            raise InvalidArgument("pooling needs exactly one of voxel_size or count")
        if self.strategy == "voxel" and self.voxel_size is None:
            raise InvalidArgument("voxel pooling needs voxel_size")
        if self.strategy == "fps" and self.count is None:
            raise InvalidArgument("fps pooling needs count")


@dataclass
class ObjectiveConfig:
    temperature: float = DEFAULT_TEMPERATURE
    aux_loss: bool = False
    selection_threshold: float = 0.5


@dataclass
class RunConfig:
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    seed: int = 0

    def to_json(self) -> dict:
        d = asdict(self)
        d["decoder"]["knn_schedule"] = list(self.decoder.knn_schedule)
        return d

    @classmethod
    def from_json(cls, doc: dict) -> "RunConfig":
        try:
            pool_doc = dict(doc.get("pooling", {}))
            if pool_doc.get("strategy") == "fps" and "voxel_size" not in pool_doc:
                pool_doc["voxel_size"] = None
            dec_doc = dict(doc.get("decoder", {}))
            obj_doc = doc.get("objective", {})
            # one threshold, two homes: objective's value fills the decoder's if unset
            if "selection_threshold" in obj_doc and "selection_threshold" not in dec_doc:
                dec_doc["selection_threshold"] = obj_doc["selection_threshold"]
            if "layers" in dec_doc and "knn_schedule" not in dec_doc:
                dec_doc["knn_schedule"] = default_schedule(int(dec_doc["layers"]))
            return cls(
                pooling=PoolingConfig(**pool_doc),
                decoder=DecoderConfig(**dec_doc),
                objective=ObjectiveConfig(**doc.get("objective", {})),
                seed=int(doc.get("seed", 0)),
            )
        except TypeError as exc:
            raise InvalidArgument(f"bad config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise FormatError(f"missing config: {path}")
        try:
            return cls.from_json(json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON ({exc})") from exc
