"""Binary formats: NLT1 tensors, NLCK checkpoints and NLDS location files, all little-endian.

NLT1: magic, u32 rank, u32 extents, f64 payload (row-major)
NLCK: magic, u32 length + JSON header, u32 count, then per entry u32 length + utf-8 name + NLT1 tensor
NLDS: magic, u16 version, u32 seasons/C1/C2/H/W, per season NLT1 image 1, NLT1 image 2, u8 labels,
      then u8 flag and, when set, a "CLEN" tagged u8 clean label map
"""
import io
import json
import struct
import logging
from collections import OrderedDict
from typing import BinaryIO, Dict, Optional, Tuple
import numpy as np
from nlss.utils import exporter, derive_seed, DataError
from nlss.layers import Module
from nlss.models import MiniUNetConfig, FusionSpec, ModelPair, SegmentationModel, Encoder, Decoder


__all__ = []
export = exporter(__all__)
logger = logging.getLogger("nlss")

TENSOR_MAGIC = b"NLT1"
CHECKPOINT_MAGIC = b"NLCK"
DATASET_MAGIC = b"NLDS"
CLEAN_TAG = b"CLEN"
NLDS_VERSION = 1


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise DataError(f"truncated file, wanted {n} bytes, got {len(b)}")
    return b


def _expect_magic(f: BinaryIO, magic: bytes):
    found = _read_exact(f, len(magic))
    if found != magic:
        raise DataError(f"bad magic {found!r}, expected {magic!r}")


@export
def write_tensor(f: BinaryIO, array: np.ndarray):
    array = np.ascontiguousarray(array, dtype="<f8")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(array.tobytes())


@export
def read_tensor(f: BinaryIO) -> np.ndarray:
    _expect_magic(f, TENSOR_MAGIC)
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    count = int(np.prod(shape)) if rank else 1
    payload = np.frombuffer(_read_exact(f, 8 * count), dtype="<f8")
    return payload.astype(np.float64).reshape(shape)


@export
def save_tensor(path: str, array: np.ndarray):
    with open(path, "wb") as f:
        write_tensor(f, array)


@export
def load_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def _write_string(f: BinaryIO, s: str):
    b = s.encode("utf-8")
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_string(f: BinaryIO) -> str:
    (n,) = struct.unpack("<I", _read_exact(f, 4))
    return _read_exact(f, n).decode("utf-8")


@export
def save_checkpoint(path: str, header: Dict, tensors: Dict[str, np.ndarray]):
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    _write_string(buffer, json.dumps(header, sort_keys=True))
    buffer.write(struct.pack("<I", len(tensors)))
    for name, array in tensors.items():
        _write_string(buffer, name)
        write_tensor(buffer, array)
    with open(path, "wb") as f:
        f.write(buffer.getvalue())


@export
def load_checkpoint(path: str) -> Tuple[Dict, "OrderedDict[str, np.ndarray]"]:
    with open(path, "rb") as f:
        _expect_magic(f, CHECKPOINT_MAGIC)
        header = json.loads(_read_string(f))
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        tensors = OrderedDict()
        for _ in range(count):
            name = _read_string(f)
            tensors[name] = read_tensor(f)
    return header, tensors


@export
def save_model(path: str, model: Module, extra: Optional[Dict] = None, extra_tensors: Optional[Dict] = None):
    """Checkpoint a `ModelPair` or `SegmentationModel` with its batch-norm running statistics

    :param path: The output file
    :param model: The model
    :param extra: JSON-able training state (epoch, lr, scheduler) stored in the header
    :param extra_tensors: Additional named arrays (optimizer moments), stored after the model's
    """
    if isinstance(model, ModelPair):
        header = {"kind": "pair", **model.describe()}
    else:
        header = {
            "kind": "segmentation",
            "in_channels": model.encoder.in_channels,
            "widths": model.encoder.widths,
            "num_classes": model.decoder.num_classes,
        }
    header["extra"] = extra or {}
    tensors = OrderedDict(("model/" + k, v) for k, v in model.state_dict().items())
    for k, v in (extra_tensors or {}).items():
        tensors[k] = v
    save_checkpoint(path, header, tensors)


@export
def load_model(path: str) -> Tuple[Module, Dict, Dict[str, np.ndarray]]:
    """Rebuild the model stored by `save_model`, returning it with the header extras and the non-model tensors"""
    header, tensors = load_checkpoint(path)
    if header.get("kind") == "pair":
        model = ModelPair(MiniUNetConfig(**header["config"]), FusionSpec(**header["fusion"]), header["seed"])
    elif header.get("kind") == "segmentation":
        rng = derive_seed(0)
        model = SegmentationModel(
            Encoder(header["in_channels"], header["widths"], rng), Decoder(header["widths"], header["num_classes"], rng)
        )
    else:
        raise DataError(f"{path}: unknown checkpoint kind {header.get('kind')!r}")
    state = {k[len("model/") :]: v for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(state)
    rest = {k: v for k, v in tensors.items() if not k.startswith("model/")}
    return model, header.get("extra", {}), rest


@export
def write_location(
    path: str, images1: np.ndarray, images2: np.ndarray, labels: np.ndarray, clean: Optional[np.ndarray] = None
):
    """Write one location: images `[S, C, H, W]` per modality, seasonal labels `[S, H, W]`, optional clean map"""
    S, C1, H, W = images1.shape
    C2 = images2.shape[1]
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<H", NLDS_VERSION))
        f.write(struct.pack("<5I", S, C1, C2, H, W))
        for s in range(S):
            write_tensor(f, images1[s])
            write_tensor(f, images2[s])
            f.write(np.ascontiguousarray(labels[s], dtype=np.uint8).tobytes())
        f.write(struct.pack("<B", 0 if clean is None else 1))
        if clean is not None:
            f.write(CLEAN_TAG)
            f.write(np.ascontiguousarray(clean, dtype=np.uint8).tobytes())


@export
def read_location(path: str) -> Tuple[np.ndarray, np.ndarray, np.ndarray, Optional[np.ndarray]]:
    with open(path, "rb") as f:
        _expect_magic(f, DATASET_MAGIC)
        (version,) = struct.unpack("<H", _read_exact(f, 2))
        if version != NLDS_VERSION:
            raise DataError(f"{path}: unsupported NLDS version {version}")
        S, C1, C2, H, W = struct.unpack("<5I", _read_exact(f, 20))
        images1 = np.zeros((S, C1, H, W))
        images2 = np.zeros((S, C2, H, W))
        labels = np.zeros((S, H, W), dtype=np.uint8)
        for s in range(S):
            images1[s] = read_tensor(f)
            images2[s] = read_tensor(f)
            labels[s] = np.frombuffer(_read_exact(f, H * W), dtype=np.uint8).reshape(H, W)
        (flag,) = struct.unpack("<B", _read_exact(f, 1))
        clean = None
        if flag:
            _expect_magic(f, CLEAN_TAG)
            clean = np.frombuffer(_read_exact(f, H * W), dtype=np.uint8).reshape(H, W).copy()
    return images1, images2, labels, clean
