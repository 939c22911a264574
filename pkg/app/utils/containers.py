"""
Binary container helpers: little-endian byte reader/writer, unsigned varints,
and the GSCM model file (layer tables + float64 payload).
"""
import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from app.errors import (
    BadMagicError, CorruptStreamError, InvalidArgumentError,
    MissingArtifactError, TruncatedStreamError, UnsupportedVersionError,
)
from app.utils.numerics import ACTIVATIONS, DenseLayer, DenseNet

MODEL_MAGIC = b"GSCM"
MODEL_VERSION = 1


class ByteWriter:
    """Append-only little-endian writer"""

    def __init__(self):
        self._buf = io.BytesIO()

    def raw(self, data: bytes) -> None:
        self._buf.write(data)

    def pack(self, fmt: str, *values) -> None:
        self._buf.write(struct.pack("<" + fmt, *values))

    def varint(self, value: int) -> None:
        if value < 0:
            raise InvalidArgumentError(f"varint must be non-negative, got {value}")
        while True:
            byte = value & 0x7F
            value >>= 7
            if value:
                self._buf.write(bytes([byte | 0x80]))
            else:
                self._buf.write(bytes([byte]))
                return

    def short_str(self, text: str) -> None:
        data = text.encode("utf-8")
        if len(data) > 255:
            raise InvalidArgumentError(f"name too long: {text!r}")
        self.pack("B", len(data))
        self.raw(data)

    def floats(self, arr: np.ndarray) -> None:
        self.raw(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def getvalue(self) -> bytes:
        return self._buf.getvalue()


class ByteReader:
    """Bounds-checked little-endian reader; short reads raise TruncatedStreamError"""

    def __init__(self, data: bytes, what: str = "stream"):
        self.data = data
        self.pos = 0
        self.what = what

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def raw(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise TruncatedStreamError(
                f"{self.what} truncated: need {n} bytes at offset {self.pos}, have {self.remaining()}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        fmt = "<" + fmt
        return struct.unpack(fmt, self.raw(struct.calcsize(fmt)))

    def u8(self) -> int:
        return self.unpack("B")[0]

    def u16(self) -> int:
        return self.unpack("H")[0]

    def u32(self) -> int:
        return self.unpack("I")[0]

    def varint(self) -> int:
        value = 0
        shift = 0
        while True:
            byte = self.u8()
            value |= (byte & 0x7F) << shift
            if not byte & 0x80:
                return value
            shift += 7
            if shift > 63:
                raise CorruptStreamError(f"{self.what}: varint too long at offset {self.pos}")

    def short_str(self) -> str:
        data = self.raw(self.u8())
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptStreamError(f"{self.what}: malformed name at offset {self.pos}") from exc

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.raw(8 * count), dtype="<f8").astype(np.float64)


def check_magic(reader: ByteReader, magic: bytes, version: int) -> int:
    """Validate magic and version before anything else is read"""
    found = reader.raw(len(magic))
    if found != magic:
        raise BadMagicError(f"{reader.what}: bad magic {found!r}, expected {magic!r}")
    ver = reader.u8()
    if ver != version:
        raise UnsupportedVersionError(f"{reader.what}: unsupported version {ver}, expected {version}")
    return ver


@dataclass
class ModelSection:
    """Tagged group of networks and named tensors inside a GSCM file"""
    tag: str
    nets: List[DenseNet] = field(default_factory=list)
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)


def _write_net_table(w: ByteWriter, net: DenseNet) -> None:
    w.pack("HH", len(net.layers), len(net.residual_groups))
    for start, end in net.residual_groups:
        w.pack("HH", start, end)
    for layer in net.layers:
        w.pack("IIB", layer.in_dim, layer.out_dim, ACTIVATIONS.index(layer.activation))


def serialize_models(sections: List[ModelSection], meta: Dict) -> bytes:
    w = ByteWriter()
    w.raw(MODEL_MAGIC)
    w.pack("B", MODEL_VERSION)
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    w.pack("I", len(meta_bytes))
    w.raw(meta_bytes)
    w.pack("H", len(sections))
    for section in sections:
        w.short_str(section.tag)
        w.pack("H", len(section.nets))
        for net in section.nets:
            _write_net_table(w, net)
        w.pack("H", len(section.tensors))
        for name, arr in section.tensors.items():
            w.short_str(name)
            w.pack("B", arr.ndim)
            for dim in arr.shape:
                w.pack("I", dim)
        for net in section.nets:
            for p in net.parameters():
                w.floats(p)
        for arr in section.tensors.values():
            w.floats(arr)
    return w.getvalue()


def deserialize_models(data: bytes, what: str = "model file") -> Tuple[Dict, Dict[str, ModelSection]]:
    r = ByteReader(data, what)
    check_magic(r, MODEL_MAGIC, MODEL_VERSION)
    try:
        meta = json.loads(r.raw(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptStreamError(f"{what}: malformed metadata") from exc

    sections: Dict[str, ModelSection] = {}
    for _ in range(r.u16()):
        tag = r.short_str()
        tables = []
        for _ in range(r.u16()):
            n_layers, n_groups = r.unpack("HH")
            groups = [r.unpack("HH") for _ in range(n_groups)]
            layers = []
            for _ in range(n_layers):
                in_dim, out_dim, act = r.unpack("IIB")
                if act >= len(ACTIVATIONS):
                    raise CorruptStreamError(f"{what}: unknown activation tag {act}")
                layers.append((in_dim, out_dim, ACTIVATIONS[act]))
            tables.append((layers, groups))
        shapes = []
        for _ in range(r.u16()):
            name = r.short_str()
            ndim = r.u8()
            shapes.append((name, tuple(r.u32() for _ in range(ndim))))

        nets = []
        for layers, groups in tables:
            built = []
            for in_dim, out_dim, act in layers:
                weight = r.floats(in_dim * out_dim).reshape(out_dim, in_dim)
                bias = r.floats(out_dim)
                built.append(DenseLayer(weight, bias, act))
            try:
                nets.append(DenseNet(built, groups))
            except InvalidArgumentError as exc:
                raise CorruptStreamError(f"{what}: inconsistent layer table: {exc.detail}") from exc
        tensors = {name: r.floats(int(np.prod(shape))).reshape(shape) for name, shape in shapes}
        sections[tag] = ModelSection(tag, nets, tensors)
    if r.remaining():
        raise CorruptStreamError(f"{what}: {r.remaining()} trailing bytes")
    return meta, sections


def save_models(path: Union[str, Path], sections: List[ModelSection], meta: Dict) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(serialize_models(sections, meta))
    return p


def load_models(path: Union[str, Path]) -> Tuple[Dict, Dict[str, ModelSection]]:
    p = Path(path)
    if not p.is_file():
        raise MissingArtifactError(f"model file not found: {p}")
    return deserialize_models(p.read_bytes(), what=str(p))


def nets_digest(nets: List[DenseNet], extra: List[np.ndarray] = ()) -> str:
    """SHA256 over layer tables and parameter bytes"""
    h = hashlib.sha256()
    for net in nets:
        w = ByteWriter()
        _write_net_table(w, net)
        h.update(w.getvalue())
        for p in net.parameters():
            h.update(np.ascontiguousarray(p, dtype="<f8").tobytes())
    for arr in extra:
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()
