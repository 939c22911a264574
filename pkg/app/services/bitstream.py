"""
GSC1 container: header, range-coded caption and range-coded channel payload.

Layout (little-endian, see docs/bitstream.md):

    "GSC1" | version u8 | width u16 | height u16 | patch u8 | n u16 | C u16
    | C varint channel indices (first absolute, then gap - 1)
    | C float32 quant steps | entropy digest (8 bytes)
    | caption length u16 | coded caption length u16
    | coded caption | channel payload (to end of file)
"""
import logging
from dataclasses import dataclass, field
from typing import Collection, List, Optional, Sequence, Tuple

import numpy as np

from app.errors import CorruptStreamError, DigestMismatchError, InvalidArgumentError
from app.services.analysis_codec import EntropyModel, Latent
from app.services.scene_corpus import VOCABULARY
from app.utils.containers import ByteReader, ByteWriter, check_magic
from app.utils.range_coder import (
    byte_prior_from_text, decode_bytes_adaptive, decode_multi,
    encode_bytes_adaptive, encode_multi,
)

logger = logging.getLogger(__name__)

STREAM_MAGIC = b"GSC1"
STREAM_VERSION = 1
DIGEST_BYTES = 8
MAX_U16 = 0xFFFF

# Adaptive caption model starts from the caption grammar's byte statistics
CAPTION_PRIOR = byte_prior_from_text(" ".join(VOCABULARY))


@dataclass
class GscHeader:
    width: int
    height: int
    patch: int
    n: int
    indices: List[int]
    steps: List[float]  # float32-representable, one per selected channel
    digest: bytes
    caption_length: int = 0
    version: int = STREAM_VERSION

    def __post_init__(self):
        self.indices = [int(i) for i in self.indices]
        self.steps = [float(np.float32(s)) for s in self.steps]
        self.validate()

    @property
    def C(self) -> int:
        return len(self.indices)

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.height // self.patch, self.width // self.patch

    def validate(self) -> None:
        for name, value in (("width", self.width), ("height", self.height), ("n", self.n)):
            if not 1 <= value <= MAX_U16:
                raise InvalidArgumentError(f"header {name}={value} outside u16 range")
        if not 1 <= self.patch <= 255:
            raise InvalidArgumentError(f"header patch={self.patch} outside u8 range")
        if self.width % self.patch or self.height % self.patch:
            raise InvalidArgumentError(f"patch {self.patch} does not divide {self.width}x{self.height}")
        if any(b <= a for a, b in zip(self.indices, self.indices[1:])):
            raise InvalidArgumentError("channel indices must be strictly increasing")
        if self.indices and (self.indices[0] < 0 or self.indices[-1] >= self.n):
            raise InvalidArgumentError(f"channel indices must lie in [0, {self.n})")
        if len(self.steps) != self.C:
            raise InvalidArgumentError("need one quant step per selected channel")
        if any(not np.isfinite(s) or s <= 0.0 for s in self.steps):
            raise InvalidArgumentError(f"quant steps must be finite and positive, got {self.steps}")
        if len(self.digest) != DIGEST_BYTES:
            raise InvalidArgumentError(f"digest must be {DIGEST_BYTES} bytes")
        if not 0 <= self.caption_length <= MAX_U16:
            raise InvalidArgumentError("caption too long for the header")


@dataclass
class GscBitstream:
    header: GscHeader
    caption_bytes: bytes = b""
    payload: bytes = b""
    data: bytes = field(default=b"", repr=False)

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)


def encode_caption(text: str) -> bytes:
    return encode_bytes_adaptive(text.encode("utf-8"), CAPTION_PRIOR)


def decode_caption(data: bytes, length: int) -> str:
    raw = decode_bytes_adaptive(data, length, CAPTION_PRIOR)
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptStreamError("caption is not valid UTF-8") from exc


def encode_payload(latent: Latent, indices: Sequence[int], entropy: EntropyModel) -> bytes:
    """Selected channels in ascending index order, row-major, each under its own table"""
    if not indices:
        return b""
    h, w = latent.spatial
    symbols = np.concatenate([latent.symbols[i].ravel() for i in indices]).tolist()
    return encode_multi(symbols, [entropy.tables[i] for i in indices], [h * w] * len(indices))


def decode_payload(payload: bytes, header: GscHeader, entropy: EntropyModel) -> np.ndarray:
    """(C, h, w) int64 symbols"""
    h, w = header.spatial
    if not header.indices:
        return np.zeros((0, h, w), dtype=np.int64)
    flat = decode_multi(payload, [entropy.tables[i] for i in header.indices], [h * w] * header.C)
    return np.asarray(flat, dtype=np.int64).reshape(header.C, h, w)


def _write_header(w: ByteWriter, header: GscHeader, coded_caption_length: int) -> None:
    w.raw(STREAM_MAGIC)
    w.pack("B", header.version)
    w.pack("HHBHH", header.width, header.height, header.patch, header.n, header.C)
    prev = -1
    for idx in header.indices:
        w.varint(idx - prev - 1)
        prev = idx
    for step in header.steps:
        w.pack("f", step)
    w.raw(header.digest)
    w.pack("HH", header.caption_length, coded_caption_length)


def pack(header: GscHeader, caption_bytes: bytes, payload: bytes) -> bytes:
    if len(caption_bytes) > MAX_U16:
        raise InvalidArgumentError("coded caption too long for the header")
    if header.caption_length == 0 and caption_bytes:
        raise InvalidArgumentError("coded caption bytes present for an empty caption")
    if not header.indices and payload:
        raise InvalidArgumentError("payload present but no channels selected")
    w = ByteWriter()
    _write_header(w, header, len(caption_bytes))
    w.raw(caption_bytes)
    w.raw(payload)
    return w.getvalue()


def unpack(data: bytes, known_digests: Optional[Collection[bytes]] = None) -> GscBitstream:
    """
    Parse a GSC1 file. Magic and version are checked first; truncation and
    structural errors next; the entropy digest last (when known_digests is given).
    """
    r = ByteReader(data, "GSC1 stream")
    version = check_magic(r, STREAM_MAGIC, STREAM_VERSION)
    width, height, patch, n, count = r.unpack("HHBHH")
    indices = []
    prev = -1
    for _ in range(count):
        prev = prev + 1 + r.varint()
        indices.append(prev)
    steps = [r.unpack("f")[0] for _ in range(count)]
    digest = r.raw(DIGEST_BYTES)
    caption_length, coded_length = r.unpack("HH")
    caption_bytes = r.raw(coded_length)
    payload = data[r.pos:]
    try:
        header = GscHeader(width, height, patch, n, indices, steps, digest, caption_length, version)
    except InvalidArgumentError as exc:
        raise CorruptStreamError(f"GSC1 stream: inconsistent header: {exc.detail}") from exc
    if (caption_length == 0) != (coded_length == 0):
        raise CorruptStreamError("GSC1 stream: caption lengths disagree")
    if count and not payload:
        raise CorruptStreamError("GSC1 stream: channel payload missing")
    if known_digests is not None and digest not in known_digests:
        raise DigestMismatchError(f"GSC1 stream: entropy model digest {digest.hex()} is not known to this decoder")
    return GscBitstream(header, caption_bytes, payload, data)


def bpp(total_bits: int, width: int, height: int) -> float:
    pixels = width * height
    if pixels <= 0:
        raise InvalidArgumentError("bpp needs a positive pixel count")
    return total_bits / pixels


def build_stream(
    latent: Latent,
    indices: Sequence[int],
    caption: str,
    entropy: EntropyModel,
    width: int,
    height: int,
    patch: int,
) -> GscBitstream:
    """Code caption and selected channels into one GSC1 file"""
    caption_raw = caption.encode("utf-8")
    header = GscHeader(
        width=width, height=height, patch=patch, n=latent.n,
        indices=list(indices),
        steps=[latent.steps[i] for i in indices],
        digest=entropy.digest(),
        caption_length=len(caption_raw),
    )
    caption_bytes = encode_caption(caption)
    payload = encode_payload(latent, header.indices, entropy)
    data = pack(header, caption_bytes, payload)
    logger.debug(
        f"[BITSTREAM] C={header.C} caption={len(caption_bytes)}B payload={len(payload)}B total={len(data)}B"
    )
    return GscBitstream(header, caption_bytes, payload, data)


def check_header(
    header: GscHeader,
    entropy: EntropyModel,
    steps: Optional[np.ndarray] = None,
    patch: Optional[int] = None,
) -> None:
    """Header fields must agree with the codec its digest names"""
    if header.n != entropy.n:
        raise CorruptStreamError(f"stream declares n={header.n}, entropy model has {entropy.n}")
    if patch is not None and header.patch != patch:
        raise CorruptStreamError(f"stream declares patch={header.patch}, codec uses {patch}")
    if steps is not None:
        expected = [float(np.float32(steps[i])) for i in header.indices]
        if header.steps != expected:
            raise CorruptStreamError(f"stream quant steps {header.steps} differ from the codec's {expected}")


def read_stream(data: bytes, entropy: EntropyModel) -> Tuple[GscBitstream, str, np.ndarray]:
    """Unpack against one entropy model; returns the stream, caption and (C, h, w) symbols"""
    stream = unpack(data, known_digests={entropy.digest()})
    check_header(stream.header, entropy)
    caption = decode_caption(stream.caption_bytes, stream.header.caption_length)
    symbols = decode_payload(stream.payload, stream.header, entropy)
    return stream, caption, symbols

