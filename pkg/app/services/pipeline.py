"""
End-to-end coding: image -> caption + selected channels -> GSC1 bytes on the
encoder side; GSC1 bytes -> caption + guidance -> sampled image on the decoder
side. The encoder never loads a flow model; the decoder sees only the stream
bytes and the registry.
"""
import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from app.errors import CorruptStreamError
from app.services.analysis_codec import CodecBundle, Latent, analyze, quantize
from app.services.bitstream import (
    GscHeader, bpp, build_stream, check_header, decode_caption, decode_payload, unpack,
)
from app.services.channel_select import SelectionResult, empty_selection, select_top_c
from app.services.flow_model import (
    FlowSample, SamplerConfig, embed_caption, guidance_volume, project_guidance, sample,
)
from app.services.registry import ModelRegistry
from app.services.scene_corpus import CorpusRecord
from app.utils.files import validate_image
from app.utils.prng import PrngState

logger = logging.getLogger(__name__)


@dataclass
class EncodedImage:
    data: bytes
    selection: SelectionResult
    latent: Latent
    width: int
    height: int

    @property
    def total_bits(self) -> int:
        return 8 * len(self.data)

    @property
    def bpp(self) -> float:
        return bpp(self.total_bits, self.width, self.height)


@dataclass
class Reconstruction:
    image: np.ndarray
    caption: str
    header: GscHeader


def select_channels(latent: Latent, image: np.ndarray, C: int) -> SelectionResult:
    """C = 0 is the caption-only mode"""
    if C == 0:
        return empty_selection()
    return select_top_c(latent, image, C)


def encode_image(image: np.ndarray, caption: str, bundle: CodecBundle, C: int) -> EncodedImage:
    x = validate_image(image)
    height, width = x.shape[:2]
    latent = quantize(analyze(x, bundle.params), bundle.params)
    sel = select_channels(latent, x, C)
    stream = build_stream(latent, sel.indices, caption, bundle.entropy, width, height, bundle.params.patch)
    logger.debug(f"[BITSTREAM] encoded C={C} channels={sel.indices} bytes={len(stream.data)}")
    return EncodedImage(stream.data, sel, latent, width, height)


def decode_stream(data: bytes, registry: ModelRegistry, sampler: SamplerConfig) -> Reconstruction:
    stream = unpack(data, known_digests=registry.known_digests())
    header = stream.header
    bundle = registry.codec_for(header.digest)
    check_header(header, bundle.entropy, bundle.params.steps, bundle.params.patch)
    flow = registry.flow_for(header.digest, header.C)
    h, w = header.spatial
    if (flow.dims.height, flow.dims.width) != (header.height, header.width):
        raise CorruptStreamError(
            f"flow model generates {flow.dims.height}x{flow.dims.width}, stream is {header.height}x{header.width}"
        )
    if header.C and flow.dims.guidance_dim != header.n * h * w:
        raise CorruptStreamError(f"stream guidance {header.n}x{h}x{w} does not fit the flow model")

    caption = decode_caption(stream.caption_bytes, header.caption_length)
    symbols = decode_payload(stream.payload, header, bundle.entropy)
    emb = embed_caption(caption, flow)
    guidance = None
    if header.C:
        deq = symbols.astype(np.float64) * np.asarray(header.steps)[:, None, None]
        guidance = project_guidance(flow, guidance_volume(header.indices, deq, header.n))
    image = sample(flow, emb, guidance, sampler, PrngState(sampler.seed))
    return Reconstruction(image, caption, header)


def build_flow_samples(records: Sequence[CorpusRecord], bundle: CodecBundle, C: int) -> List[FlowSample]:
    """Training items with the same channel selection the encoder would make"""
    samples = []
    for rec in records:
        guidance = None
        if C:
            latent = quantize(analyze(rec.image, bundle.params), bundle.params)
            sel = select_top_c(latent, rec.image, C)
            deq = latent.symbols[sel.indices].astype(np.float64) * latent.steps[sel.indices][:, None, None]
            guidance = guidance_volume(sel.indices, deq, latent.n)
        samples.append(FlowSample(np.asarray(rec.image, dtype=np.float64).ravel(), rec.caption, guidance))
    return samples
