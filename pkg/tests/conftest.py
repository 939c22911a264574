"""
Shared fixtures: a tiny untrained codec and flow models registered in an
in-memory registry, enough to drive encode/decode without training
"""
from dataclasses import dataclass
from typing import List

import pytest

from app.config import SceneBounds
from app.services.analysis_codec import CodecBundle, build_bundle, init_codec, save_codec
from app.services.flow_model import FlowDims, SamplerConfig, attach_control, init_flow_params, save_flow
from app.services.registry import ModelRegistry
from app.services.scene_corpus import CorpusRecord, generate_corpus
from app.utils.prng import PrngState

DESK_CHANNELS = (0, 1, 2)


@dataclass
class Desk:
    records: List[CorpusRecord]
    bundle: CodecBundle
    registry: ModelRegistry
    sampler: SamplerConfig


@pytest.fixture(scope="module")
def desk(tmp_path_factory) -> Desk:
    root = tmp_path_factory.mktemp("desk")
    records = generate_corpus(6, SceneBounds(), seed=21)
    bundle = build_bundle([r.image for r in records], init_codec(PrngState(21), n=8, patch=4))
    registry = ModelRegistry("sqlite://")
    registry.register_codec(bundle, save_codec(bundle, root / "codec.gscm"))

    dims = FlowDims(32, 32, guidance_dim=8 * 8 * 8, d_model=8, d_ff=8, d_time=4, d_txt=4, L_base=2, M_ctl=1)
    base = init_flow_params(dims, PrngState(22))
    base.base_trained = True
    for c in DESK_CHANNELS:
        params = base if c == 0 else attach_control(base, PrngState(30 + c))
        registry.register_flow(params, save_flow(params, root / f"flow_c{c}.gscm"), bundle.digest, c)
    return Desk(records, bundle, registry, SamplerConfig(N=2, seed=3))
