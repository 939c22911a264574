"""
Registry of trained artifacts shared by encoder and decoder.

Codecs are keyed by their 8-byte entropy digest; flows by (codec digest, C),
where C = 0 is the caption-only base model.
"""
import logging
from pathlib import Path
from typing import Dict, Set, Tuple, Union

from app.errors import MissingArtifactError
from app.models import make_session_factory
from app.models.registry import ModelArtifact
from app.services.analysis_codec import CodecBundle, load_codec
from app.services.flow_model import FlowNetParams, load_flow

logger = logging.getLogger(__name__)


class ModelRegistry:
    def __init__(self, database_url: str):
        self.database_url = database_url
        self._sessions = make_session_factory(database_url)
        self._codecs: Dict[bytes, CodecBundle] = {}
        self._flows: Dict[Tuple[bytes, int], FlowNetParams] = {}

    @classmethod
    def for_directory(cls, out_dir: Union[str, Path], name: str = "registry.db") -> "ModelRegistry":
        path = Path(out_dir) / name
        path.parent.mkdir(parents=True, exist_ok=True)
        return cls(f"sqlite:///{path}")

    def session(self):
        return self._sessions()

    def register_codec(self, bundle: CodecBundle, path: Union[str, Path]) -> bytes:
        digest = bundle.digest
        p = bundle.params
        with self._sessions() as db:
            db.add(ModelArtifact(
                kind="codec",
                digest=digest.hex(),
                path=str(path),
                parameter_count=p.analysis.parameter_count() + p.synthesis.parameter_count(),
            ))
            db.commit()
        self._codecs[digest] = bundle
        logger.info(f"[REGISTRY] codec {digest.hex()} -> {path}")
        return digest

    def register_flow(self, params: FlowNetParams, path: Union[str, Path], codec_digest: bytes, channel_count: int) -> None:
        count = sum(arr.size for _, arr in params.named_parameters())
        with self._sessions() as db:
            db.add(ModelArtifact(
                kind="flow",
                digest=params.trunk_digest(),
                codec_digest=codec_digest.hex(),
                channel_count=channel_count,
                path=str(path),
                parameter_count=count,
            ))
            db.commit()
        self._flows[(codec_digest, channel_count)] = params
        logger.info(f"[REGISTRY] flow C={channel_count} for codec {codec_digest.hex()} -> {path}")

    def _latest(self, **filters) -> ModelArtifact:
        with self._sessions() as db:
            return (
                db.query(ModelArtifact)
                .filter_by(**filters)
                .order_by(ModelArtifact.id.desc())
                .first()
            )

    def codec_for(self, digest: bytes) -> CodecBundle:
        if digest in self._codecs:
            return self._codecs[digest]
        row = self._latest(kind="codec", digest=digest.hex())
        if row is None:
            raise MissingArtifactError(f"no codec registered for entropy digest {digest.hex()}")
        bundle = load_codec(row.path)
        if bundle.digest != digest:
            raise MissingArtifactError(f"{row.path} no longer matches digest {digest.hex()}")
        self._codecs[digest] = bundle
        return bundle

    def flow_for(self, codec_digest: bytes, channel_count: int) -> FlowNetParams:
        key = (codec_digest, channel_count)
        if key in self._flows:
            return self._flows[key]
        row = self._latest(kind="flow", codec_digest=codec_digest.hex(), channel_count=channel_count)
        if row is None:
            raise MissingArtifactError(
                f"no flow model registered for C={channel_count} with codec {codec_digest.hex()}"
            )
        params, _ = load_flow(row.path)
        self._flows[key] = params
        return params

    def known_digests(self) -> Set[bytes]:
        with self._sessions() as db:
            rows = db.query(ModelArtifact.digest).filter_by(kind="codec").all()
        return {bytes.fromhex(r.digest) for r in rows} | set(self._codecs)
