"""
Tests for the artifact registry and training telemetry
"""
import pytest

from app.config import SceneBounds
from app.errors import MissingArtifactError
from app.models.registry import ModelArtifact
from app.services.analysis_codec import build_bundle, init_codec, save_codec
from app.services.flow_model import FlowDims, attach_control, init_flow_params, save_flow
from app.services.registry import ModelRegistry
from app.services.scene_corpus import generate_corpus
from app.services.telemetry import get_training_stats, record_training_run
from app.utils.prng import PrngState

DIMS = FlowDims(32, 32, guidance_dim=4 * 8 * 8, d_model=4, d_ff=4, d_time=2, d_txt=2, L_base=1, M_ctl=1)


def _bundle(seed):
    images = [r.image for r in generate_corpus(3, SceneBounds(), seed=seed)]
    return build_bundle(images, init_codec(PrngState(seed), n=4, patch=4))


def test_artifacts_reload_from_disk(tmp_path):
    """A fresh registry on the same database loads saved artifacts"""
    bundle = _bundle(1)
    base = init_flow_params(DIMS, PrngState(2))
    base.base_trained = True
    writer = ModelRegistry.for_directory(tmp_path)
    digest = writer.register_codec(bundle, save_codec(bundle, tmp_path / "codec.gscm"))
    writer.register_flow(base, save_flow(base, tmp_path / "base.gscm"), digest, 0)

    reader = ModelRegistry.for_directory(tmp_path)
    assert reader.known_digests() == {digest}
    assert reader.codec_for(digest).digest == digest
    assert reader.flow_for(digest, 0).trunk_digest() == base.trunk_digest()
    assert reader.codec_for(digest) is reader.codec_for(digest)


def test_missing_artifacts():
    """Unknown digests and channel counts raise missing-artifact errors"""
    registry = ModelRegistry("sqlite://")
    with pytest.raises(MissingArtifactError):
        registry.codec_for(b"\x00" * 8)
    with pytest.raises(MissingArtifactError):
        registry.flow_for(b"\x00" * 8, 2)


def test_latest_registration_wins(tmp_path):
    """Re-registering a channel count points at the newest file"""
    bundle = _bundle(3)
    base = init_flow_params(DIMS, PrngState(4))
    base.base_trained = True
    first = attach_control(base, PrngState(5))
    second = attach_control(base, PrngState(6))
    writer = ModelRegistry.for_directory(tmp_path)
    digest = writer.register_codec(bundle, save_codec(bundle, tmp_path / "codec.gscm"))
    writer.register_flow(first, save_flow(first, tmp_path / "a.gscm"), digest, 1)
    writer.register_flow(second, save_flow(second, tmp_path / "b.gscm"), digest, 1)

    reader = ModelRegistry.for_directory(tmp_path)
    loaded = reader.flow_for(digest, 1)
    assert (loaded.control.guidance_proj.layers[0].weight == second.control.guidance_proj.layers[0].weight).all()
    with reader.session() as db:
        assert db.query(ModelArtifact).filter_by(kind="flow").count() == 2


def test_registry_rejects_stale_codec_file(tmp_path):
    """A codec file overwritten after registration no longer matches its digest"""
    registry = ModelRegistry.for_directory(tmp_path)
    path = save_codec(_bundle(7), tmp_path / "codec.gscm")
    digest = registry.register_codec(_bundle(7), path)
    save_codec(_bundle(8), path)
    with pytest.raises(MissingArtifactError):
        ModelRegistry.for_directory(tmp_path).codec_for(digest)


def test_record_training_run_and_stats():
    """Runs are stored with their loss curve and aggregated per kind"""
    registry = ModelRegistry("sqlite://")
    with registry.session() as db:
        run_id = record_training_run(db, "codec", 3, 1, [0.5, 0.25, 0.125], 1.5, artifact_path="codec.gscm")
        record_training_run(db, "flow_control", 2, 4, [1.0, 0.5], 2.0, channel_count=4)
        record_training_run(db, "flow_control", 2, 5, [], 0.5, channel_count=8)
        assert run_id is not None
        stats = get_training_stats(db)
    assert stats["total_runs"] == 3
    assert stats["by_kind"]["codec"]["avg_final_loss"] == 0.125
    assert stats["by_kind"]["flow_control"]["count"] == 2
    assert stats["by_kind"]["flow_control"]["avg_final_loss"] == 0.5
    assert stats["by_kind"]["flow_control"]["total_seconds"] == 2.5


class _BrokenSession:
    rolled_back = False

    def add(self, _):
        raise RuntimeError("database is locked")

    def rollback(self):
        self.rolled_back = True


def test_record_training_run_swallows_failures():
    """Telemetry failures never abort training"""
    db = _BrokenSession()
    assert record_training_run(db, "codec", 1, 0, [0.1], 0.1) is None
    assert db.rolled_back
