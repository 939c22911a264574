"""
Tests for SSIM channel ranking and the channel-count trade-off
"""
import numpy as np
import pytest

from app.errors import EvaluationError, InvalidArgumentError, MissingArtifactError
from app.services.analysis_codec import Latent
from app.services.channel_select import (
    SSIM_K1, SSIM_K2, RdWeights, choose_channel_count, downscale_reference, rank_channels,
    rd_objective, select_top_c, ssim, write_selection_csv,
)
from app.utils.prng import PrngState, randint, uniform


def _ssim_oracle(a, b):
    xs = [float(v) for v in np.ravel(a)]
    ys = [float(v) for v in np.ravel(b)]
    n = len(xs)
    mx = sum(xs) / n
    my = sum(ys) / n
    vx = sum((v - mx) ** 2 for v in xs) / n
    vy = sum((v - my) ** 2 for v in ys) / n
    cov = sum((u - mx) * (v - my) for u, v in zip(xs, ys)) / n
    c1, c2 = (SSIM_K1 * 1.0) ** 2, (SSIM_K2 * 1.0) ** 2
    return ((2 * mx * my + c1) * (2 * cov + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))


def _random_latent(prng: PrngState, n=6, size=8) -> Latent:
    symbols = np.array([[[randint(prng, -5, 5) for _ in range(size)] for _ in range(size)] for _ in range(n)])
    return Latent(symbols.astype(np.int64), np.ones(n))


def test_ssim_identity():
    """A map is perfectly similar to itself"""
    x = uniform(PrngState(1), (8, 8))
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_constant_maps_closed_form():
    """Zero-variance maps reduce to the luminance term"""
    c1, c2 = 0.2, 0.7
    expected = (2 * c1 * c2 + SSIM_K1 ** 2) / (c1 ** 2 + c2 ** 2 + SSIM_K1 ** 2)
    assert ssim(np.full((4, 4), c1), np.full((4, 4), c2)) == pytest.approx(expected, abs=1e-12)


def test_ssim_matches_definition():
    """Random 8x8 pairs agree with a straight-from-definition evaluation"""
    prng = PrngState(2)
    for _ in range(10):
        a, b = uniform(prng, (8, 8)), uniform(prng, (8, 8))
        assert abs(ssim(a, b) - _ssim_oracle(a, b)) < 1e-10


@pytest.mark.integration
def test_ssim_matches_definition_at_scale():
    """A thousand random pairs agree with the definition to 1e-10"""
    prng = PrngState(12)
    for _ in range(1000):
        a, b = uniform(prng, (8, 8)), uniform(prng, (8, 8))
        assert abs(ssim(a, b) - _ssim_oracle(a, b)) < 1e-10


def test_ssim_input_checks():
    """Shape mismatch and out-of-range values are rejected"""
    with pytest.raises(InvalidArgumentError):
        ssim(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(InvalidArgumentError):
        ssim(np.full((2, 2), 1.1), np.zeros((2, 2)))
    assert ssim(np.full((2, 2), 1.0 + 1e-10), np.ones((2, 2))) == pytest.approx(1.0)


def test_downscale_reference_area_average():
    """Each latent cell is the mean of its pixel block"""
    ref = np.arange(16, dtype=np.float64).reshape(4, 4) / 15.0
    small = downscale_reference(ref, (2, 2))
    assert small[0, 0] == pytest.approx((0 + 1 + 4 + 5) / 60.0)
    with pytest.raises(InvalidArgumentError):
        downscale_reference(np.zeros((5, 4)), (2, 2))


def test_rank_channels_top_two():
    """Scores [0.9, 0.2, 0.5, 0.7] with C=2 pick channels 0 and 3"""
    result = rank_channels([0.9, 0.2, 0.5, 0.7], 2)
    assert result.indices == [0, 3]
    assert result.scores == [0.9, 0.7]
    assert result.C == 2


def test_rank_channels_ties_prefer_lower_index():
    """Equal scores go to the lower channel id"""
    assert rank_channels([0.1, 0.5, 0.5, 0.5], 2).indices == [1, 2]


def test_select_matches_brute_force_sort():
    """Selection equals a full sort of all channel scores"""
    prng = PrngState(3)
    ref = uniform(prng, (32, 32))
    for _ in range(5):
        latent = _random_latent(prng)
        result = select_top_c(latent, ref, 3)
        scores = result.all_scores
        expected = sorted(sorted(range(len(scores)), key=lambda i: (-scores[i], i))[:3])
        assert result.indices == expected
        assert result.indices == sorted(set(result.indices))


@pytest.mark.integration
def test_select_matches_brute_force_at_scale():
    """A thousand random latents and channel counts agree with a full sort"""
    prng = PrngState(13)
    ref = uniform(prng, (32, 32))
    for _ in range(1000):
        n = randint(prng, 1, 12)
        symbols = np.floor(uniform(prng, (n, 8, 8)) * 11).astype(np.int64) - 5
        latent = Latent(symbols, np.ones(n))
        C = randint(prng, 1, n)
        result = select_top_c(latent, ref, C)
        scores = result.all_scores
        expected = sorted(sorted(range(n), key=lambda i: (-scores[i], i))[:C])
        assert result.indices == expected


def test_select_all_channels():
    """C = n selects everything"""
    prng = PrngState(4)
    latent = _random_latent(prng)
    assert select_top_c(latent, uniform(prng, (32, 32)), latent.n).indices == list(range(latent.n))


def test_select_duplicate_channels():
    """Identical channels tie and the lower index wins"""
    prng = PrngState(5)
    base = _random_latent(prng, n=1).symbols[0]
    latent = Latent(np.stack([base, base, base]), np.ones(3))
    assert select_top_c(latent, uniform(prng, (32, 32)), 1).indices == [0]


def test_selection_invariant_to_affine_rescaling():
    """Positive affine maps of a channel do not change the ranking"""
    prng = PrngState(6)
    latent = _random_latent(prng)
    ref = uniform(prng, (32, 32))
    scaled = latent.symbols.copy()
    scaled[2] = 3 * scaled[2] + 7
    rescaled = Latent(scaled, latent.steps)
    assert select_top_c(latent, ref, 3).indices == select_top_c(rescaled, ref, 3).indices


def test_select_rejects_bad_count():
    """C must lie in [1, n]"""
    prng = PrngState(7)
    latent = _random_latent(prng)
    ref = uniform(prng, (32, 32))
    for bad in (0, latent.n + 1):
        with pytest.raises(InvalidArgumentError):
            select_top_c(latent, ref, bad)


def test_rd_objective_examples():
    """alpha * v_dist + beta * bits"""
    assert rd_objective(0.3, 0.0, RdWeights(1.0, 0.0)) == pytest.approx(0.3)
    assert rd_objective(0.0, 128.0, RdWeights(0.0, 1.0)) == pytest.approx(128.0)
    assert rd_objective(0.2, 50.0, RdWeights(1.0, 0.01)) == pytest.approx(0.7)


def test_rd_weights_validated():
    """Negative or all-zero weights are rejected"""
    with pytest.raises(InvalidArgumentError):
        RdWeights(0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        RdWeights(-1.0, 0.5)


SYNTHETIC = {1: (10.0, 0.5), 2: (20.0, 0.3), 4: (40.0, 0.2)}


def test_choose_channel_count_synthetic_table():
    """Objectives [0.6, 0.5, 0.6] choose the second candidate"""
    best, table = choose_channel_count([1, 2, 4], SYNTHETIC.get, RdWeights(1.0, 0.01))
    assert best == 2
    assert [row["objective"] for row in table] == pytest.approx([0.6, 0.5, 0.6])


def test_choose_channel_count_degenerate_weights():
    """beta=0 picks the best analysis; alpha=0 picks the fewest bits"""
    assert choose_channel_count([1, 2, 4], SYNTHETIC.get, RdWeights(1.0, 0.0))[0] == 4
    assert choose_channel_count([1, 2, 4], SYNTHETIC.get, RdWeights(0.0, 1.0))[0] == 1


def test_choose_channel_count_ties_prefer_smaller():
    """Equal objectives resolve to the smaller C"""
    flat = {1: (1.0, 0.5), 2: (1.0, 0.5)}
    assert choose_channel_count([2, 1], flat.get, RdWeights(1.0, 1.0))[0] == 1


def test_choose_channel_count_reports_failing_c():
    """Evaluation failures carry the offending channel count"""
    def failing(c):
        if c == 4:
            raise MissingArtifactError("no flow model for C=4")
        return SYNTHETIC[c]

    with pytest.raises(EvaluationError) as exc_info:
        choose_channel_count([1, 2, 4], failing, RdWeights(1.0, 0.01))
    assert exc_info.value.channel_count == 4
    with pytest.raises(InvalidArgumentError):
        choose_channel_count([], failing, RdWeights(1.0, 0.01))


def test_write_selection_csv(tmp_path):
    """One row per channel with its score and selection flag"""
    path = write_selection_csv(rank_channels([0.9, 0.2, 0.5, 0.7], 2), tmp_path / "sel.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "channel,ssim,selected"
    assert lines[1].endswith(",1")
    assert lines[2].endswith(",0")
    assert len(lines) == 5
