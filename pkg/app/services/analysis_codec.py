"""
Patch-linear analysis/synthesis codec, scalar quantizer and per-channel
factorized entropy model.

Images are split into p x p patches; each flattened patch is mapped to n
channel values, so the latent is n maps of (H/p) x (W/p). The synthesis map
exists for codec pretraining and diagnostics only; decoding is generative.
"""
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import (
    CODEC_ALPHABET_K, CODEC_BATCH, CODEC_CHANNELS, CODEC_LR, CODEC_PATCH,
    CODEC_QUANT_STEP, ENTROPY_SMOOTHING,
)
from app.errors import InvalidArgumentError, MissingArtifactError, TrainingDivergedError
from app.utils.containers import ModelSection, load_models, save_models
from app.utils.files import validate_image, write_png
from app.utils.numerics import AdamState, DenseLayer, DenseNet, adamw_step, backward, forward
from app.utils.prng import PrngState, gaussian, randint, uniform
from app.utils.range_coder import FrequencyTable

logger = logging.getLogger(__name__)

MAX_SYMBOL = 2 ** 15


@dataclass
class CodecParams:
    """g_a and g_s as bias-free single-layer nets, plus per-channel quant steps"""
    analysis: DenseNet  # patch_dim -> n
    synthesis: DenseNet  # n -> patch_dim
    steps: np.ndarray  # (n,)
    patch: int
    channels_in: int = 1
    alphabet_k: int = CODEC_ALPHABET_K
    tag: str = "codec"

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float32).astype(np.float64)
        if self.steps.shape != (self.n,):
            raise InvalidArgumentError(f"need one quant step per channel, got {self.steps.shape}")
        if np.any(self.steps < 1e-3) or np.any(self.steps > 10.0):
            raise InvalidArgumentError("quant steps must lie in [1e-3, 10]")
        if self.analysis.in_dim != self.patch_dim or self.synthesis.out_dim != self.patch_dim:
            raise InvalidArgumentError("analysis/synthesis dims do not match the patch size")

    @property
    def n(self) -> int:
        return self.analysis.out_dim

    @property
    def patch_dim(self) -> int:
        return self.patch * self.patch * self.channels_in

    @property
    def W_a(self) -> np.ndarray:
        return self.analysis.layers[0].weight

    @property
    def W_s(self) -> np.ndarray:
        return self.synthesis.layers[0].weight


@dataclass
class Latent:
    symbols: np.ndarray  # int64 (n, h, w)
    steps: np.ndarray  # (n,)
    y: Optional[np.ndarray] = None  # pre-quantization values, kept during training only
    saturated: int = 0

    @property
    def n(self) -> int:
        return self.symbols.shape[0]

    @property
    def spatial(self) -> Tuple[int, int]:
        return self.symbols.shape[1], self.symbols.shape[2]


def _linear_net(weight: np.ndarray) -> DenseNet:
    return DenseNet([DenseLayer(weight, np.zeros(weight.shape[0]), "linear")])


def init_codec(
    prng: PrngState,
    n: int = CODEC_CHANNELS,
    patch: int = CODEC_PATCH,
    channels_in: int = 1,
    quant_step: float = CODEC_QUANT_STEP,
    alphabet_k: int = CODEC_ALPHABET_K,
) -> CodecParams:
    """Gaussian analysis map with its least-squares inverse as synthesis map"""
    patch_dim = patch * patch * channels_in
    w_a = gaussian(prng, (n, patch_dim)) / np.sqrt(patch_dim)
    w_s = np.linalg.pinv(w_a)
    return CodecParams(_linear_net(w_a), _linear_net(w_s), np.full(n, quant_step), patch, channels_in, alphabet_k)


def patchify(x: np.ndarray, patch: int) -> np.ndarray:
    """(H, W[, c]) -> (H/p * W/p, p*p*c), patches row-major, pixels row-major within a patch"""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    height, width, ch = arr.shape
    if height % patch or width % patch:
        raise InvalidArgumentError(f"image {height}x{width} not divisible by patch {patch}")
    hp, wp = height // patch, width // patch
    blocks = arr.reshape(hp, patch, wp, patch, ch).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(hp * wp, patch * patch * ch)


def unpatchify(patches: np.ndarray, height: int, width: int, patch: int, channels: int = 1) -> np.ndarray:
    hp, wp = height // patch, width // patch
    blocks = patches.reshape(hp, wp, patch, patch, channels).transpose(0, 2, 1, 3, 4)
    img = blocks.reshape(height, width, channels)
    return img[:, :, 0] if channels == 1 else img


def analyze(x: np.ndarray, params: CodecParams) -> np.ndarray:
    """y = g_a(x): per-patch linear map, shape (n, H/p, W/p)"""
    arr = np.asarray(x, dtype=np.float64)
    ch = 1 if arr.ndim == 2 else arr.shape[2]
    if ch != params.channels_in:
        raise InvalidArgumentError(f"codec expects {params.channels_in} channel(s), image has {ch}")
    patches = patchify(arr, params.patch)
    y = patches @ params.W_a.T
    hp, wp = arr.shape[0] // params.patch, arr.shape[1] // params.patch
    return y.T.reshape(params.n, hp, wp)


def synthesize(y: np.ndarray, params: CodecParams) -> np.ndarray:
    """g_s: channel maps back to pixels"""
    n, hp, wp = y.shape
    patches = y.reshape(n, hp * wp).T @ params.W_s.T
    return unpatchify(patches, hp * params.patch, wp * params.patch, params.patch, params.channels_in)


def quantize(y: np.ndarray, params: CodecParams) -> Latent:
    """Round half to even on y / q, saturating at +/-K with K <= 2^15"""
    if not np.all(np.isfinite(y)):
        raise InvalidArgumentError("cannot quantize non-finite latent values")
    k = params.alphabet_k
    if not 1 <= k <= MAX_SYMBOL:
        raise InvalidArgumentError(f"symbol range K={k} outside [1, {MAX_SYMBOL}]")
    raw = np.rint(y / params.steps[:, None, None])
    saturated = int(np.count_nonzero(np.abs(raw) > k))
    if saturated:
        logger.warning(f"[CODEC] {saturated} latent symbols saturated at +/-{k}")
    symbols = np.clip(raw, -k, k).astype(np.int64)
    return Latent(symbols, params.steps.copy(), y=np.asarray(y), saturated=saturated)


def dequantize(latent: Latent) -> np.ndarray:
    return latent.symbols.astype(np.float64) * latent.steps[:, None, None]


@dataclass
class EntropyModel:
    """
    Smoothed per-channel histograms over [-K, K] and their 16-bit quantized
    frequency tables.
    """
    counts: np.ndarray  # (n, 2K + 1), smoothing already added
    alphabet_k: int
    tables: List[FrequencyTable] = field(init=False, repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64)
        if self.counts.ndim != 2 or self.counts.shape[1] != 2 * self.alphabet_k + 1:
            raise InvalidArgumentError(f"counts shape {self.counts.shape} does not match K={self.alphabet_k}")
        self.tables = [FrequencyTable.from_counts(row, offset=-self.alphabet_k) for row in self.counts]

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    def probability(self, channel: int, symbol: int) -> float:
        row = self.counts[channel]
        return float(row[symbol + self.alphabet_k] / row.sum())

    def codelength(self, channel: int, symbol: int) -> float:
        """Ideal codelength -log2 P in bits under the smoothed histogram"""
        return float(-np.log2(self.probability(channel, symbol)))

    def ideal_bits(self, symbols: Sequence[int], channel: int) -> float:
        """Ideal bits under the quantized table the range coder actually uses"""
        table = self.tables[channel]
        return float(sum(table.bits(int(s)) for s in symbols))

    def digest(self) -> bytes:
        """8-byte fingerprint of the coding tables"""
        h = hashlib.sha256()
        h.update(self.alphabet_k.to_bytes(4, "little"))
        for table in self.tables:
            h.update(np.asarray(table.cdf, dtype="<u4").tobytes())
        return h.digest()[:8]


def fit_entropy_model(
    latents: Sequence[Latent],
    alphabet_k: int = CODEC_ALPHABET_K,
    smoothing: float = ENTROPY_SMOOTHING,
) -> EntropyModel:
    if not latents:
        raise InvalidArgumentError("cannot fit an entropy model to zero latents")
    n = latents[0].n
    counts = np.full((n, 2 * alphabet_k + 1), smoothing, dtype=np.float64)
    for lat in latents:
        if lat.n != n:
            raise InvalidArgumentError("latents disagree on channel count")
        if np.any(np.abs(lat.symbols) > alphabet_k):
            raise InvalidArgumentError(f"latent symbols exceed alphabet K={alphabet_k}")
        for c in range(n):
            counts[c] += np.bincount(lat.symbols[c].ravel() + alphabet_k, minlength=2 * alphabet_k + 1)
    return EntropyModel(counts, alphabet_k)


def empirical_entropy(latents: Sequence[Latent]) -> float:
    """Mean per-symbol entropy (bits) of the pooled symbol histogram"""
    symbols = np.concatenate([lat.symbols.ravel() for lat in latents])
    _, counts = np.unique(symbols, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum())


def _rate_proxy(y_noisy: np.ndarray, steps: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean of log2(1 + (y/q)^2) and its gradient"""
    scaled = y_noisy / steps
    rate = np.log2(1.0 + scaled ** 2)
    grad = (2.0 * scaled / steps) / ((1.0 + scaled ** 2) * np.log(2.0))
    return float(rate.mean()), grad / rate.size


def codec_loss(
    params: CodecParams,
    patches: np.ndarray,
    noise: np.ndarray,
    lambda_rate: float,
) -> Tuple[float, List[np.ndarray]]:
    """
    MSE(x, g_s(y + u)) + lambda * rate proxy for one batch of patches.
    Returns the loss and gradients for [W_a, W_s].
    """
    y = forward(params.analysis, patches)
    y_noisy = y + noise
    recon = forward(params.synthesis, y_noisy)
    diff = recon - patches
    mse = float(np.mean(diff ** 2))
    rate, rate_grad = _rate_proxy(y_noisy, params.steps)
    g_recon = 2.0 * diff / diff.size
    syn_grads, g_y = backward(params.synthesis, y_noisy, g_recon)
    g_y = g_y + lambda_rate * rate_grad
    ana_grads, _ = backward(params.analysis, patches, g_y)
    return mse + lambda_rate * rate, [ana_grads[0], syn_grads[0]]


def train_codec(
    images: Sequence[np.ndarray],
    lambda_rate: float,
    steps: int,
    seed: int,
    n: int = CODEC_CHANNELS,
    patch: int = CODEC_PATCH,
    quant_step: float = CODEC_QUANT_STEP,
    alphabet_k: int = CODEC_ALPHABET_K,
    lr: float = CODEC_LR,
    batch: int = CODEC_BATCH,
    init: Optional[CodecParams] = None,
) -> Tuple[CodecParams, List[float]]:
    """
    Train W_a, W_s with AdamW (no weight decay) under additive uniform
    quantization noise. Biases stay zero. Deterministic per seed.
    """
    if not images:
        raise InvalidArgumentError("codec training needs a nonempty corpus")
    prng = PrngState(seed)
    first = validate_image(images[0])
    channels_in = 1 if first.ndim == 2 else first.shape[2]
    params = init if init is not None else init_codec(prng.split(0), n, patch, channels_in, quant_step, alphabet_k)
    if steps == 0:
        return params, []

    draw = prng.split(1)
    weights = [params.W_a.copy(), params.W_s.copy()]
    state = AdamState.zeros_like(weights)
    history: List[float] = []
    started = time.time()
    for step in range(steps):
        picks = [randint(draw, 0, len(images) - 1) for _ in range(batch)]
        patches = np.concatenate([patchify(images[i], patch) for i in picks])
        noise = (uniform(draw, (patches.shape[0], params.n)) - 0.5) * params.steps
        current = CodecParams(_linear_net(weights[0]), _linear_net(weights[1]), params.steps,
                              patch, channels_in, alphabet_k)
        loss, grads = codec_loss(current, patches, noise, lambda_rate)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"codec loss diverged at step {step}: {loss}")
        weights, state = adamw_step(weights, grads, state, lr=lr, weight_decay=0.0)
        history.append(loss)
        if step % 100 == 0 or step == steps - 1:
            logger.info(f"[CODEC] step {step}/{steps} loss={loss:.6f}")

    logger.info(f"[CODEC] trained {steps} steps in {time.time() - started:.1f}s (lambda_rate={lambda_rate})")
    trained = CodecParams(_linear_net(weights[0]), _linear_net(weights[1]), params.steps,
                          patch, channels_in, alphabet_k)
    return trained, history


def reconstruction_mse(images: Sequence[np.ndarray], params: CodecParams) -> float:
    """Pixel MSE of g_s(dequantize(quantize(g_a(x))))"""
    errs = []
    for x in images:
        latent = quantize(analyze(x, params), params)
        errs.append(np.mean((synthesize(dequantize(latent), params) - x) ** 2))
    return float(np.mean(errs))


def channel_image(latent: Latent, index: int) -> np.ndarray:
    """Min-max normalized channel map; a constant channel maps to 0.5"""
    if not 0 <= index < latent.n:
        raise InvalidArgumentError(f"channel index {index} outside [0, {latent.n})")
    return normalize_map(latent.symbols[index])


def normalize_map(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.full(arr.shape, 0.5)
    return (arr - lo) / (hi - lo)


def export_channel_images(latent: Latent, indices: Sequence[int], out_dir: Union[str, Path]) -> List[Path]:
    out = Path(out_dir)
    return [write_png(channel_image(latent, i), out / f"channel_{i:03d}.png") for i in indices]


@dataclass
class CodecBundle:
    """What both ends share: codec params and the entropy model"""
    params: CodecParams
    entropy: EntropyModel

    @property
    def digest(self) -> bytes:
        return self.entropy.digest()


def build_bundle(images: Sequence[np.ndarray], params: CodecParams, smoothing: float = ENTROPY_SMOOTHING) -> CodecBundle:
    latents = [quantize(analyze(x, params), params) for x in images]
    return CodecBundle(params, fit_entropy_model(latents, params.alphabet_k, smoothing))


def save_codec(bundle: CodecBundle, path: Union[str, Path]) -> Path:
    p = bundle.params
    sections = [
        ModelSection("codec", [p.analysis, p.synthesis], {"steps": p.steps}),
        ModelSection("entropy", [], {"counts": bundle.entropy.counts}),
    ]
    meta = {
        "kind": "codec",
        "patch": p.patch,
        "channels_in": p.channels_in,
        "alphabet_k": p.alphabet_k,
        "digest": bundle.digest.hex(),
    }
    return save_models(path, sections, meta)


def load_codec(path: Union[str, Path]) -> CodecBundle:
    meta, sections = load_models(path)
    if meta.get("kind") != "codec" or "codec" not in sections or "entropy" not in sections:
        raise MissingArtifactError(f"{path} is not a codec artifact")
    codec = sections["codec"]
    params = CodecParams(
        codec.nets[0], codec.nets[1], codec.tensors["steps"],
        int(meta["patch"]), int(meta["channels_in"]), int(meta["alphabet_k"]),
    )
    return CodecBundle(params, EntropyModel(sections["entropy"].tensors["counts"], params.alphabet_k))
