"""
Conditional rectified-flow generator over pixel space.

Trunk: input projection + time/text embedding, L_base residual blocks, output
projection. Control branch: a trainable copy of the input projection and the
first M_ctl blocks, fed z plus projected guidance, whose block outputs reach
the trunk only through zero-initialized projections.

Time runs from t=0 (noise) to t=1 (data): z_t = t z_1 + (1 - t) z_0 and the
regression target is z_1 - z_0.
"""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.config import (
    FLOW_ACCUMULATION, FLOW_ACTIVATION, FLOW_D_FF, FLOW_D_MODEL, FLOW_D_TIME,
    FLOW_D_TXT, FLOW_L_BASE, FLOW_LR, FLOW_M_CTL, FLOW_WEIGHT_DECAY, SAMPLER_STEPS,
)
from app.errors import (
    CorruptStreamError, GscError, InvalidArgumentError, MissingArtifactError,
    PhaseOrderError, TrainingDivergedError, UnknownTokenError,
)
from app.services.scene_corpus import VOCABULARY, tokenize
from app.utils.containers import ModelSection, load_models, nets_digest, save_models
from app.utils.numerics import (
    AdamState, DenseNet, adamw_step, backward, forward, init_dense_net, residual_block, zero_dense,
)
from app.utils.prng import PrngState, gaussian, randint, uniform

logger = logging.getLogger(__name__)

TIME_SCALE = 1000.0
TOKEN_IDS = {tok: i for i, tok in enumerate(VOCABULARY)}
PHASES = ("base", "control")


@dataclass(frozen=True)
class FlowDims:
    height: int
    width: int
    guidance_dim: int  # n * h * w of the latent volume
    d_model: int = FLOW_D_MODEL
    d_ff: int = FLOW_D_FF
    d_time: int = FLOW_D_TIME
    d_txt: int = FLOW_D_TXT
    L_base: int = FLOW_L_BASE
    M_ctl: int = FLOW_M_CTL
    activation: str = FLOW_ACTIVATION

    def __post_init__(self):
        if self.d_time % 2:
            raise InvalidArgumentError("d_time must be even (sin/cos pairs)")
        if not 1 <= self.M_ctl <= self.L_base:
            raise InvalidArgumentError(f"M_ctl={self.M_ctl} must lie in [1, L_base={self.L_base}]")

    @property
    def pixel_dim(self) -> int:
        return self.height * self.width

    def to_meta(self) -> Dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_config(cls, cfg, height: int, width: int, guidance_dim: int) -> "FlowDims":
        return cls(
            height=height, width=width, guidance_dim=guidance_dim,
            d_model=cfg.flow_d_model, d_ff=cfg.flow_d_ff, d_time=cfg.flow_d_time,
            d_txt=cfg.flow_d_txt, L_base=cfg.flow_l_base, M_ctl=cfg.flow_m_ctl,
            activation=cfg.flow_activation,
        )


@dataclass
class ControlBranch:
    guidance_proj: DenseNet  # guidance_dim -> pixel_dim, bias held at zero
    input_proj: DenseNet
    blocks: List[DenseNet]
    zero_projs: List[DenseNet]


@dataclass
class FlowNetParams:
    dims: FlowDims
    input_proj: DenseNet
    time_proj: DenseNet
    text_proj: DenseNet
    blocks: List[DenseNet]
    out_proj: DenseNet
    text_table: np.ndarray  # (vocab, d_txt)
    control: Optional[ControlBranch] = None
    base_trained: bool = False
    frozen_digest: str = ""

    def trunk_nets(self) -> List[DenseNet]:
        return [self.input_proj, self.time_proj, self.text_proj, *self.blocks, self.out_proj]

    def trunk_digest(self) -> str:
        return nets_digest(self.trunk_nets(), [self.text_table])

    def named_parameters(self) -> List[Tuple[str, np.ndarray]]:
        """Every parameter array in a fixed order, by name"""
        named = []
        trunk = [("input", self.input_proj), ("time", self.time_proj), ("text", self.text_proj)]
        trunk += [(f"block{k}", b) for k, b in enumerate(self.blocks)] + [("out", self.out_proj)]
        for name, net in trunk:
            named.extend(_net_params(f"trunk.{name}", net))
        named.append(("text.table", self.text_table))
        if self.control is not None:
            ctl = self.control
            nets = [("guidance", ctl.guidance_proj), ("input", ctl.input_proj)]
            nets += [(f"block{k}", b) for k, b in enumerate(ctl.blocks)]
            nets += [(f"zero{k}", z) for k, z in enumerate(ctl.zero_projs)]
            for name, net in nets:
                named.extend(_net_params(f"control.{name}", net))
        return named

    def trainable(self, phase: str) -> List[Tuple[str, np.ndarray]]:
        if phase == "base":
            return [(n, p) for n, p in self.named_parameters() if not n.startswith("control.")]
        if phase == "control":
            return [
                (n, p) for n, p in self.named_parameters()
                if n.startswith("control.") and n != "control.guidance.b0"
            ]
        raise InvalidArgumentError(f"phase must be one of {PHASES}, got {phase!r}")


def _net_params(prefix: str, net: DenseNet) -> List[Tuple[str, np.ndarray]]:
    out = []
    for i, layer in enumerate(net.layers):
        out.append((f"{prefix}.W{i}", layer.weight))
        out.append((f"{prefix}.b{i}", layer.bias))
    return out


@dataclass(frozen=True)
class SamplerConfig:
    N: int = SAMPLER_STEPS
    seed: int = 3

    def __post_init__(self):
        if self.N < 1:
            raise InvalidArgumentError(f"sampler needs N >= 1 steps, got {self.N}")

    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N + 1)


@dataclass
class FlowSample:
    """One training item: target image, caption and guidance volume"""
    target: np.ndarray  # (pixel_dim,)
    caption: str
    guidance: Optional[np.ndarray] = None  # (guidance_dim,), dequantized selected channels


def init_flow_params(dims: FlowDims, prng: PrngState) -> FlowNetParams:
    d = dims.d_model
    return FlowNetParams(
        dims=dims,
        input_proj=init_dense_net([dims.pixel_dim, d], ["linear"], prng.split(0)),
        time_proj=init_dense_net([dims.d_time, d, d], [dims.activation, "linear"], prng.split(1)),
        text_proj=init_dense_net([dims.d_txt, d], ["linear"], prng.split(2)),
        blocks=[residual_block(d, dims.d_ff, dims.activation, prng.split(10 + k)) for k in range(dims.L_base)],
        out_proj=init_dense_net([d, dims.pixel_dim], ["linear"], prng.split(3), scale=0.1),
        text_table=gaussian(prng.split(4), (len(VOCABULARY), dims.d_txt)),
    )


def attach_control(params: FlowNetParams, prng: PrngState) -> FlowNetParams:
    """Add a control branch: copied input projection and first M_ctl blocks, zero output projections"""
    dims = params.dims
    control = ControlBranch(
        guidance_proj=init_dense_net([dims.guidance_dim, dims.pixel_dim], ["linear"], prng),
        input_proj=params.input_proj.copy(),
        blocks=[b.copy() for b in params.blocks[:dims.M_ctl]],
        zero_projs=[zero_dense(dims.d_model, dims.d_model) for _ in range(dims.M_ctl)],
    )
    return FlowNetParams(
        dims=dims,
        input_proj=params.input_proj,
        time_proj=params.time_proj,
        text_proj=params.text_proj,
        blocks=params.blocks,
        out_proj=params.out_proj,
        text_table=params.text_table,
        control=control,
        base_trained=params.base_trained,
        frozen_digest=params.trunk_digest(),
    )


def time_embedding(t: np.ndarray, d_time: int) -> np.ndarray:
    """Sinusoidal features [sin, cos] of t * TIME_SCALE; t of shape (B,)"""
    half = d_time // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    angles = np.outer(np.asarray(t, dtype=np.float64) * TIME_SCALE, freqs)
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def token_ids(caption: str) -> List[int]:
    ids = []
    for tok in tokenize(caption):
        if tok not in TOKEN_IDS:
            raise UnknownTokenError(f"token {tok!r} is not in the caption vocabulary")
        ids.append(TOKEN_IDS[tok])
    return ids


def embed_caption(text: str, params: FlowNetParams) -> np.ndarray:
    """Bag-of-tokens: sum of table rows; the empty caption embeds to zero"""
    emb = np.zeros(params.dims.d_txt)
    for i in token_ids(text):
        emb = emb + params.text_table[i]
    return emb


def guidance_volume(indices: Sequence[int], dequantized: np.ndarray, n: int) -> np.ndarray:
    """Place C dequantized channel maps (C, h, w) at their indices in a zero n-channel volume"""
    maps = np.asarray(dequantized, dtype=np.float64)
    if maps.ndim != 3 or maps.shape[0] != len(indices):
        raise InvalidArgumentError(f"{len(indices)} indices but {maps.shape[0] if maps.ndim == 3 else '?'} channel maps")
    if any(not 0 <= i < n for i in indices):
        raise InvalidArgumentError(f"channel index outside [0, {n})")
    volume = np.zeros((n,) + maps.shape[1:])
    if len(indices):
        volume[list(indices)] = maps
    return volume.ravel()


def embed_guidance(sel, latent, params: FlowNetParams) -> np.ndarray:
    """
    Project the selected, dequantized channels (zero elsewhere) to pixel
    width. Without a control branch, or with C = 0, guidance is zero.
    """
    if params.control is None or not sel.indices:
        return np.zeros(params.dims.pixel_dim)
    if any(i >= latent.n for i in sel.indices):
        raise InvalidArgumentError("selection does not match the latent's channel count")
    steps = latent.steps[sel.indices][:, None, None]
    deq = latent.symbols[sel.indices].astype(np.float64) * steps
    volume = guidance_volume(sel.indices, deq, latent.n)
    if volume.size != params.dims.guidance_dim:
        raise InvalidArgumentError(f"guidance volume {volume.size} does not match model {params.dims.guidance_dim}")
    return project_guidance(params, volume)


def project_guidance(params: FlowNetParams, volume: np.ndarray) -> np.ndarray:
    if params.control is None:
        return np.zeros(params.dims.pixel_dim)
    return forward(params.control.guidance_proj, volume)


@dataclass
class _Tape:
    z: np.ndarray
    time_feat: np.ndarray
    emb: np.ndarray
    ctl_in: Optional[np.ndarray]
    h: List[np.ndarray] = field(default_factory=list)  # trunk states h_0 .. h_L
    c: List[np.ndarray] = field(default_factory=list)  # control states c_0 .. c_M


def _as_batch(arr, width: int, what: str) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise InvalidArgumentError(f"{what} has shape {np.shape(arr)}, expected (..., {width})")
    return a


def _run_flow(params: FlowNetParams, z, t, emb, guidance) -> Tuple[np.ndarray, _Tape]:
    dims = params.dims
    z = _as_batch(z, dims.pixel_dim, "z")
    tt = np.broadcast_to(np.asarray(t, dtype=np.float64), (z.shape[0],))
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise InvalidArgumentError("t must lie in [0, 1]")
    emb = _as_batch(emb, dims.d_txt, "caption embedding")
    if emb.shape[0] != z.shape[0]:
        emb = np.broadcast_to(emb, (z.shape[0], dims.d_txt))
    time_feat = time_embedding(tt, dims.d_time)
    e = forward(params.time_proj, time_feat) + forward(params.text_proj, emb)

    h = forward(params.input_proj, z) + e
    ctl = params.control
    ctl_in = None
    tape = _Tape(z, time_feat, emb, None)
    if ctl is not None:
        g = np.zeros_like(z) if guidance is None else _as_batch(guidance, dims.pixel_dim, "guidance")
        ctl_in = z + g
        tape.ctl_in = ctl_in
        c = forward(ctl.input_proj, ctl_in) + e
        tape.c.append(c)
    tape.h.append(h)
    for k, block in enumerate(params.blocks):
        h = forward(block, h)
        if ctl is not None and k < len(ctl.blocks):
            c = forward(ctl.blocks[k], c)
            tape.c.append(c)
            h = h + forward(ctl.zero_projs[k], c)
        tape.h.append(h)
    return forward(params.out_proj, h), tape


def predict_vector_field(params: FlowNetParams, z, t, emb, guidance=None) -> np.ndarray:
    """v_theta(z, t | caption, guidance); keeps the input's batch shape"""
    v, _ = _run_flow(params, z, t, emb, guidance)
    return v[0] if np.ndim(z) == 1 else v


def _flow_backward(
    params: FlowNetParams,
    tape: _Tape,
    dv: np.ndarray,
    guidance_volumes: Optional[np.ndarray],
    tokens: Sequence[Sequence[int]],
) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}

    def put(prefix: str, net: DenseNet, gs: List[np.ndarray]):
        for i in range(len(net.layers)):
            grads[f"{prefix}.W{i}"] = gs[2 * i]
            grads[f"{prefix}.b{i}"] = gs[2 * i + 1]

    ctl = params.control
    gs, dh = backward(params.out_proj, tape.h[-1], dv)
    put("trunk.out", params.out_proj, gs)
    dc_from_trunk: Dict[int, np.ndarray] = {}
    for k in range(len(params.blocks) - 1, -1, -1):
        if ctl is not None and k < len(ctl.blocks):
            gs, dc = backward(ctl.zero_projs[k], tape.c[k + 1], dh)
            put(f"control.zero{k}", ctl.zero_projs[k], gs)
            dc_from_trunk[k + 1] = dc
        gs, dh = backward(params.blocks[k], tape.h[k], dh)
        put(f"trunk.block{k}", params.blocks[k], gs)
    de = dh.copy()
    gs, _ = backward(params.input_proj, tape.z, dh)
    put("trunk.input", params.input_proj, gs)

    if ctl is not None:
        dc = np.zeros_like(dh)
        for k in range(len(ctl.blocks) - 1, -1, -1):
            dc = dc + dc_from_trunk[k + 1]
            gs, dc = backward(ctl.blocks[k], tape.c[k], dc)
            put(f"control.block{k}", ctl.blocks[k], gs)
        de = de + dc
        gs, dg = backward(ctl.input_proj, tape.ctl_in, dc)
        put("control.input", ctl.input_proj, gs)
        vols = guidance_volumes if guidance_volumes is not None else np.zeros((dv.shape[0], params.dims.guidance_dim))
        gs, _ = backward(ctl.guidance_proj, vols, dg)
        put("control.guidance", ctl.guidance_proj, gs)

    gs, _ = backward(params.time_proj, tape.time_feat, de)
    put("trunk.time", params.time_proj, gs)
    gs, demb = backward(params.text_proj, tape.emb, de)
    put("trunk.text", params.text_proj, gs)
    table_grad = np.zeros_like(params.text_table)
    for b, ids in enumerate(tokens):
        for i in ids:
            table_grad[i] += demb[b]
    grads["text.table"] = table_grad
    return grads


def flow_matching_loss(v_pred: np.ndarray, v_target: np.ndarray) -> float:
    """Mean over items of the per-item mean squared error"""
    diff = np.atleast_2d(v_pred) - np.atleast_2d(v_target)
    return float(np.mean(np.mean(diff ** 2, axis=1)))


def sample_conditional_path(z1, prng: PrngState, t=None):
    """
    Draw t ~ U[0, 1] (unless given) and z0 ~ N(0, I), in that order.
    Returns (t, z0, z_t, v*) with z_t = t z1 + (1 - t) z0 and v* = z1 - z0.
    """
    z1 = np.asarray(z1, dtype=np.float64)
    if t is None:
        t = float(uniform(prng, 1)[0])
    z0 = gaussian(prng, z1.shape)
    zt = t * z1 + (1.0 - t) * z0
    return t, z0, zt, z1 - z0


def cfm_loss(
    params: FlowNetParams,
    batch: Sequence[FlowSample],
    prng: PrngState,
    phase: str = "base",
) -> Tuple[float, Dict[str, np.ndarray]]:
    """
    Conditional flow-matching loss and gradients for the parameters trainable
    in `phase`. In the base phase guidance is forced to zero.
    """
    if not batch:
        raise InvalidArgumentError("cfm_loss needs a nonempty batch")
    trainable = dict(params.trainable(phase))
    dims = params.dims
    ts, zts, targets, vols, embs, tokens = [], [], [], [], [], []
    for item in batch:
        t, _, zt, v_star = sample_conditional_path(item.target, prng)
        ts.append(t)
        zts.append(zt)
        targets.append(v_star)
        ids = token_ids(item.caption)
        tokens.append(ids)
        embs.append(params.text_table[ids].sum(axis=0) if ids else np.zeros(dims.d_txt))
        vol = item.guidance if (phase == "control" and item.guidance is not None) else np.zeros(dims.guidance_dim)
        vols.append(vol)
    z = np.stack(zts)
    vols_arr = np.stack(vols)
    guidance = forward(params.control.guidance_proj, vols_arr) if params.control is not None else None
    v, tape = _run_flow(params, z, np.asarray(ts), np.stack(embs), guidance)
    target = np.stack(targets)
    loss = flow_matching_loss(v, target)
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"flow-matching loss is not finite: {loss}")
    dv = 2.0 * (v - target) / v.size
    grads = _flow_backward(params, tape, dv, vols_arr if params.control is not None else None, tokens)
    return loss, {name: grads[name] for name in trainable}


def train(
    params: FlowNetParams,
    samples: Sequence[FlowSample],
    phase: str,
    steps: int,
    seed: int,
    lr: float = FLOW_LR,
    weight_decay: float = FLOW_WEIGHT_DECAY,
    accumulation: int = FLOW_ACCUMULATION,
) -> Tuple[FlowNetParams, List[float]]:
    """
    AdamW on the phase's trainable parameters, gradients averaged over
    `accumulation` micro-batches of one sample. The control phase attaches a
    branch when none exists and leaves the trunk bitwise unchanged.
    """
    if phase not in PHASES:
        raise InvalidArgumentError(f"phase must be one of {PHASES}, got {phase!r}")
    if not samples:
        raise InvalidArgumentError("flow training needs a nonempty sample set")
    prng = PrngState(seed)
    if phase == "base":
        if params.control is not None:
            raise PhaseOrderError("base phase cannot run once a control branch is attached")
    else:
        if not params.base_trained:
            raise PhaseOrderError("control phase requires a trained base model")
        if params.control is None:
            params = attach_control(params, prng.split(0))

    named = params.trainable(phase)
    arrays = [p for _, p in named]
    state = AdamState.zeros_like(arrays)
    draw = prng.split(1)
    history: List[float] = []
    started = time.time()
    for step in range(steps):
        acc = [np.zeros_like(p) for p in arrays]
        step_loss = 0.0
        for _ in range(accumulation):
            item = samples[randint(draw, 0, len(samples) - 1)]
            loss, grads = cfm_loss(params, [item], draw, phase)
            step_loss += loss / accumulation
            for a, (name, _) in zip(acc, named):
                a += grads[name] / accumulation
        new_arrays, state = adamw_step(arrays, acc, state, lr=lr, weight_decay=weight_decay)
        for p, new in zip(arrays, new_arrays):
            p[...] = new
        history.append(step_loss)
        if step % 100 == 0 or step == steps - 1:
            logger.info(f"[FLOW] phase={phase} step {step}/{steps} loss={step_loss:.6f}")

    if phase == "base":
        params.base_trained = True
    elif params.trunk_digest() != params.frozen_digest:
        raise GscError("frozen trunk changed during control training")
    logger.info(f"[FLOW] phase={phase} trained {steps} steps in {time.time() - started:.1f}s")
    return params, history


def euler_integrate(field: Callable[[np.ndarray, float], np.ndarray], z0: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """z <- z + (t_{k+1} - t_k) field(z, t_k) over a strictly increasing grid"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
        raise InvalidArgumentError("time grid must be strictly increasing with at least two points")
    z = np.asarray(z0, dtype=np.float64).copy()
    for k in range(grid.size - 1):
        z = z + (grid[k + 1] - grid[k]) * field(z, float(grid[k]))
    return z


def sample(
    params: FlowNetParams,
    emb: np.ndarray,
    guidance: Optional[np.ndarray],
    cfg: SamplerConfig,
    prng: Optional[PrngState] = None,
) -> np.ndarray:
    """Integrate from N(0, I) at t=0 to t=1; clamp to [0, 1] and reshape to the image"""
    prng = prng if prng is not None else PrngState(cfg.seed)
    dims = params.dims
    z0 = gaussian(prng, dims.pixel_dim)
    z1 = euler_integrate(lambda z, t: predict_vector_field(params, z, t, emb, guidance), z0, cfg.grid())
    return np.clip(z1, 0.0, 1.0).reshape(dims.height, dims.width)


def marginal_vf_oracle(targets, weights, z, t: float) -> np.ndarray:
    """
    Exact marginal velocity for a discrete target distribution:
    sum_i w_i(z, t) (z1_i - z) / (1 - t), w_i proportional to
    weight_i N(z; t z1_i, (1 - t)^2 I).
    """
    if not 0.0 < t < 1.0:
        raise InvalidArgumentError("t must lie strictly inside (0, 1)")
    pts = np.asarray(targets, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    zz = np.atleast_1d(np.asarray(z, dtype=np.float64))
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (pts.shape[0],) or np.any(w < 0) or w.sum() <= 0:
        raise InvalidArgumentError("weights must be non-negative, one per target point, not all zero")
    sigma = 1.0 - t
    log_post = np.log(np.where(w > 0, w, 1.0)) - ((zz - t * pts) ** 2).sum(axis=1) / (2.0 * sigma ** 2)
    log_post = np.where(w > 0, log_post, -np.inf)
    post = np.exp(log_post - log_post.max())
    post /= post.sum()
    v = (post[:, None] * (pts - zz)).sum(axis=0) / sigma
    return v if np.ndim(z) else v[0]


def save_flow(params: FlowNetParams, path: Union[str, Path], extra_meta: Optional[Dict] = None) -> Path:
    sections = [ModelSection("trunk", params.trunk_nets(), {"text_table": params.text_table})]
    if params.control is not None:
        ctl = params.control
        sections.append(ModelSection("control", [ctl.guidance_proj, ctl.input_proj, *ctl.blocks, *ctl.zero_projs]))
    meta = {
        "kind": "flow",
        "dims": params.dims.to_meta(),
        "base_trained": params.base_trained,
        "frozen_digest": params.frozen_digest,
        "trunk_digest": params.trunk_digest(),
    }
    meta.update(extra_meta or {})
    return save_models(path, sections, meta)


def load_flow(path: Union[str, Path]) -> Tuple[FlowNetParams, Dict]:
    meta, sections = load_models(path)
    if meta.get("kind") != "flow" or "trunk" not in sections:
        raise MissingArtifactError(f"{path} is not a flow artifact")
    dims = FlowDims(**meta["dims"])
    nets = sections["trunk"].nets
    L = dims.L_base
    params = FlowNetParams(
        dims=dims,
        input_proj=nets[0], time_proj=nets[1], text_proj=nets[2],
        blocks=list(nets[3:3 + L]), out_proj=nets[3 + L],
        text_table=sections["trunk"].tensors["text_table"],
        base_trained=bool(meta["base_trained"]),
        frozen_digest=meta.get("frozen_digest", ""),
    )
    if params.trunk_digest() != meta["trunk_digest"]:
        raise CorruptStreamError(f"{path}: trunk digest mismatch")
    if "control" in sections:
        cn = sections["control"].nets
        M = dims.M_ctl
        params.control = ControlBranch(cn[0], cn[1], list(cn[2:2 + M]), list(cn[2 + M:2 + 2 * M]))
        if params.frozen_digest != params.trunk_digest():
            raise CorruptStreamError(f"{path}: control branch was trained against a different trunk")
    return params, meta
