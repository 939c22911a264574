"""
GSC Desk - generative semantic coding at toy scale
Command-line entrypoint: corpus generation, codec and flow training,
encode/decode, rate sweeps and theory reports.
"""
import argparse
import logging
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np
from dotenv import load_dotenv

from app.config import GscConfig, configure_logging, load_config
from app.errors import GscError, InvalidArgumentError, MissingArtifactError
from app.services.analysis_codec import (
    CodecBundle, build_bundle, export_channel_images, load_codec,
    reconstruction_mse, save_codec, train_codec,
)
from app.services.channel_select import RdWeights, write_selection_csv
from app.services.evalsuite import (
    best_channel_count, prompt_ablation, psnr, rd_sweep, vision_analyze, v_distance, write_sweep_csv,
)
from app.services.flow_model import (
    FlowDims, SamplerConfig, init_flow_params, load_flow, save_flow, train,
)
from app.services.pipeline import build_flow_samples, decode_stream, encode_image
from app.services.registry import ModelRegistry
from app.services.scene_corpus import CAPTION_DETAILS, generate_corpus, read_corpus, write_corpus
from app.services.telemetry import record_training_run
from app.services.theory import image_entropy, stationarity_report, write_theory_report
from app.utils.files import load_image_any, to_grayscale, write_image, write_sidecar
from app.utils.prng import PrngState

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger("gsc")


# ============================================================================
# SHARED HELPERS
# ============================================================================
def _config(args) -> GscConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: GscConfig) -> Path:
    out = Path(args.out or cfg.paths_out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _registry(out: Path, cfg: GscConfig) -> ModelRegistry:
    url = os.getenv("GSC_DATABASE_URL")
    if url:
        return ModelRegistry(url)
    return ModelRegistry.for_directory(out, cfg.paths_registry)


def _codec(out: Path, cfg: GscConfig) -> CodecBundle:
    return load_codec(out / cfg.paths_codec)


def _sampler(cfg: GscConfig) -> SamplerConfig:
    return SamplerConfig(N=cfg.sampler_n, seed=cfg.sampler_seed)


def _weights(cfg: GscConfig) -> RdWeights:
    return RdWeights(cfg.selection_alpha, cfg.selection_beta)


def _record_run(registry: ModelRegistry, **fields) -> None:
    db = registry.session()
    try:
        record_training_run(db, **fields)
    finally:
        db.close()


# ============================================================================
# SUBCOMMANDS
# ============================================================================
def cmd_gen_corpus(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    train_records = generate_corpus(cfg.corpus_size, cfg.scene_bounds(allow_overlap=True), cfg.corpus_seed)
    heldout = generate_corpus(cfg.corpus_heldout, cfg.scene_bounds(allow_overlap=False), cfg.corpus_seed + 7919)
    write_corpus(train_records, out / cfg.paths_corpus)
    write_corpus(heldout, out / cfg.paths_heldout)
    print(f"corpus: {len(train_records)} training scenes, {len(heldout)} held-out scenes in {out}")
    return 0


def cmd_train_codec(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    records = read_corpus(out / cfg.paths_corpus)
    images = [r.image for r in records]
    started = time.time()
    params, history = train_codec(
        images, cfg.codec_lambda_rate, cfg.codec_steps, cfg.codec_seed,
        n=cfg.codec_n, patch=cfg.codec_patch, quant_step=cfg.codec_quant_step,
        alphabet_k=cfg.codec_alphabet_k, lr=cfg.codec_lr, batch=cfg.codec_batch,
    )
    bundle = build_bundle(images, params)
    path = save_codec(bundle, out / cfg.paths_codec)
    registry = _registry(out, cfg)
    registry.register_codec(bundle, path)
    _record_run(
        registry, kind="codec", steps=cfg.codec_steps, seed=cfg.codec_seed,
        loss_history=history, wall_time_seconds=time.time() - started, artifact_path=str(path),
    )
    print(f"codec: {path} digest={bundle.digest.hex()} recon_mse={reconstruction_mse(images[:50], params):.6f}")
    return 0


def cmd_train_flow(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    bundle = _codec(out, cfg)
    records = read_corpus(out / cfg.paths_corpus)
    height, width = records[0].image.shape[:2]
    p = bundle.params.patch
    guidance_dim = bundle.params.n * (height // p) * (width // p)
    registry = _registry(out, cfg)
    started = time.time()

    if args.phase == "base":
        if args.C not in (None, 0):
            raise InvalidArgumentError("--C applies to the control phase only")
        dims = FlowDims.from_config(cfg, height, width, guidance_dim)
        params = init_flow_params(dims, PrngState(cfg.flow_seed))
        samples = build_flow_samples(records, bundle, 0)
        params, history = train(
            params, samples, "base", cfg.flow_steps, cfg.flow_seed,
            lr=cfg.flow_lr, weight_decay=cfg.flow_weight_decay, accumulation=cfg.flow_accumulation,
        )
        channel_count = 0
        path = save_flow(params, out / cfg.paths_flow_base, {"codec_digest": bundle.digest.hex(), "C": 0})
    else:
        if args.C is None or not 1 <= args.C <= bundle.params.n:
            raise InvalidArgumentError(f"--C must be in [1, {bundle.params.n}] for the control phase")
        base_path = out / cfg.paths_flow_base
        if not base_path.is_file():
            raise MissingArtifactError(f"base flow model not found: {base_path} (run train-flow --phase base first)")
        base, _ = load_flow(base_path)
        samples = build_flow_samples(records, bundle, args.C)
        params, history = train(
            base, samples, "control", cfg.flow_steps, cfg.flow_seed + args.C,
            lr=cfg.flow_lr, weight_decay=cfg.flow_weight_decay, accumulation=cfg.flow_accumulation,
        )
        channel_count = args.C
        path = save_flow(
            params, out / cfg.flow_control_name(args.C),
            {"codec_digest": bundle.digest.hex(), "C": args.C},
        )

    registry.register_flow(params, path, bundle.digest, channel_count)
    _record_run(
        registry, kind=f"flow_{args.phase}", channel_count=channel_count, steps=cfg.flow_steps,
        seed=cfg.flow_seed, loss_history=history, wall_time_seconds=time.time() - started,
        artifact_path=str(path),
    )
    final = f"{history[-1]:.6f}" if history else "n/a"
    print(f"flow ({args.phase}, C={channel_count}): {path} final_loss={final}")
    return 0


def cmd_encode(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    bundle = _codec(out, cfg)
    if args.input:
        if args.caption is None:
            raise InvalidArgumentError("--input requires --caption")
        image, caption = load_image_any(args.input), args.caption
    else:
        records = read_corpus(args.corpus or out / cfg.paths_heldout)
        if not 0 <= args.record < len(records):
            raise InvalidArgumentError(f"--record {args.record} outside [0, {len(records)})")
        image, caption = records[args.record].image, records[args.record].caption
    C = cfg.selection_c if args.C is None else args.C
    enc = encode_image(image, caption, bundle, C)
    target = Path(args.output or out / "stream.gsc")
    target.parent.mkdir(parents=True, exist_ok=True)
    target.write_bytes(enc.data)
    if args.export_channels and enc.selection.indices:
        export_channel_images(enc.latent, enc.selection.indices, target.parent / "channels")
        write_selection_csv(enc.selection, target.parent / "selection.csv")
    print(f"encoded {target}: C={enc.selection.C} channels={enc.selection.indices} "
          f"bits={enc.total_bits} bpp={enc.bpp:.6f}")
    return 0


def cmd_decode(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    stream_path = Path(args.stream)
    if not stream_path.is_file():
        raise MissingArtifactError(f"stream not found: {stream_path}")
    registry = _registry(out, cfg)
    rec = decode_stream(stream_path.read_bytes(), registry, _sampler(cfg))
    target = Path(args.output or out / "decoded.pgm")
    write_image(rec.image, target)
    write_sidecar(rec.image, target.with_suffix(".f64"))
    print(f"decoded {target}: caption={rec.caption!r} C={rec.header.C}")
    if args.reference:
        ref = to_grayscale(load_image_any(args.reference))
        diag = float(np.hypot(*ref.shape))
        v = v_distance(vision_analyze(ref, cfg.eval_threshold), vision_analyze(rec.image, cfg.eval_threshold), diag)
        print(f"psnr_db={psnr(ref, rec.image):.4f} v_distance={v:.6f}")
    return 0


def _channel_list(args, cfg: GscConfig) -> List[int]:
    if args.C_list:
        try:
            return sorted({int(tok) for tok in args.C_list.split(",") if tok.strip()})
        except ValueError as exc:
            raise InvalidArgumentError(f"--C-list must be comma-separated integers, got {args.C_list!r}") from exc
    return sorted({0, *cfg.selection_c_list})


def cmd_rd_sweep(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    bundle = _codec(out, cfg)
    registry = _registry(out, cfg)
    records = read_corpus(out / cfg.paths_heldout)[: args.limit or cfg.eval_limit]
    counts = _channel_list(args, cfg)
    rows = rd_sweep(records, bundle, registry, counts, _weights(cfg), _sampler(cfg), cfg.eval_threshold)
    path = write_sweep_csv(rows, out / "rd_sweep.csv")
    print(f"sweep: {len(records)} images x {len(counts)} channel counts -> {path}")
    if records:
        height, width = records[0].image.shape[:2]
        best, _ = best_channel_count(rows, _weights(cfg), width * height)
        print(f"best C={best} (alpha={cfg.selection_alpha}, beta={cfg.selection_beta})")
    if args.prompt_ablation:
        C = cfg.selection_c if cfg.selection_c in counts else counts[-1]
        ablation = prompt_ablation(
            records, bundle, registry, C, CAPTION_DETAILS, _sampler(cfg), threshold=cfg.eval_threshold,
        )
        ab_path = out / "prompt_ablation.csv"
        ab_path.write_text(
            "detail,bpp,v_distance\n"
            + "".join(f"{r.detail},{r.bpp:.10f},{r.v_distance:.10f}\n" for r in ablation),
            encoding="utf-8",
        )
        print(f"prompt ablation (C={C}) -> {ab_path}")
    return 0


def cmd_theory_report(args, cfg: GscConfig) -> int:
    out = _out_dir(args, cfg)
    bundle = _codec(out, cfg)
    registry = _registry(out, cfg)
    records = read_corpus(out / cfg.paths_heldout)[: args.limit or cfg.eval_limit]
    sampler = _sampler(cfg)
    mode = cfg.theory_importance
    rows = []
    for C in _channel_list(args, cfg):
        hx, hxh, bits = [], [], []
        for record in records:
            enc = encode_image(record.image, record.caption, bundle, C)
            rec = decode_stream(enc.data, registry, sampler)
            hx.append(image_entropy(record.image, mode))
            hxh.append(image_entropy(rec.image, mode))
            bits.append(enc.total_bits)
        rows.append((C, float(np.mean(hx)), float(np.mean(hxh)), float(np.mean(bits))))
    report = stationarity_report(
        rows, cfg.selection_alpha, cfg.selection_beta, cfg.theory_lambda, cfg.theory_rate_budget,
    )
    csv_path, text_path = write_theory_report(report, out / "theory_report.csv", out / "theory_report.txt")
    print(f"theory: argmin C={report.argmin_C} residual={report.residual:.6g} -> {csv_path}, {text_path}")
    return 0


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train-codec": cmd_train_codec,
    "train-flow": cmd_train_flow,
    "encode": cmd_encode,
    "decode": cmd_decode,
    "rd-sweep": cmd_rd_sweep,
    "theory-report": cmd_theory_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--out", help="output directory (default paths.out_dir)")

    parser = argparse.ArgumentParser(prog="gsc", description=__doc__.strip().splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="generate training and held-out corpora")
    sub.add_parser("train-codec", parents=[common], help="train the analysis codec and entropy model")

    flow = sub.add_parser("train-flow", parents=[common], help="train the base flow or a control branch")
    flow.add_argument("--phase", choices=["base", "control"], required=True)
    flow.add_argument("--C", type=int, help="channel count for the control phase")

    enc = sub.add_parser("encode", parents=[common], help="encode an image into a GSC1 stream")
    enc.add_argument("--corpus", help="corpus file (default: held-out corpus)")
    enc.add_argument("--record", type=int, default=0)
    enc.add_argument("--input", help="PGM/PPM image (or .f64 sidecar) instead of a corpus record")
    enc.add_argument("--caption", help="caption for --input")
    enc.add_argument("--C", type=int, help="channels to transmit (default selection.C)")
    enc.add_argument("--output", help="stream path (default <out>/stream.gsc)")
    enc.add_argument("--export-channels", action="store_true", help="write selected channel PNGs and selection.csv")

    dec = sub.add_parser("decode", parents=[common], help="decode a GSC1 stream")
    dec.add_argument("--stream", required=True)
    dec.add_argument("--output", help="image path (default <out>/decoded.pgm)")
    dec.add_argument("--reference", help="original image for metrics")

    for name, help_text in (("rd-sweep", "rate/analysis sweep over C"), ("theory-report", "stationarity report over C")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--C-list", dest="C_list", help="comma-separated channel counts (default 0 + selection.C_list)")
        p.add_argument("--limit", type=int, help="number of held-out images (default eval.limit)")
        if name == "rd-sweep":
            p.add_argument("--prompt-ablation", action="store_true", help="also compare caption detail levels")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    try:
        configure_logging()
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except GscError as e:
        logger.error(f"[{type(e).__name__}] {e.detail}")
        print(f"error: {e.detail}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
