"""``mivec`` command line: encode, decode, eval, ablate, synth.

Exit codes: 0 success, 2 usage or configuration error, 3 corrupt container,
4 dimension mismatch in eval, 1 any other pipeline failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .bitstream.codec import CodecConfig, decode_views, encode_sequence
from .bitstream.container import BitstreamContainer, decode_cameras
from .errors import ConfigurationError, CorruptStreamError, LoadError, MivecError, ValidationError
from .explicit2d import BACKENDS, ExplicitCodecConfig
from .seqdata import (
    FRAME_FILE,
    MultiViewSequence,
    _read_png,
    from_bytes,
    generate_synthetic,
    load_sequence,
    save_frames,
)
from .training import TrainConfig

logger = logging.getLogger("mivec")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_MISMATCH = 4

# (grid channels, explicit QP) pairs swept from low to high rate
RD_SCHEDULE = ((20, 43), (30, 38), (40, 33), (60, 28), (80, 23))

_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "adam_beta1": float,
    "adam_beta2": float,
    "alpha": float,
    "seed": int,
    "qat_epochs": int,
    "prune_fraction": float,
}


class DimensionMismatch(MivecError):
    pass


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def read_train_ini(path) -> dict:
    """``[train]`` keys mirror TrainConfig; ``[model]`` may set grid_c / grid_h / grid_w / factors."""
    parser = configparser.ConfigParser()
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}", stage="config") from exc
    out = {}
    try:
        if parser.has_section("train"):
            for key, value in parser.items("train"):
                if key not in _TRAIN_KEYS:
                    raise ConfigurationError(f"unknown [train] key {key!r}", stage="config")
                out[key] = _TRAIN_KEYS[key](value)
        if parser.has_section("model"):
            for key, value in parser.items("model"):
                if key in ("grid_c", "grid_h", "grid_w"):
                    out[key] = int(value)
                elif key == "factors":
                    out[key] = _int_list(value)
                else:
                    raise ConfigurationError(f"unknown [model] key {key!r}", stage="config")
    except ValueError as exc:
        raise ConfigurationError(f"bad value in {path}: {exc}", stage="config") from exc
    return out


def _seed_fallback() -> int:
    raw = os.environ.get("MIVEC_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigurationError(f"MIVEC_SEED must be an integer, got {raw!r}", stage="config") from exc


def codec_config_from_args(args, grid_c: int | None = None, qp: int | None = None) -> CodecConfig:
    ini = read_train_ini(args.config) if args.config else {}

    def pick(name, default):
        value = getattr(args, name, None)
        if value is not None:
            return value
        return ini.get(name, default)

    train_kw = {k: pick(k, getattr(TrainConfig, k)) for k in _TRAIN_KEYS if k != "seed"}
    train_kw["seed"] = pick("seed", None)
    if train_kw["seed"] is None:
        train_kw["seed"] = _seed_fallback()
    train = TrainConfig(**train_kw)

    explicit = ExplicitCodecConfig(
        backend=args.explicit_backend,
        qp=args.qp if qp is None else qp,
        external_command_template=args.external_cmd,
        external_decode_template=args.external_decode_cmd,
    )
    return CodecConfig(
        grid_c=pick("grid_c", 24) if grid_c is None else grid_c,
        factors=tuple(pick("factors", (5, 3, 2, 2, 2))),
        grid_h=pick("grid_h", None),
        grid_w=pick("grid_w", None),
        grid_fea_t=not getattr(args, "no_grid_fea_t", False),
        grid_fea_v=not getattr(args, "no_grid_fea_v", False),
        grid_emb=not getattr(args, "no_grid_emb", False),
        ivc=not getattr(args, "no_ivc", False),
        explicit=explicit,
        train=train,
        basic_view=args.basic_view,
        entropy=not args.no_entropy,
    )


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _encode_one(seq: MultiViewSequence, cfg: CodecConfig, output: Path, report_path: Path):
    container, report = encode_sequence(seq, cfg)
    output.parent.mkdir(parents=True, exist_ok=True)
    output.write_bytes(container.to_bytes())
    payload = report.to_dict()
    payload.update(grid_c=cfg.grid_c, qp=cfg.explicit.qp, container=str(output))
    _write_json(report_path, payload)
    print(f"{output}: {report.total_bits} bits, {report.bpp:.4f} bpp, "
          f"mean PSNR {report.mean_psnr:.3f} dB, mean SSIM {report.mean_ssim:.5f}")
    return report


def cmd_encode(args) -> int:
    seq = load_sequence(args.input)
    output = Path(args.output)
    if not args.rd_sweep:
        cfg = codec_config_from_args(args)
        report_path = Path(args.report) if args.report else output.with_suffix(".json")
        _encode_one(seq, cfg, output, report_path)
        return EXIT_OK

    points = []
    for c, qp in RD_SCHEDULE:
        cfg = codec_config_from_args(args, grid_c=c, qp=qp)
        stem = output.with_suffix("")
        target = stem.parent / f"{stem.name}_c{c}_qp{qp}.mvb"
        report = _encode_one(seq, cfg, target, target.with_suffix(".json"))
        points.append(metrics.RDPoint(report.bpp, report.mean_psnr, report.mean_ssim, f"c{c}_qp{qp}"))
    csv_path = Path(args.report) if args.report else output.with_suffix(".csv")
    metrics.write_rd_csv(csv_path, points)
    print(f"RD points written to {csv_path}")
    return EXIT_OK


def cmd_decode(args) -> int:
    try:
        data = Path(args.input).read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {args.input}: {exc}", stage="decode") from exc
    container = BitstreamContainer.from_bytes(data)
    explicit = None
    if args.external_decode_cmd:
        explicit = ExplicitCodecConfig("external", container.qp, args.external_decode_cmd, args.external_decode_cmd)
    views = decode_views(container, args.views, explicit)
    cameras = decode_cameras(container.metadata)
    frames = np.zeros((container.num_views, container.num_frames, container.height, container.width, 3), np.float32)
    for j, rec in views.items():
        frames[j] = rec
    save_frames(MultiViewSequence(frames, cameras), args.output, views=sorted(views))
    print(f"decoded views {sorted(views)} to {args.output}")
    return EXIT_OK


def _load_views(root: Path) -> dict[int, np.ndarray]:
    """Whatever ``v{j:02d}`` directories exist under ``root``, as {j: (T, H, W, 3)}."""
    out = {}
    for vdir in sorted(root.glob("v[0-9]*")):
        if not (vdir.is_dir() and vdir.name[1:].isdigit()):
            continue
        imgs = []
        while (vdir / FRAME_FILE.format(t=len(imgs))).is_file():
            imgs.append(_read_png(vdir / FRAME_FILE.format(t=len(imgs))))
        if not imgs:
            continue
        if len({im.shape for im in imgs}) != 1:
            raise DimensionMismatch(f"inconsistent frame sizes in {vdir}", stage="eval")
        out[int(vdir.name[1:])] = from_bytes(np.stack(imgs))
    return out


def cmd_eval(args) -> int:
    if bool(args.anchor_csv) != bool(args.test_csv):
        raise ConfigurationError("--anchor-csv and --test-csv go together", stage="eval")
    if not (args.ref and args.rec) and not args.anchor_csv:
        raise ConfigurationError("give --ref/--rec, or --anchor-csv/--test-csv", stage="eval")
    if bool(args.ref) != bool(args.rec):
        raise ConfigurationError("--ref and --rec go together", stage="eval")

    result = {}
    if args.ref:
        ref = _load_views(Path(args.ref))
        rec = _load_views(Path(args.rec))
        if not rec:
            raise LoadError(f"no decoded views under {args.rec}", stage="eval")
        per_view = {}
        for j in sorted(rec):
            if j not in ref:
                raise DimensionMismatch(f"view {j} missing from reference", stage="eval")
            if ref[j].shape != rec[j].shape:
                raise DimensionMismatch(
                    f"view {j}: reference {ref[j].shape} vs reconstruction {rec[j].shape}", stage="eval"
                )
            p = float(np.mean([metrics.psnr(a, b) for a, b in zip(ref[j], rec[j])]))
            s = float(np.mean([metrics.ssim(a, b) for a, b in zip(ref[j], rec[j])]))
            per_view[str(j)] = {"psnr": p, "ssim": s}
            print(f"view {j}: PSNR {p:.4f} dB  SSIM {s:.6f}")
        mean_p = float(np.mean([v["psnr"] for v in per_view.values()]))
        mean_s = float(np.mean([v["ssim"] for v in per_view.values()]))
        print(f"mean:   PSNR {mean_p:.4f} dB  SSIM {mean_s:.6f}")
        result.update(views=per_view, mean_psnr=mean_p, mean_ssim=mean_s)

    if args.anchor_csv:
        anchor = metrics.read_rd_csv(args.anchor_csv)
        test = metrics.read_rd_csv(args.test_csv)
        bd_p = metrics.bd_rate(anchor, test, "psnr").bd_rate_percent
        bd_s = metrics.bd_rate(anchor, test, "ssim").bd_rate_percent
        print(f"BD-rate (PSNR): {bd_p:+.3f}%")
        print(f"BD-rate (SSIM): {bd_s:+.3f}%")
        result.update(bd_rate_psnr=bd_p, bd_rate_ssim=bd_s)
        if args.plot:
            metrics.plot_rd({"anchor": anchor, "test": test}, args.plot)
            print(f"RD plot written to {args.plot}")
    if args.json:
        _write_json(Path(args.json), result)
    return EXIT_OK


def cmd_synth(args) -> int:
    seq = generate_synthetic(args.views, args.frames, args.height, args.width, args.disparity, args.seed)
    save_frames(seq, args.output)
    print(f"wrote {seq.num_views} views x {seq.num_frames} frames of {seq.height}x{seq.width} to {args.output}")
    return EXIT_OK


def _add_encode_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", required=True, help="sequence root (v00/f0000.png ..., cameras.json)")
    p.add_argument("--output", required=True, help="output .mvb path")
    p.add_argument("--report", help="JSON report path (CSV with --rd-sweep); defaults next to --output")
    p.add_argument("--qp", type=int, default=22)
    p.add_argument("--grid-c", type=int, default=None)
    p.add_argument("--grid-h", type=int, default=None)
    p.add_argument("--grid-w", type=int, default=None)
    p.add_argument("--factors", type=_int_list, default=None, help="upscale factors, e.g. 5,3,2,2,2")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--qat-epochs", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--prune-fraction", type=float, default=None)
    p.add_argument("--seed", type=int, default=None, help="falls back to $MIVEC_SEED, then 0")
    p.add_argument("--basic-view", type=int, default=None)
    p.add_argument("--explicit-backend", choices=BACKENDS, default="builtin_dct")
    p.add_argument("--external-cmd", help="encoder template with {input} {output} {qp}")
    p.add_argument("--external-decode-cmd", help="decoder template with {input} {output} {qp}")
    p.add_argument("--no-entropy", action="store_true", help="fixed-length 8-bit levels instead of Huffman")
    p.add_argument("--config", help="INI file with [train] and [model] sections")
    p.add_argument("--rd-sweep", action="store_true", help="encode every (c, QP) pair of the RD schedule")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mivec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="code a multi-view sequence into an .mvb container")
    _add_encode_args(enc)
    enc.set_defaults(func=cmd_encode)

    abl = sub.add_parser("ablate", help="encode with components switched off")
    _add_encode_args(abl)
    abl.add_argument("--no-grid-fea-t", action="store_true")
    abl.add_argument("--no-grid-fea-v", action="store_true")
    abl.add_argument("--no-grid-emb", action="store_true")
    abl.add_argument("--no-ivc", action="store_true")
    abl.set_defaults(func=cmd_encode)

    dec = sub.add_parser("decode", help="reconstruct PNG frames from an .mvb container")
    dec.add_argument("--input", required=True)
    dec.add_argument("--output", required=True)
    dec.add_argument("--views", type=_int_list, default=None, help="subset, e.g. 2,3")
    dec.add_argument("--external-decode-cmd", help="needed when the basic view used an external codec")
    dec.set_defaults(func=cmd_decode)

    ev = sub.add_parser("eval", help="PSNR/SSIM between frame trees, BD-rate between RD CSVs")
    ev.add_argument("--ref")
    ev.add_argument("--rec")
    ev.add_argument("--anchor-csv")
    ev.add_argument("--test-csv")
    ev.add_argument("--plot", help="RD plot path, e.g. rd.svg")
    ev.add_argument("--json", help="also write results as JSON")
    ev.set_defaults(func=cmd_eval)

    syn = sub.add_parser("synth", help="write a synthetic translated multi-view sequence")
    syn.add_argument("--output", required=True)
    syn.add_argument("--views", type=int, default=4)
    syn.add_argument("--frames", type=int, default=8)
    syn.add_argument("--height", type=int, default=80)
    syn.add_argument("--width", type=int, default=80)
    syn.add_argument("--disparity", type=float, default=2.0)
    syn.add_argument("--seed", type=int, default=7)
    syn.set_defaults(func=cmd_synth)
    return parser


def exit_code_for(exc: MivecError) -> int:
    if isinstance(exc, CorruptStreamError):
        return EXIT_CORRUPT
    if isinstance(exc, DimensionMismatch):
        return EXIT_MISMATCH
    if isinstance(exc, (ConfigurationError, ValidationError)):
        return EXIT_USAGE
    return EXIT_FAILURE


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except MivecError as exc:
        print(f"mivec: error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
