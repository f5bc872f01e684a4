"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or file-format error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .attention import AttentionConfig, compact_attention, pixelwise_attention
from .bench import BenchCase, run_sweep
from .encoder import EncoderConfig, encode, encode_batch, init_encoder, load_config, load_weights
from .refselect import AppearanceMap, EmbeddedFrame, build_map, landmarks_to_coord, read_landmarks_jsonl, select_references
from .tensor import CTF_MAGIC, read_tensor, write_tensor

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    return p


def _read(path) -> np.ndarray:
    return read_tensor(_require(path))


def _read_json(path):
    p = _require(path)
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: invalid JSON ({exc})") from None


def _parse_pair(text: str) -> tuple[float, float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected x,y but got {text!r}") from None
    return x, y


def cmd_encode(args) -> None:
    if args.config:
        cfg = EncoderConfig.from_dict(_read_json(args.config))
    elif args.weights_dir:
        cfg = load_config(_require(Path(args.weights_dir) / "encoder.json"))
    else:
        raise UsageError("encode needs --config or --weights-dir")
    if args.weights_dir:
        _require(args.weights_dir)
        cfg, weights = load_weights(args.weights_dir, cfg)
    else:
        seed = args.seed
        if seed is None:
            seed = int(_read_json(args.config).get("seed", 0))
        weights = init_encoder(cfg, seed)
    image = _read(args.input)
    if image.ndim == 4:
        out = encode_batch(weights, cfg, image)
    else:
        out = encode(weights, cfg, image)
    write_tensor(args.output, out)


def _attention_config(args) -> AttentionConfig:
    cfg = AttentionConfig.from_dict(_read_json(args.config)) if args.config else AttentionConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_attend(args) -> None:
    x_in, x_a, x_l = _read(args.xin), _read(args.xa), _read(args.xl)
    out = compact_attention(x_in, x_a, x_l, _attention_config(args))
    write_tensor(args.out_basis, out.x_basis)
    if args.dump_intermediates:
        d = Path(args.dump_intermediates)
        d.mkdir(parents=True, exist_ok=True)
        for name in ("b_l", "b_a", "a_b", "a_in"):
            write_tensor(d / f"{name}.ctf", getattr(out, name))


def cmd_baseline(args) -> None:
    x_in, x_a, x_l = _read(args.xin), _read(args.xa), _read(args.xl)
    write_tensor(args.out, pixelwise_attention(x_in, x_a, x_l))


def _frames_from_points(data) -> list[EmbeddedFrame]:
    if isinstance(data, dict):
        data = data["points"]
    return [EmbeddedFrame(int(fid), float(x), float(y)) for fid, x, y in data]


def _load_map(args) -> AppearanceMap:
    if getattr(args, "map", None):
        return AppearanceMap.from_dict(_read_json(args.map))
    if getattr(args, "points", None):
        return build_map(_frames_from_points(_read_json(args.points)))
    if args.landmarks:
        return build_map(read_landmarks_jsonl(_require(args.landmarks), args.mode))
    raise UsageError("need one of --map, --points or --landmarks")


def cmd_build_map(args) -> None:
    amap = _load_map(args)
    text = amap.to_json()
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)


def cmd_select_refs(args) -> None:
    if (args.query is None) == (args.query_landmarks is None):
        raise UsageError("give exactly one of --query or --query-landmarks")
    amap = _load_map(args)
    if args.query is not None:
        q = _parse_pair(args.query)
    else:
        rec = _read_json(args.query_landmarks)
        q = landmarks_to_coord(rec["points"] if isinstance(rec, dict) else rec, args.mode)
    for fid in select_references(amap, q, args.want):
        print(fid)


def _parse_sweep(text: str) -> list[int]:
    key, _, values = text.partition("=")
    if key != "m" or not values:
        raise UsageError(f"--sweep expects m=V1,V2,..., got {text!r}")
    try:
        return [int(v) for v in values.split(",")]
    except ValueError:
        raise UsageError(f"bad sweep values in {text!r}") from None


def cmd_bench(args) -> None:
    m_values = _parse_sweep(args.sweep)
    try:
        base = BenchCase(
            m=m_values[0], c=args.c, h=args.h, w=args.w, p=args.p, s=args.s,
            repeats=args.repeats, seed=42 if args.seed is None else args.seed,
        )
        if min(m_values) < 1:
            raise ValueError("m values must be positive")
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = run_sweep(base, m_values)
    text = result.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="compact-attention", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__} (tensor format {CTF_MAGIC.decode()})")
    parser.add_argument("--seed", type=int, default=None, help="override seeds from config files")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("encode", help="run a convolutional encoder on a CTF1 tensor")
    p.add_argument("--config")
    p.add_argument("--weights-dir")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("attend", help="compact basis attention")
    p.add_argument("--xin", required=True)
    p.add_argument("--xa", required=True)
    p.add_argument("--xl", required=True)
    p.add_argument("--config")
    p.add_argument("--out-basis", required=True)
    p.add_argument("--dump-intermediates", metavar="DIR")
    p.set_defaults(func=cmd_attend)

    p = sub.add_parser("baseline", help="pixel-wise attention")
    p.add_argument("--xin", required=True)
    p.add_argument("--xa", required=True)
    p.add_argument("--xl", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    for name, func in (("build-map", cmd_build_map), ("select-refs", cmd_select_refs)):
        p = sub.add_parser(name)
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--map", help="appearance map JSON")
        src.add_argument("--points", help="JSON list of [frame_id, x, y]")
        src.add_argument("--landmarks", help="JSON-lines landmark file")
        p.add_argument("--mode", choices=("face", "pose"), default="face")
        if name == "build-map":
            p.add_argument("--out")
        else:
            p.add_argument("--query", help="x,y")
            p.add_argument("--query-landmarks")
            p.add_argument("--want", type=int, default=3)
        p.set_defaults(func=func)

    p = sub.add_parser("bench", help="time compact vs pixel-wise attention over m")
    p.add_argument("--sweep", default="m=2,4,8,16")
    p.add_argument("--h", type=int, default=16)
    p.add_argument("--w", type=int, default=16)
    p.add_argument("--c", type=int, default=64)
    p.add_argument("--p", type=int, default=32)
    p.add_argument("--s", type=int, default=3)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "want", 3) < 3:
        parser.error("--want must be at least 3")
    try:
        args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (DataError, FileNotFoundError, ValueError, KeyError, TypeError) as exc:
        # FormatError, ShapeError and the geometry errors are ValueErrors
        if isinstance(exc, FileNotFoundError) and exc.filename:
            msg = f"no such file: {exc.filename}"
        else:
            msg = str(exc)
        print(f"compact-attention: error: {msg}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
