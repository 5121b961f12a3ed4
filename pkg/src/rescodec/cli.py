"""Command-line interface: encode, decode, train, eval, inspect."""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import container as cont
from . import pipeline as pl
from .errors import CodecError
from .model import EntropyModel, ModelConfig, load_checkpoint
from .ppm import read_image, write_image

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_USAGE = 2
EXIT_IO = 3


def load_external_templates(path) -> dict[str, tuple[str, str]]:
    """key=value config: `<name>.encode = cmd {in} {out}` plus `.decode`."""
    enc: dict[str, str] = {}
    dec: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise CodecError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key.endswith(".encode"):
                enc[key[: -len(".encode")]] = value
            elif key.endswith(".decode"):
                dec[key[: -len(".decode")]] = value
            else:
                raise CodecError(f"{path}:{lineno}: key must end in .encode or .decode")
    names = set(enc) | set(dec)
    missing = [n for n in names if n not in enc or n not in dec]
    if missing:
        raise CodecError(f"incomplete external codec config for: {', '.join(sorted(missing))}")
    return {n: (enc[n], dec[n]) for n in names}


def _build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rescodec",
                                 description="Lossless image codec with a learned residual entropy model")
    sub = ap.add_subparsers(dest="command", required=True)

    enc = sub.add_parser("encode", help="compress a PPM/PGM image")
    enc.add_argument("-i", "--input", required=True)
    enc.add_argument("-o", "--output", required=True)
    enc.add_argument("-m", "--model", required=True, help="checkpoint path")
    enc.add_argument("--backend", default="qdown:2",
                     help="identity | qdown:{2,4,8} | external:<name>")
    enc.add_argument("--external-config", help="key=value command templates")
    enc.add_argument("--workers", type=int, default=None)
    enc.add_argument("--checksum", action="store_true",
                     help="embed an 8-byte whole-image checksum")

    dec = sub.add_parser("decode", help="reconstruct the original image")
    dec.add_argument("-i", "--input", required=True)
    dec.add_argument("-o", "--output", required=True)
    dec.add_argument("-m", "--model", required=True)
    dec.add_argument("--external-config")
    dec.add_argument("--workers", type=int, default=None)

    tr = sub.add_parser("train", help="train an entropy model on a corpus")
    tr.add_argument("--corpus", required=True, help="directory of PPM/PGM images")
    tr.add_argument("-o", "--output", required=True, help="checkpoint output path")
    tr.add_argument("--steps", type=int, default=200)
    tr.add_argument("--batch-size", type=int, default=32)
    tr.add_argument("--lr", type=float, default=1e-4)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--backend", default="qdown:2", help="data-generation backend(s), comma separated")
    tr.add_argument("--val-fraction", type=float, default=0.1)
    tr.add_argument("--patch-size", type=int, default=16)
    tr.add_argument("--width", type=int, default=128, help="model width d")
    tr.add_argument("--layers", type=int, default=4)
    tr.add_argument("--heads", type=int, default=4)
    tr.add_argument("--mixtures", type=int, default=5)
    tr.add_argument("--global-tokens", type=int, default=16)
    tr.add_argument("--checkpoint-every", type=int, default=0)

    ev = sub.add_parser("eval", help="bpsp table over a corpus")
    ev.add_argument("-m", "--model", required=True)
    ev.add_argument("--corpus", required=True)
    ev.add_argument("--backend", default="qdown:2")
    ev.add_argument("--external-config")
    ev.add_argument("--workers", type=int, default=None)
    ev.add_argument("--limit", type=int, default=None)

    ins = sub.add_parser("inspect", help="print container header and bpsp split")
    ins.add_argument("-i", "--input", required=True)
    return ap


def _cmd_encode(args) -> int:
    templates = load_external_templates(args.external_config) if args.external_config else None
    backend = pl.resolve_backend(args.backend, templates)
    model = EntropyModel.from_checkpoint(load_checkpoint(args.model))
    image = read_image(args.input)
    data = pl.encode(image, backend, model, workers=args.workers, checksum=args.checksum)
    pl.write_atomic(args.output, data)
    rep = pl.bpsp(data)
    print(f"{args.output}: {len(data)} bytes, {rep}")
    return EXIT_OK


def _cmd_decode(args) -> int:
    templates = load_external_templates(args.external_config) if args.external_config else None
    model = EntropyModel.from_checkpoint(load_checkpoint(args.model))
    with open(args.input, "rb") as fh:
        data = fh.read()
    image = pl.decode(data, model, backends=templates, workers=args.workers)
    write_image(args.output, image)
    print(f"{args.output}: {image.shape[1]}x{image.shape[0]}x{image.shape[2]}")
    return EXIT_OK


def _cmd_train(args) -> int:
    from .trainer import PatchDataset, TrainConfig, train

    tcfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, steps=args.steps,
                       seed=args.seed, backend=args.backend, patch_size=args.patch_size,
                       val_fraction=args.val_fraction, checkpoint_every=args.checkpoint_every)
    dataset = PatchDataset(args.corpus, args.backend, args.patch_size,
                           seed=args.seed, val_fraction=args.val_fraction)
    mcfg = ModelConfig(d=args.width, layers=args.layers, heads=args.heads,
                       mixtures=args.mixtures, patch_size=args.patch_size,
                       global_tokens=args.global_tokens, channels=dataset.channels)
    report = train(tcfg, dataset, args.output, mcfg)
    for line in report.log_lines:
        print(line)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .trainer import evaluate

    templates = load_external_templates(args.external_config) if args.external_config else None
    backend = pl.resolve_backend(args.backend, templates)
    report = evaluate(args.model, args.corpus, backend, workers=args.workers, limit=args.limit)
    print(report)
    return EXIT_OK


def _cmd_inspect(args) -> int:
    with open(args.input, "rb") as fh:
        data = fh.read()
    c = cont.parse(data)
    rep = cont.bpsp_report(data, c)
    print(f"container version {c.version}, flags 0x{c.flags:02x}")
    print(f"image {c.width}x{c.height}x{c.channels}, patch size {c.patch_size}, "
          f"mixtures {c.mixtures}")
    print(f"checkpoint hash {c.checkpoint_hash.hex()}")
    if c.image_checksum is not None:
        print(f"image checksum {c.image_checksum.hex()}")
    print(f"lossy backend {c.backend_id}, payload {len(c.payload)} bytes")
    print(f"{c.patch_count} residual streams, {rep.residual_bytes} bytes")
    print(rep)
    return EXIT_OK


_COMMANDS = {
    "encode": _cmd_encode,
    "decode": _cmd_decode,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "inspect": _cmd_inspect,
}


def run(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except CodecError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DOMAIN
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
