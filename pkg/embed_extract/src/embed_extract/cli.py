"""CLI: embed-extract --in docs.jsonl --encoder NAME --pool mean|cls --out corpus.pue"""

from __future__ import annotations

import argparse
import json
import sys

from .extract import DEFAULT_ENCODER, EncoderError, ExtractError, extract


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="embed-extract",
        description="Embed title/abstract JSON-lines into a PUE1 corpus file "
        "with a pretrained text encoder.",
    )
    parser.add_argument("--in", dest="input", required=True, help="input JSON-lines")
    parser.add_argument("--encoder", default=DEFAULT_ENCODER,
                        help="model name or local path")
    parser.add_argument("--pool", choices=["mean", "cls"], default="mean")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--max-length", type=int, default=512)
    parser.add_argument("--out", required=True, help="output PUE1 file")
    parser.add_argument("--tokens", default=None, help="optional tokens JSONL output")
    parser.add_argument("--lenient", action="store_true",
                        help="skip malformed records (with a warning) instead of failing")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        from .extract import Encoder

        encoder = Encoder(args.encoder, pooling=args.pool, max_length=args.max_length)
        summary = extract(
            args.input,
            args.out,
            encoder=encoder,
            batch_size=args.batch_size,
            tokens_path=args.tokens,
            lenient=args.lenient,
        )
    except ExtractError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (EncoderError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
