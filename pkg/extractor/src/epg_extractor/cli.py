"""epg-extract: foundation-model embeddings out, epg embedding files in.

Exit codes mirror the primary CLI: 0 success, 1 usage, 2 unreadable or
invalid input, 3 computation/model failure.
"""

import argparse
import sys

from .backends import ModelUnavailableError
from .pipeline import MODES, ExtractRequest, extract


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="epg-extract", description=__doc__)
    p.add_argument("--mode", required=True, choices=MODES)
    p.add_argument("--input", action="append", default=[],
                   help="image path or text string; repeatable")
    p.add_argument("--input-file", help="file with one input per line")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab", help="VLAD vocabulary artifact (loc-descriptor)")
    p.add_argument("--pca", help="PCA transform artifact (loc-descriptor)")
    p.add_argument("--clip-model", help="override the CLIP checkpoint id")
    p.add_argument("--dino-model", help="override the DinoV2 checkpoint id")
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        inputs = list(args.input)
        if args.input_file:
            with open(args.input_file, "r", encoding="utf-8") as f:
                inputs += [line.rstrip("\n") for line in f if line.strip()]
        request = ExtractRequest(
            mode=args.mode,
            inputs=inputs,
            out_path=args.out,
            vocab_path=args.vocab,
            pca_path=args.pca,
        )
        clip = dino = None
        if args.clip_model:
            from .backends import ClipBackend

            clip = ClipBackend(args.clip_model)
        if args.dino_model:
            from .backends import DinoBackend

            dino = DinoBackend(args.dino_model)
        ids, matrix = extract(request, clip=clip, dino=dino)
        print(f"wrote {len(ids)} rows x {matrix.shape[1]} to {args.out}")
        return 0
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        # request validation problems are usage errors
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except (ModelUnavailableError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
