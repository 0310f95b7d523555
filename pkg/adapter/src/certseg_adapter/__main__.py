import argparse
import sys

from . import build_model, serve


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="certseg-adapter",
        description="Reference stdio adapter for the certseg bridge protocol.",
    )
    parser.add_argument(
        "--model", default="identity",
        help="identity | blur[:RADIUS] | threshold:T1[,T2,...]",
    )
    parser.add_argument(
        "--classes", type=int, default=None,
        help="num_classes declared in the handshake (threshold models derive it)",
    )
    parser.add_argument(
        "--fault", choices=["truncate"], default=None,
        help="fault injection for conformance tests: truncate the first response",
    )
    args = parser.parse_args(argv)

    try:
        model = build_model(args.model)
    except ValueError as exc:
        print(f"certseg-adapter: {exc}", file=sys.stderr)
        return 2
    num_classes = getattr(model, "num_classes", None) or args.classes or 2
    if args.classes is not None and num_classes != args.classes:
        print(
            f"certseg-adapter: model implies {num_classes} classes, --classes says {args.classes}",
            file=sys.stderr,
        )
        return 2
    return serve(model, num_classes, sys.stdin.buffer, sys.stdout.buffer, fault=args.fault)


if __name__ == "__main__":
    sys.exit(main())
