"""Materialize the target script (and optionally the demo reply scripts).

Usage::

    python3 -m chartrain DEST_DIR [--with-fixtures]
"""

import argparse
from pathlib import Path

from . import FIXTURES, write_fixture, write_target


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="chartrain",
        description="write the training target into a directory",
    )
    parser.add_argument("dest", help="directory that receives train.py")
    parser.add_argument("--with-fixtures", action="store_true",
                        help="also write the canned reply scripts")
    args = parser.parse_args(argv)

    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    print(f"wrote {write_target(dest)}")
    if args.with_fixtures:
        for name in FIXTURES:
            print(f"wrote {write_fixture(name, dest)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
