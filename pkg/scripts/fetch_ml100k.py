"""Fetch MovieLens-100K into data/ml-100k/u.data.

Tries the GroupLens archive first. If that host is unreachable, falls back
to the copy of the same 100,000 ratings bundled in the ``recbole`` wheel on
PyPI (``recbole/dataset_example/ml-100k/ml-100k.inter``), rewriting it into
the tab-separated ``user item rating timestamp`` layout of u.data.
"""

from __future__ import annotations

import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
WHEEL_MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def from_grouplens(timeout: float) -> bytes:
    with urllib.request.urlopen(GROUPLENS, timeout=timeout) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    return archive.read("ml-100k/u.data")


def from_recbole_wheel() -> bytes:
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "recbole==1.2.1", "--no-deps",
                        "--only-binary", ":all:", "-d", tmp, "-q"], check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        text = zipfile.ZipFile(wheel).read(WHEEL_MEMBER).decode("utf-8")
    lines = text.splitlines()[1:]  # drop the typed header row
    out = []
    for line in lines:
        user, item, rating, stamp = line.split("\t")
        out.append(f"{user}\t{item}\t{int(float(rating))}\t{int(float(stamp))}")
    return ("\n".join(out) + "\n").encode()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="data/ml-100k/u.data")
    parser.add_argument("--timeout", type=float, default=20.0)
    args = parser.parse_args(argv)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    try:
        payload = from_grouplens(args.timeout)
        source = "grouplens"
    except OSError as exc:
        print(f"grouplens unavailable ({exc}); using the recbole wheel", file=sys.stderr)
        payload = from_recbole_wheel()
        source = "recbole wheel"
    rows = payload.count(b"\n")
    if rows != 100_000:
        print(f"unexpected row count {rows}", file=sys.stderr)
        return 1
    out.write_bytes(payload)
    print(f"wrote {rows} ratings from {source} to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
