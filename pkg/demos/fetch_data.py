#!/usr/bin/env python
"""Download MovieLens 100k into data/ml-100k/u.data.

Tries the GroupLens archive first. If that host is unreachable, rebuilds
u.data from the copy of ml-100k bundled in the RecBole wheel on PyPI
(same ratings, different column layout).
"""
import argparse
import io
import subprocess
import sys
import tempfile
import urllib.request
import zipfile
from pathlib import Path

GROUPLENS = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
ROOT = Path(__file__).resolve().parents[1]


def from_grouplens(dest):
    with urllib.request.urlopen(GROUPLENS, timeout=30) as resp:
        z = zipfile.ZipFile(io.BytesIO(resp.read()))
    dest.write_bytes(z.read("ml-100k/u.data"))


def from_recbole_wheel(dest):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "-d", tmp, "recbole==1.2.1"],
                       check=True)
        wheel = next(Path(tmp).glob("recbole-*.whl"))
        raw = zipfile.ZipFile(wheel).read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
    # header is user_id:token item_id:token rating:float timestamp:float
    rows = [line.split("\t") for line in raw.splitlines()[1:] if line]
    dest.write_text("".join(f"{u}\t{i}\t{int(float(r))}\t{int(float(t))}\n" for u, i, r, t in rows))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dest", default=ROOT / "data" / "ml-100k" / "u.data", type=Path)
    args = p.parse_args()
    if args.dest.exists():
        print(f"{args.dest} already present")
        return
    args.dest.parent.mkdir(parents=True, exist_ok=True)
    try:
        from_grouplens(args.dest)
        print(f"downloaded {GROUPLENS}")
    except OSError as err:
        print(f"GroupLens unreachable ({err}); using the RecBole wheel")
        from_recbole_wheel(args.dest)
    n = sum(1 for _ in args.dest.open())
    print(f"wrote {args.dest} ({n} ratings)")


if __name__ == "__main__":
    main()
