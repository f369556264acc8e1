#!/usr/bin/env python3
"""Fetch MovieLens-100k into data/ml-100k/ as ratings.tsv and genres.txt.

Tries the GroupLens archive first, then falls back to the copy bundled with
the `recbole` wheel on PyPI.
"""
import argparse
import glob
import io
import os
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

GROUPLENS_URL = "https://files.grouplens.org/datasets/movielens/ml-100k.zip"
GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]


def from_grouplens():
    with urllib.request.urlopen(GROUPLENS_URL, timeout=20) as resp:
        archive = zipfile.ZipFile(io.BytesIO(resp.read()))
    ratings = []
    for line in archive.read("ml-100k/u.data").decode().splitlines():
        user, item, rating, ts = line.split("\t")
        ratings.append((user, item, rating, ts))
    genres = []
    for line in archive.read("ml-100k/u.item").decode("latin-1").splitlines():
        fields = line.split("|")
        flags = fields[5:]
        names = [GENRES[k] for k, f in enumerate(flags) if f == "1"]
        genres.append((fields[0], names))
    return ratings, genres


def from_recbole():
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "recbole==1.2.1", "-d", tmp],
            check=True,
        )
        wheel = zipfile.ZipFile(glob.glob(os.path.join(tmp, "recbole-*.whl"))[0])
        inter = wheel.read("recbole/dataset_example/ml-100k/ml-100k.inter").decode()
        items = wheel.read("recbole/dataset_example/ml-100k/ml-100k.item").decode("latin-1")
    ratings = []
    for line in inter.splitlines()[1:]:
        user, item, rating, ts = line.split("\t")
        ratings.append((user, item, rating, ts))
    genres = []
    for line in items.splitlines()[1:]:
        fields = line.split("\t")
        names = fields[3].split() if len(fields) > 3 else []
        genres.append((fields[0], names))
    return ratings, genres


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default=os.path.join(
        os.path.dirname(os.path.abspath(__file__)), "..", "data", "ml-100k"))
    args = parser.parse_args()
    try:
        ratings, genres = from_grouplens()
    except Exception as err:  # noqa: BLE001
        print(f"grouplens download failed ({err}); using recbole wheel", file=sys.stderr)
        ratings, genres = from_recbole()
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "ratings.tsv"), "w") as f:
        for row in ratings:
            f.write("\t".join(row) + "\n")
    with open(os.path.join(args.out, "genres.txt"), "w") as f:
        for item, names in genres:
            if names:
                f.write(f"{item}|{','.join(names)}\n")
    print(f"wrote {len(ratings)} ratings and {len(genres)} items to {args.out}")


if __name__ == "__main__":
    main()
