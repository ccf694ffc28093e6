#!/usr/bin/env python3
"""Fetch MovieLens 100K into data/ml-100k/ (u.data and u.item).

Tries the GroupLens archive first. When that host is unreachable it falls back
to the copy bundled inside the RecBole wheel on PyPI and rewrites it into the
original u.data / u.item layouts.
"""

import argparse
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


def from_grouplens(out_dir):
    with urllib.request.urlopen(GROUPLENS_URL, timeout=30) as resp:
        blob = resp.read()
    with zipfile.ZipFile(io.BytesIO(blob)) as zf:
        for name in ("u.data", "u.item"):
            data = zf.read("ml-100k/" + name)
            with open(os.path.join(out_dir, name), "wb") as f:
                f.write(data)


def from_recbole(out_dir):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
             "recbole==1.2.1", "-d", tmp],
            check=True)
        wheel = next(os.path.join(tmp, f) for f in os.listdir(tmp)
                     if f.endswith(".whl"))
        with zipfile.ZipFile(wheel) as zf:
            prefix = "recbole/dataset_example/ml-100k/"
            inter = zf.read(prefix + "ml-100k.inter").decode("latin-1")
            items = zf.read(prefix + "ml-100k.item").decode("latin-1")

    rows = inter.splitlines()[1:]
    with open(os.path.join(out_dir, "u.data"), "w", encoding="latin-1") as f:
        for row in rows:
            user, item, rating, ts = row.split("\t")
            f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")

    with open(os.path.join(out_dir, "u.item"), "w", encoding="latin-1") as f:
        for row in items.splitlines()[1:]:
            fields = row.split("\t")
            item, title, year = fields[0], fields[1], fields[2]
            tags = set(fields[3].split()) if len(fields) > 3 else set()
            flags = ["1" if g in tags else "0" for g in GENRES]
            if not any(flag == "1" for flag in flags):
                flags[0] = "1"
            date = f"01-Jan-{year}" if year.isdigit() else ""
            f.write("|".join([item, title, date, "", ""] + flags) + "\n")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=os.path.join(
        os.path.dirname(os.path.abspath(__file__)), "..", "data", "ml-100k"))
    args = parser.parse_args()
    out_dir = os.path.abspath(args.out)
    os.makedirs(out_dir, exist_ok=True)
    try:
        from_grouplens(out_dir)
        print("fetched from grouplens.org")
    except Exception as err:  # network or DNS failure
        print(f"grouplens.org unavailable ({err}); using the RecBole wheel")
        from_recbole(out_dir)
    print(f"wrote {out_dir}/u.data and {out_dir}/u.item")


if __name__ == "__main__":
    main()
