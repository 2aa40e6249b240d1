"""Rebuild the MovieLens-100K files (u.data, u.user, u.item) from a PyPI mirror.

GroupLens is not always reachable, but the RecBole 1.0.0 source
distribution on PyPI ships the full ML-100K ratings and metadata in its
"atomic" tab-separated format. This script downloads that sdist with pip
and rewrites the three files in the original GroupLens layout.

    python scripts/fetch_ml100k.py data/ml-100k
"""
import subprocess
import sys
import tarfile
import tempfile
from pathlib import Path

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole-1.0.0/recbole/dataset_example/ml-100k/"


def _rows(text):
    lines = text.splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def convert(src: dict, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "u.data", "w") as f:
        for user, item, rating, ts in _rows(src["inter"]):
            f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")
    with open(out / "u.user", "w") as f:
        for user, age, gender, occupation, zipcode in _rows(src["user"]):
            f.write(f"{user}|{age}|{gender}|{occupation}|{zipcode}\n")
    with open(out / "u.item", "w", encoding="latin-1") as f:
        for row in _rows(src["item"]):
            row += [""] * (4 - len(row))
            item, title, year, classes = row[:4]
            date = f"01-Jan-{year}" if year.strip().isdigit() else ""
            tokens = set(classes.split())
            flags = "|".join("1" if g in tokens else "0" for g in GENRES)
            f.write(f"{item}|{title}|{date}|||{flags}\n")


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    out = Path(argv[0] if argv else "data/ml-100k")
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--no-deps", "--no-binary", ":all:",
             "recbole==1.0.0", "-d", tmp],
            check=True,
        )
        sdist = next(Path(tmp).glob("recbole-1.0.0.tar.gz"))
        src = {}
        with tarfile.open(sdist) as tar:
            for part in ("inter", "user", "item"):
                member = tar.extractfile(PREFIX + f"ml-100k.{part}")
                src[part] = member.read().decode("latin-1")
    convert(src, out)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
