#!/usr/bin/env python3
"""Fetch MNIST / Fashion-MNIST into the dataset cache as uncompressed IDX files.

Layout written under $CMSSL_DATA_ROOT (default ./data):
    mnist/train-images-idx3-ubyte, mnist/train-labels-idx1-ubyte, ...
    fashion-mnist/...

The canonical mirrors are tried first. If none is reachable and the source is
MNIST, the 5,000-image subset bundled in the `mlxtend` wheel is converted
instead (500 images per digit), which is enough for the desk presets.
"""
import argparse
import gzip
import io
import os
import struct
import subprocess
import sys
import tempfile
import urllib.request
import zipfile

FILES = ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
         "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]

MIRRORS = {
    "mnist": ["https://ossci-datasets.s3.amazonaws.com/mnist/",
              "https://storage.googleapis.com/cvdf-datasets/mnist/"],
    "fashion-mnist": ["http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/"],
}


def try_mirrors(name, dest):
    for base in MIRRORS[name]:
        try:
            blobs = {}
            for f in FILES:
                with urllib.request.urlopen(base + f + ".gz", timeout=15) as r:
                    blobs[f] = gzip.decompress(r.read())
            for f, b in blobs.items():
                with open(os.path.join(dest, f), "wb") as out:
                    out.write(b)
            print(f"{name}: fetched from {base}")
            return True
        except Exception as e:  # noqa: BLE001
            print(f"{name}: mirror {base} unavailable ({e})", file=sys.stderr)
    return False


def write_idx(dest, prefix, images, labels):
    with open(os.path.join(dest, prefix + "-images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))
    with open(os.path.join(dest, prefix + "-labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def mlxtend_fallback(dest):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps",
                        "--quiet", "mlxtend", "-d", tmp], check=True)
        wheel = next(p for p in os.listdir(tmp) if p.endswith(".whl"))
        with zipfile.ZipFile(os.path.join(tmp, wheel)) as z:
            raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    images, labels = [], []
    for line in io.StringIO(raw.decode()):
        vals = [int(float(v)) for v in line.strip().split(",")]
        images.append(vals[:-1])
        labels.append(vals[-1])
    write_idx(dest, "train", images, labels)
    print(f"mnist: wrote {len(images)}-image subset from the mlxtend wheel")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("datasets", nargs="*", default=["mnist"],
                    choices=sorted(MIRRORS))
    ap.add_argument("--root", default=os.environ.get("CMSSL_DATA_ROOT", "data"))
    ap.add_argument("--offline-subset", action="store_true",
                    help="skip the mirrors and use the bundled MNIST subset")
    args = ap.parse_args()
    ok = True
    for name in args.datasets:
        dest = os.path.join(args.root, name)
        os.makedirs(dest, exist_ok=True)
        if not args.offline_subset and try_mirrors(name, dest):
            continue
        if name == "mnist":
            mlxtend_fallback(dest)
        else:
            print(f"{name}: no source reachable; place the IDX files in {dest}",
                  file=sys.stderr)
            ok = False
    return 0 if ok else 2


if __name__ == "__main__":
    sys.exit(main())
