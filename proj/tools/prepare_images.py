#!/usr/bin/env python3
"""Export the natural images bundled with scikit-image, matplotlib and
scikit-learn as 8-bit grayscale PGM files.

The cameraman image is written to <out>/test/ and never cropped into the
training set. Every other source is converted to grayscale and cut into
non-overlapping square crops (at most --per-source per image) written to <out>/train/. Crops whose standard
deviation is below a threshold (flat background) are skipped.
"""
import argparse
import os

import numpy as np
import skimage.data
import skimage.io
from skimage.color import rgb2gray, rgba2rgb


TRAIN_SOURCES = [
    "astronaut.png", "brick.png", "cell.png", "chelsea.png", "clock_motion.png",
    "coffee.png", "coins.png", "grass.png", "gravel.png", "hubble_deep_field.jpg",
    "ihc.png", "moon.png", "motorcycle_left.png", "page.png", "retina.jpg",
    "rocket.jpg", "text.png",
]


def to_gray_u8(img):
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = rgba2rgb(img)
        img = rgb2gray(img)
        return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return img.astype(np.uint8)


def write_pgm(path, img):
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def sources():
    base = os.path.dirname(skimage.data.__file__)
    for name in TRAIN_SOURCES:
        yield os.path.splitext(name)[0], skimage.io.imread(os.path.join(base, name))
    import matplotlib.cbook
    with matplotlib.cbook.get_sample_data("grace_hopper.jpg") as f:
        yield "grace_hopper", skimage.io.imread(f)
    from sklearn.datasets import load_sample_images
    for name, img in zip(("china", "flower"), load_sample_images().images):
        yield name, img


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data")
    ap.add_argument("--crop", type=int, default=128)
    ap.add_argument("--min-std", type=float, default=12.0)
    ap.add_argument("--per-source", type=int, default=5)
    args = ap.parse_args()

    os.makedirs(os.path.join(args.out, "train"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "test"), exist_ok=True)
    write_pgm(os.path.join(args.out, "test", "cameraman.pgm"), skimage.data.camera())

    count = 0
    for name, img in sources():
        gray = to_gray_u8(img)
        h, w = gray.shape
        c = args.crop
        crops = []
        for r in range(0, h - c + 1, c):
            for q in range(0, w - c + 1, c):
                crop = gray[r:r + c, q:q + c]
                if crop.std() >= args.min_std:
                    crops.append((r, q, crop))
        # spread the kept crops evenly over the source
        if len(crops) > args.per_source:
            keep = np.linspace(0, len(crops) - 1, args.per_source).round().astype(int)
            crops = [crops[i] for i in keep]
        for r, q, crop in crops:
            write_pgm(os.path.join(args.out, "train", f"{name}_{r:04d}_{q:04d}.pgm"), crop)
            count += 1
    print(f"wrote {count} training crops")


if __name__ == "__main__":
    main()
