"""Convert an SVHN cropped-digits .mat file into the crmn raw container.

    python scripts/svhn_to_raw.py train_32x32.mat svhn_train.raw

SVHN stores digit 0 as label 10; it is written as class 0.
"""

import struct
import sys

import numpy as np
from scipy.io import loadmat


def main(src, dst):
    mat = loadmat(src)
    x = mat["X"]  # (32, 32, 3, N)
    y = mat["y"].reshape(-1).astype(np.uint8) % 10
    pixels = np.ascontiguousarray(x.transpose(3, 2, 0, 1), dtype=np.uint8)
    n, c, h, w = pixels.shape
    header = b"CRMNRAW1" + struct.pack("<IIII", n, c, h, w) + bytes([1, 0, 0, 0]) + struct.pack("<I", 10)
    with open(dst, "wb") as f:
        f.write(header)
        f.write(y.tobytes())
        f.write(pixels.tobytes())
    print(f"{n} images, {c}x{h}x{w}, written to {dst}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        sys.exit("usage: svhn_to_raw.py <input.mat> <output.raw>")
    main(sys.argv[1], sys.argv[2])
