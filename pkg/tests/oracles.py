"""Brute-force reference implementations shared by the test modules."""

import numpy as np


def naive_average(img, include_center=False):
    h, w = img.shape
    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            vals = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dy == 0 and dx == 0 and not include_center:
                        continue
                    yy = min(max(y + dy, 0), h - 1)
                    xx = min(max(x + dx, 0), w - 1)
                    vals.append(img[yy, xx])
            out[y, x] = sum(vals) / len(vals)
    return out


def naive_compensate(img, n=2.0):
    h, w = img.shape
    out = np.zeros((h, w))
    for x in range(w):
        for z in range(h):
            tail = 0.0
            for k in range(z, h):
                tail += img[k, x] ** n
            out[z, x] = min(img[z, x] ** n / max(2.0 * tail, 1e-12), 1.0)
    return out


def naive_clahe(img, clip, tiles):
    """Per-pixel CLAHE with OpenCV conventions.

    Tiles whose size does not divide the image use reflect padding, the
    clipped excess is spread evenly with the remainder stepped across the
    bins, and each pixel blends the maps of the four nearest tile centres.
    """
    q = [[int(np.floor(v * 255 + 0.5)) for v in row] for row in img]
    h, w = len(q), len(q[0])
    rows, cols = min(tiles[0], h), min(tiles[1], w)
    th, tw = -(-h // rows), -(-w // cols)

    def at(y, x):
        # reflect without repeating the edge (numpy "reflect")
        if y >= h:
            y = 2 * (h - 1) - y
        if x >= w:
            x = 2 * (w - 1) - x
        return q[y][x]

    area = th * tw
    limit = max(int(clip * area / 256), 1)
    luts = {}
    for r in range(rows):
        for c in range(cols):
            hist = [0] * 256
            for y in range(r * th, (r + 1) * th):
                for x in range(c * tw, (c + 1) * tw):
                    hist[at(y, x)] += 1
            excess = 0
            for i in range(256):
                if hist[i] > limit:
                    excess += hist[i] - limit
                    hist[i] = limit
            for i in range(256):
                hist[i] += excess // 256
            residual = excess % 256
            if residual:
                step = max(256 // residual, 1)
                i = 0
                while i < 256 and residual:
                    hist[i] += 1
                    residual -= 1
                    i += step
            lut, acc = [], 0
            for i in range(256):
                acc += hist[i]
                lut.append(min(max(round(acc * 255 / area), 0), 255))
            luts[r, c] = lut

    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            fy, fx = y / th - 0.5, x / tw - 0.5
            r1, c1 = int(np.floor(fy)), int(np.floor(fx))
            ay, ax = fy - r1, fx - c1
            r2, c2 = min(r1 + 1, rows - 1), min(c1 + 1, cols - 1)
            r1, c1 = max(r1, 0), max(c1, 0)
            v = q[y][x]
            top = luts[r1, c1][v] * (1 - ax) + luts[r1, c2][v] * ax
            bot = luts[r2, c1][v] * (1 - ax) + luts[r2, c2][v] * ax
            out[y, x] = (top * (1 - ay) + bot * ay) / 255
    return out
