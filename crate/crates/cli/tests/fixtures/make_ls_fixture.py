"""Regenerates ls_fixture.json: a tiny stack, a measurement and the dense
least-squares fit computed from an explicitly built system matrix."""
import json

import numpy as np

rng = np.random.default_rng(20261019)
nz, ny, nx = 2, 4, 4
py, px = 2 * ny, 2 * nx
cy, cx = py // 2, px // 2

psfs = rng.random((nz, ny, nx)).astype(np.float32)
psfs /= psfs.sum(axis=(1, 2), keepdims=True)
psfs = psfs.astype(np.float32)
b = rng.random((ny, nx)).astype(np.float32)

# Column (k, row, col): the slice shifted so that b[r, c] = h_k[r + row - cy, c + col - cx].
h = psfs.astype(np.float64)
cols = []
for k in range(nz):
    for row in range(py):
        for col in range(px):
            img = np.zeros((ny, nx))
            for r in range(ny):
                for c in range(nx):
                    sr, sc = r + row - cy, c + col - cx
                    if 0 <= sr < ny and 0 <= sc < nx:
                        img[r, c] = h[k, sr, sc]
            cols.append(img.ravel())
H = np.stack(cols, axis=1)
bb = b.astype(np.float64).ravel()
x, *_ = np.linalg.lstsq(H, bb, rcond=None)
fitted = H @ x

json.dump(
    {
        "shape": [nz, ny, nx],
        "depth_planes": [12.0, 20.0],
        "psfs": [float(v) for v in psfs.ravel()],
        "b": [float(v) for v in b.ravel()],
        "fitted": [float(v) for v in fitted],
        "residual_norm": float(np.linalg.norm(fitted - bb)),
        "rank": int(np.linalg.matrix_rank(H)),
    },
    open("ls_fixture.json", "w"),
    indent=1,
)
