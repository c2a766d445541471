"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]

Each kernel is run on identical inputs under both backends; outputs are
checked for equality before timings are reported.
"""

import argparse
import timeit

import numpy as np

from sketchbodynet import kernels
from sketchbodynet.bodymodel import make_mini_model, smpl_forward_np
from sketchbodynet.camera import CameraParams, project_np, to_pixels


def cases():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(8, 16, 32, 32))
    cols = kernels.im2col(x, 3, 1, 1)
    spec = make_mini_model()
    verts, _ = smpl_forward_np(spec, rng.uniform(-0.3, 0.3, spec.n_theta), np.zeros(spec.n_beta))
    pts = to_pixels(project_np(verts, CameraParams(0.9, 0.0, 0.0)), 224)
    return {
        "im2col 8x16x32x32 k3": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im 8x16x32x32 k3": lambda: kernels.col2im(cols, x.shape, 3, 1, 1),
        "im2col 8x16x32x32 k3 s2": lambda: kernels.im2col(x, 3, 2, 1),
        f"rasterize {spec.F} faces @224": lambda: kernels.rasterize(pts, spec.faces, 224),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    try:
        kernels.use_backend("compiled")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<28}{'python ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for name, fn in cases().items():
        timings, outputs = {}, {}
        for backend in ("python", "compiled"):
            kernels.use_backend(backend)
            outputs[backend] = fn()
            timings[backend] = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        if not np.array_equal(outputs["python"], outputs["compiled"]):
            raise SystemExit(f"{name}: backends disagree")
        py, c = timings["python"], timings["compiled"]
        print(f"{name:<28}{py:>12.3f}{c:>14.3f}{py / c:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
