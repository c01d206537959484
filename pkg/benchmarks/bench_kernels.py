"""Time the compiled and numpy kernel backends on the hot loops.

    python benchmarks/bench_kernels.py --points 250000 --convexes 16 --threads 1 4
"""
import argparse
import time

import numpy as np
from scipy.spatial.transform import Rotation

from convexdecomp import kernels
from convexdecomp.geometry import ConvexPrimitive, Decomposition
from convexdecomp.render import raymarch
from convexdecomp.synth import default_camera, synth_scene


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def random_decomposition(k, rng):
    convexes = [ConvexPrimitive(Rotation.random(random_state=rng).as_matrix(),
                                rng.uniform(0.05, 0.2, 6), rng.uniform(-0.4, 0.4, 3) + [0, 0, 0.4],
                                100.0) for _ in range(k)]
    return Decomposition(convexes)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--points", type=int, default=250_000)
    ap.add_argument("--convexes", type=int, default=16)
    ap.add_argument("--threads", type=int, nargs="+", default=[1, 4])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--width", type=int, default=160)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    d = random_decomposition(args.convexes, rng)
    pts = rng.uniform(-0.7, 0.7, (args.points, 3))
    gphi = rng.normal(size=(args.points, args.convexes))
    args_k = d.pack()
    cam = default_camera(args.width, args.width * 3 // 4)
    scene = synth_scene(3, seed=0, cam=cam).decomposition

    print(f"{'backend':8s} {'threads':>7s} {'forward':>9s} {'backward':>9s} {'march':>9s}")
    rows = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        for n in args.threads:
            kernels.set_num_threads(n)
            fwd = best_of(lambda: kernels.sdf_forward(pts, *args_k), args.repeat)
            bwd = best_of(lambda: kernels.sdf_backward(pts, *args_k, gphi), args.repeat)
            mar = best_of(lambda: raymarch(scene, cam), args.repeat)
            rows[name, n] = (fwd, bwd, mar)
            print(f"{name:8s} {n:7d} {fwd:8.3f}s {bwd:8.3f}s {mar:8.3f}s")
    if ("cython", 1) in rows:
        speed = np.array(rows["python", 1]) / np.array(rows["cython", 1])
        print("speedup (1 thread): forward {:.1f}x, backward {:.1f}x, march {:.1f}x".format(*speed))
    print(f"{args.points} points x {args.convexes} convexes; march on a {cam.width}x{cam.height} "
          f"view of {len(scene)} convexes")


if __name__ == "__main__":
    main()
