"""Per-step wall-clock of the GSF and PF on both kernel backends.

    python3 benchmarks/bench_kernels.py --steps 200 --particles 1500
"""

import argparse
import time

import numpy as np

from relpose import filters as F
from relpose import gils, kernels, sim


def _time_gsf(data, mix, model, kern, steps):
    b = F.init_gsf(mix)
    out = []
    for k in range(steps):
        inp = F.InputSet(data.u[k], data.Q)
        t0 = time.perf_counter()
        b = F.gsf_step(b, inp, data.times[k + 1] - data.times[k], data.ranges[k], model, backend=kern)
        out.append(time.perf_counter() - t0)
    return np.array(out), len(b)


def _time_pf(data, mix, model, kern, steps, particles):
    rng = np.random.default_rng(0)
    b = F.init_pf(mix, particles, rng, kern)
    noise = F.PfNoise()
    out = []
    for k in range(steps):
        inp = F.InputSet(data.u[k], data.Q)
        t0 = time.perf_counter()
        b = F.pf_step(b, inp, data.times[k + 1] - data.times[k], data.ranges[k], model, noise, rng, kern)
        out.append(time.perf_counter() - t0)
    return np.array(out)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--particles", type=int, default=1500)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    duration = args.steps / 50.0 + 0.1
    cfg = sim.ScenarioConfig(duration=duration, warmup=min(4.0, duration / 2), seed=args.seed)
    data = sim.simulate_trial(cfg, args.seed, 0)
    mix = gils.initialize(data.static, data.geoms, data.graph).mixture
    model = F.RangeModel.build(data.geoms, data.graph)
    steps = min(args.steps, len(data.times) - 1)

    print(f"{'backend':8s} {'filter':4s} {'median ms':>10s} {'p90 ms':>8s}")
    for name in ("numpy", "numba"):
        try:
            kern = kernels.get_backend(name)
        except ImportError:
            print(f"{name:8s} unavailable")
            continue
        # one short warm-up pass so JIT compilation is not timed
        _time_gsf(data, mix, model, kern, 3)
        _time_pf(data, mix, model, kern, 3, args.particles)
        g, modes = _time_gsf(data, mix, model, kern, steps)
        p = _time_pf(data, mix, model, kern, steps, args.particles)
        for label, t in ((f"gsf{modes}", g), ("pf", p)):
            print(f"{name:8s} {label:4s} {1e3 * np.median(t):10.3f} {1e3 * np.percentile(t, 90):8.3f}")


if __name__ == "__main__":
    main()
