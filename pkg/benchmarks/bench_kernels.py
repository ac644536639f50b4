"""Compare the compiled and numpy kernel backends at toy-model sizes.

    python benchmarks/bench_kernels.py [--repeat N]
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from microcorn.tensor import kernels


def workloads(rng: np.random.Generator) -> dict:
    x = rng.normal(size=32 * 48 * 256)
    ln_x = rng.normal(size=(32 * 48, 64))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    q, k, v = (rng.normal(size=(128, 48, 16)) for _ in range(3))
    logits = rng.normal(size=(32 * 48, 81))
    targets = rng.integers(0, 81, size=32 * 48).astype(np.int64)
    targets[::3] = -1

    def attn_bwd(mod):
        out, p = mod.causal_attn_fwd(q, k, v, 0.25)
        return lambda: mod.causal_attn_bwd(out, q, k, v, p, 0.25)

    def ln_bwd(mod):
        y, xhat, rstd = mod.layernorm_fwd(ln_x, gain, bias, 1e-5)
        return lambda: mod.layernorm_bwd(y, xhat, rstd, gain)

    def xent_bwd(mod):
        _, _, probs = mod.xent_fwd(logits, targets)
        return lambda: mod.xent_bwd(probs, targets, 1.0)

    return {
        "gelu_fwd": lambda mod: (lambda: mod.gelu_fwd(x)),
        "gelu_bwd": lambda mod: (lambda: mod.gelu_bwd(x, x)),
        "layernorm_fwd": lambda mod: (lambda: mod.layernorm_fwd(ln_x, gain, bias, 1e-5)),
        "layernorm_bwd": ln_bwd,
        "causal_attn_fwd": lambda mod: (lambda: mod.causal_attn_fwd(q, k, v, 0.25)),
        "causal_attn_bwd": attn_bwd,
        "xent_fwd": lambda mod: (lambda: mod.xent_fwd(logits, targets)),
        "xent_bwd": xent_bwd,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = kernels.available_backends()
    names = list(backends)
    print(f"{'kernel':<18}" + "".join(f"{n + ' ms':>14}" for n in names) + ("    speedup" if len(names) == 2 else ""))
    for kernel, make in workloads(np.random.default_rng(0)).items():
        times = []
        for n in names:
            fn = make(backends[n])
            fn()
            times.append(min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3)
        line = f"{kernel:<18}" + "".join(f"{t:>14.3f}" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>10.1f}x"
        print(line)


if __name__ == "__main__":
    main()
