"""Time one critic and one generator update with each backend.

    python3 benchmarks/bench_kernels.py [--repeat N] [--full]

``--full`` uses the full-size networks (401-point PDPs) instead of the
reduced 64-wide ones used for desk-scale runs.
"""

import argparse
import timeit

import numpy as np

from pdpgan import autodiff as ad
from pdpgan import gan, kernels


def setup(full: bool, batch: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    if full:
        G = gan.GeneratorNet.create(rng)
        D = gan.DiscriminatorNet.create(rng)
    else:
        G = gan.GeneratorNet.create(rng, 100, (64,) * 4, 64)
        D = gan.DiscriminatorNet.create(rng, 64, (64,) * 4)
    real = rng.uniform(size=(batch, G.out_width))
    z = rng.normal(size=(batch, G.in_width))
    fake = G.forward(z)
    x_tilde = gan.interpolate(real, fake, rng)
    return G, D, real, z, fake, x_tilde


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--batch", type=int, default=64)
    ap.add_argument("--full", action="store_true")
    args = ap.parse_args()
    G, D, real, z, fake, x_tilde = setup(args.full, args.batch)
    gc, dc = kernels.codes(G.activations), kernels.codes(D.activations)

    def tape_critic():
        with ad.Tape() as tape:
            gb, db = G.bind(), D.bind()
            d_loss, _ = gan.wgan_gp_losses(gb, db, real, z, gan.DEFAULT_LAMBDA, x_tilde=x_tilde)
            tape.gradient(d_loss, db.params)

    def tape_generator():
        with ad.Tape() as tape:
            gb = G.bind()
            tape.gradient(ad.neg(ad.mean(D.bind()(gb(z)))), gb.params)

    rows = []
    names = ["python", "cython"] if kernels.BACKEND == "cython" else ["python"]
    for name in names:
        k = kernels.get_backend(name)
        rows.append((name, "critic", lambda k=k: k.critic_step(
            D.weights, D.biases, dc, D.alpha, real, fake, x_tilde, gan.DEFAULT_LAMBDA, ad.NORM_EPS)))
        rows.append((name, "generator", lambda k=k: k.generator_step(
            G.weights, G.biases, gc, D.weights, D.biases, dc, G.alpha, z)))
    rows.append(("tape", "critic", tape_critic))
    rows.append(("tape", "generator", tape_generator))

    size = "full" if args.full else "desk"
    print(f"{'backend':8s} {'step':10s} {'ms/call':>9s}   ({size} networks, batch {args.batch})")
    for name, step, fn in rows:
        fn()
        reps = max(1, args.repeat if name != "tape" else args.repeat // 4)
        t = min(timeit.repeat(fn, number=reps, repeat=3)) / reps
        print(f"{name:8s} {step:10s} {t * 1e3:9.3f}")


if __name__ == "__main__":
    main()
