"""Compare the compiled kernel extension against the pure numpy fallback.

Times each hot kernel on training-sized arrays under both backends and
prints a speedup table, then (unless --no-train-step) times one full
local training step end to end. Run from the repo root:

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --quick --dtype float64
"""

import argparse
import time

import numpy as np

from fedbot import kernels


def _time(fn, repeats: int) -> float:
    fn()  # warm up caches and lazy allocations
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _kernel_cases(rows: int, cols: int, vocab: int, flat: int, dtype):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, cols)).astype(dtype)
    dy = rng.normal(size=(rows, cols)).astype(dtype)
    gain = rng.normal(size=cols).astype(dtype)
    bias = rng.normal(size=cols).astype(dtype)
    y = kernels.softmax_fwd(x)
    _, mean, rstd = kernels.layer_norm_fwd(x, gain, bias, 1e-6)

    logits = rng.normal(size=(rows, vocab)).astype(dtype)
    targets = rng.integers(0, vocab, size=rows).astype(np.int64)
    mask = (rng.random(rows) < 0.9).astype(np.uint8)
    _, probs = kernels.cross_entropy_fwd(logits, targets, mask)
    scale = 1.0 / max(int(mask.sum()), 1)

    w = rng.normal(size=flat).astype(dtype)
    g = rng.normal(size=flat).astype(dtype)
    m = np.zeros(flat, dtype=dtype)
    v = np.zeros(flat, dtype=dtype)

    return {
        f"softmax_fwd ({rows}x{cols})": lambda: kernels.softmax_fwd(x),
        f"softmax_bwd ({rows}x{cols})": lambda: kernels.softmax_bwd(y, dy),
        f"layer_norm_fwd ({rows}x{cols})": lambda: kernels.layer_norm_fwd(x, gain, bias, 1e-6),
        f"layer_norm_bwd ({rows}x{cols})": lambda: kernels.layer_norm_bwd(
            x, gain, mean, rstd, dy
        ),
        f"cross_entropy_fwd ({rows}x{vocab})": lambda: kernels.cross_entropy_fwd(
            logits, targets, mask
        ),
        f"cross_entropy_bwd ({rows}x{vocab})": lambda: kernels.cross_entropy_bwd(
            probs, targets, mask, scale
        ),
        f"adam_update ({flat})": lambda: kernels.adam_update(
            w, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1.0, 1.0
        ),
    }


def _train_step_case():
    # one optimizer step of the real model, everything included
    from fedbot.client import LocalTrainConfig, client_update
    from fedbot.data import Pair, encode_pairs
    from fedbot.model import TransformerConfig, init_weights
    from fedbot.tokenizer import Vocabulary

    rng = np.random.default_rng(1)
    words = [f"w{i}" for i in range(46)]
    vocab = Vocabulary.from_pieces(words)
    config = TransformerConfig(
        vocab_size=len(vocab), d_model=64, n_heads=4, n_layers=2, d_ff=128, max_len=12
    )
    pairs = [
        Pair(*([" ".join(rng.choice(words, size=6))] * 2), "") for _ in range(32)
    ]
    src, tgt = encode_pairs(vocab, pairs, config.max_len)
    weights = init_weights(config, seed=0)
    train = LocalTrainConfig(epochs=1, lr=1e-3, batch_size=32, optimizer="adam", shuffle_seed=0)
    return lambda: client_update(weights, config, src, tgt, train)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=4096)
    parser.add_argument("--cols", type=int, default=256)
    parser.add_argument("--vocab", type=int, default=4000)
    parser.add_argument("--flat", type=int, default=1_000_000)
    parser.add_argument("--repeats", type=int, default=7)
    parser.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    parser.add_argument("--quick", action="store_true", help="small arrays, 3 repeats")
    parser.add_argument("--no-train-step", action="store_true")
    args = parser.parse_args(argv)

    if args.quick:
        args.rows, args.cols, args.vocab, args.flat, args.repeats = 512, 128, 1000, 100_000, 3

    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled extension not built; timing the numpy backend only")

    dtype = np.dtype(args.dtype)
    cases = _kernel_cases(args.rows, args.cols, args.vocab, args.flat, dtype)
    if not args.no_train_step:
        cases["train step (d_model=64, 32 pairs)"] = _train_step_case()

    width = max(len(name) for name in cases)
    header = f"{'kernel':<{width}}  " + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}"
    print(f"dtype={args.dtype} repeats={args.repeats}")
    print(header)
    print("-" * len(header))

    previous = kernels.backend()
    try:
        for name, fn in cases.items():
            times = []
            for b in backends:
                kernels.set_backend(b)
                times.append(_time(fn, args.repeats))
            row = f"{name:<{width}}  " + "".join(f"{t * 1e3:>10.3f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:>9.2f}x"
            print(row)
    finally:
        kernels.set_backend(previous)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
