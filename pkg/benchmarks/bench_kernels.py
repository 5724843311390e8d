"""Compare the compiled and numpy CIFG kernels.

Times the bare recurrence (forward and backward), one full training step and
small-batch scoring (the audit's hot path) under each backend, and checks the
two backends agree.

    python benchmarks/bench_kernels.py --repeat 20
"""

import argparse
import time

import numpy as np

from fedmem import _pykernels, kernels
from fedmem.corpus import CorpusConfig, generate_corpus
from fedmem.lm import ModelParams, SequenceBatch, log_perplexities, loss_and_gradient

try:
    from fedmem import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def use_backend(module):
    kernels.cifg_forward = module.cifg_forward
    kernels.cifg_backward = module.cifg_backward


def build_parser():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--vocab", type=int, default=1000)
    p.add_argument("--dim", type=int, default=96, help="embedding and hidden size")
    p.add_argument("--batch", type=int, default=50)
    p.add_argument("--steps", type=int, default=18, help="padded sentence length")
    p.add_argument("--references", type=int, default=2000, help="suffixes scored per call")
    p.add_argument("--repeat", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    rng = np.random.default_rng(args.seed)
    h = args.dim
    params = ModelParams.initialize(args.vocab, h, h, rng)
    xproj = rng.normal(size=(args.steps, args.batch, 3 * h))
    h0 = np.zeros((args.batch, h))
    sentences = generate_corpus(CorpusConfig(num_sentences=args.batch, vocab_size=args.vocab),
                                rng)
    batch = SequenceBatch.from_sentences(sentences)
    suffixes = rng.integers(3, args.vocab, (args.references, 3))
    context = [0, 5, 6]

    backends = [("python", _pykernels)]
    if _ckernels is not None:
        backends.append(("cython", _ckernels))
    results, outputs = {}, {}
    original = (kernels.cifg_forward, kernels.cifg_backward)
    try:
        for name, module in backends:
            use_backend(module)
            fwd = module.cifg_forward(xproj, params.w_h, h0, h0)
            dh = rng.normal(size=fwd[3].shape)
            results[name] = {
                "forward": best_of(lambda: module.cifg_forward(xproj, params.w_h, h0, h0),
                                   args.repeat),
                "backward": best_of(lambda: module.cifg_backward(dh, params.w_h, *fwd[:3], h0),
                                    args.repeat),
                "train step": best_of(lambda: loss_and_gradient(params, batch), args.repeat),
                "score 1 suffix": best_of(lambda: log_perplexities(params, context,
                                                                   suffixes[:1]), args.repeat),
                f"score {args.references}": best_of(
                    lambda: log_perplexities(params, context, suffixes), args.repeat),
            }
            outputs[name] = (fwd[3], loss_and_gradient(params, batch)[1].flat)
    finally:
        kernels.cifg_forward, kernels.cifg_backward = original

    names = [n for n, _ in backends]
    print(f"V={args.vocab} d=h={h} batch={args.batch} steps={args.steps} "
          f"(best of {args.repeat}, ms)")
    print(f"{'kernel':<16}" + "".join(f"{n:>10}" for n in names)
          + ("   speedup" if len(names) == 2 else ""))
    for key in results[names[0]]:
        row = [results[n][key] * 1e3 for n in names]
        line = f"{key:<16}" + "".join(f"{v:>10.3f}" for v in row)
        if len(row) == 2:
            line += f"{row[0] / row[1]:>9.2f}x"
        print(line)
    if len(names) == 2:
        hid = np.max(np.abs(outputs["python"][0] - outputs["cython"][0]))
        grad = np.max(np.abs(outputs["python"][1] - outputs["cython"][1]))
        print(f"max |difference|: hidden states {hid:.2e}, gradient {grad:.2e}")


if __name__ == "__main__":
    main()
