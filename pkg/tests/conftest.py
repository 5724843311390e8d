import itertools
import math

import numpy as np
import pytest

from fedmem.lm import ModelParams, log_perplexity


def random_model(vocab, embed, hidden, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    p = ModelParams.initialize(vocab, embed, hidden, rng)
    p.flat[:] *= scale
    p.out_bias[:] = rng.normal(0.0, 0.5, vocab)
    return p


def central_differences(fn, flat, step=1e-4, points=3):
    """Numerical gradient of ``fn(flat)`` by a 3- or 5-point central stencil."""
    weights = {3: ((1, 1.0), (-1, -1.0)),
               5: ((2, -1 / 12), (1, 8 / 12), (-1, -8 / 12), (-2, 1 / 12))}[points]
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        total = 0.0
        for k, w in weights:
            flat[i] = orig + k * step
            total += w * fn(flat)
        flat[i] = orig
        grad[i] = total / (step * (2 if points == 3 else 1))
    return grad


def exhaustive_ranking(params, context, length):
    """Every continuation of ``length`` tokens, ordered by (score, sequence)."""
    scored = []
    for seq in itertools.product(range(params.vocab_size), repeat=length):
        scored.append((log_perplexity(params, context, seq), seq))
    scored.sort()
    return scored


@pytest.fixture
def tiny_model():
    return random_model(8, 4, 4, seed=3)


def chain_probability(params, context, suffix):
    """Direct chain-rule probability, one ``forward`` call per suffix token."""
    from fedmem.lm import forward

    total = 0.0
    ctx = list(context)
    for tok in suffix:
        total -= math.log(forward(params, ctx)[-1][tok])
        ctx.append(tok)
    return total


def tiny_devices(count, vocab, sentences_per_device, seed, first_id=0):
    """Devices holding random short sentences over ordinary tokens."""
    from fedmem.population import Device

    rng = np.random.default_rng(seed)
    devices = []
    for i in range(count):
        sents = [rng.integers(3, vocab, rng.integers(2, 6)).tolist()
                 for _ in range(sentences_per_device)]
        devices.append(Device(first_id + i, sents))
    return devices


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance criterion lines collected by ``test_acceptance``."""
    import sys

    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
