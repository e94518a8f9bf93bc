"""How close are a randomly initialized separator's outputs to x/N?

Prints the SISDR of each output channel against the scaled input mixture for
the default (random) initialization and for a zero-initialized output layer.
"""
import numpy as np
import torch

from remixsep.datagen import Corpus, CorpusSpec
from remixsep.metrics import sisdr
from remixsep.separator import SeparatorConfig, random_init, separate
from remixsep.signals import normalize_mixture


def main():
    torch.set_num_threads(1)
    corpus = Corpus.synthesize(CorpusSpec(num_examples=32, duration_s=1.0, seed=9))
    x = normalize_mixture(torch.as_tensor(corpus.mixtures, dtype=torch.float64)).wave
    for zero_init in (False, True):
        cfg = SeparatorConfig(n_out=3, zero_init_output=zero_init)
        scores = []
        for seed in range(3):
            out = separate(random_init(cfg, seed, torch.float64), x, cfg).detach().numpy()
            scores += [sisdr(x[b].numpy() / cfg.n_out, out[b, n]) for b in range(len(x)) for n in range(cfg.n_out)]
        print(f"zero_init_output={zero_init}: SISDR(output, x/N) mean {np.mean(scores):.1f} dB, min {np.min(scores):.1f} dB")


if __name__ == "__main__":
    main()
