"""Accuracy of the server model as the share of replaced items and the
privacy budget vary."""

import warnings

from seqfed import ProtocolConfig, ablation_grid, synth_corpus

warnings.simplefilter("ignore", UserWarning)

corpus = synth_corpus(60, 30, seed=0)
cfg = ProtocolConfig(global_rounds=3, subround_size=20, server_dim=16, client_epochs=2, server_epochs=1)

for axis, values in (("beta", [0.0, 0.3, 0.5, 0.8, 1.0]), ("epsilon", [0.1, 1.0, 5.0])):
    print(f"{axis:>8}  HR@5   NDCG@5")
    for row in ablation_grid(corpus, cfg, axis, values, k=5):
        print(f"{row['row']:>8}  {row['hr@5']:.3f}  {row['ndcg@5']:.3f}")
    print()
