"""Bytes on the wire per client per round: perturbed sequences vs model weights."""

import dataclasses
import warnings

from seqfed import ProtocolConfig, comm_summary, run_fedavg_baseline, run_ptf, synth_corpus

warnings.simplefilter("ignore", UserWarning)

corpus = synth_corpus(40, 50, seed=1)
base = ProtocolConfig(global_rounds=2, subround_size=20, client_epochs=1, server_epochs=1)

for dim in (8, 32, 64):
    cfg = dataclasses.replace(base, server_dim=dim)
    summary = comm_summary(run_ptf(corpus, cfg).ledger, run_fedavg_baseline(corpus, cfg).ledger)
    print(
        f"server d={dim:2d}  ptf up {summary['ptf']['up']:7.1f} B  down {summary['ptf']['down']:7.1f} B  "
        f"fedavg up {summary['fedavg']['up']:9.0f} B  ratio {summary['ratio']['up']:6.0f}x"
    )
