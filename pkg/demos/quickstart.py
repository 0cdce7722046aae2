"""Train the sequence-exchange protocol on a small synthetic corpus and compare
it with clients that never collaborate."""

import warnings

from seqfed import ProtocolConfig, evaluate, local_only_baseline, run_ptf, synth_corpus

warnings.simplefilter("ignore", UserWarning)

corpus = synth_corpus(100, 40, seed=0)
cfg = ProtocolConfig(global_rounds=8, subround_size=50, eval_k=5)

result = run_ptf(corpus, cfg)
for rep in result.reports:
    print(f"round {rep.round:2d}  client loss {rep.client_loss:7.3f}  server rec {rep.server_loss['rec']:8.3f}")

server = evaluate(result.server.model, corpus, k=5)
local = local_only_baseline(corpus, cfg)
print(f"server model  HR@5 {server.hr_at_k:.3f}  NDCG@5 {server.ndcg_at_k:.3f}")
print(f"local only    HR@5 {local.hr_at_k:.3f}  NDCG@5 {local.ndcg_at_k:.3f}")
