"""Smallest end-to-end tour: train a two-client federation, poison the
malicious client's feature slice, distill a shadow of the server, and flip
one edge per target.

    python3 demos/quickstart.py
"""

import numpy as np

from vfgl_lab import attacks, manipulation, metrics, protocol
from vfgl_lab.graph import split_features, synth_sbm

# A three-community graph with 32 node features, split column-wise between
# two clients.  Client 0 is the adversary.
graph = synth_sbm(300, 3, 0.05, 0.005, 32, 1.0, seed=0)
split = split_features(graph, K=2, seed=0)
print(f"graph: {graph.num_nodes} nodes, {len(graph.edges)} edges, "
      f"{graph.features.shape[1]} features -> "
      f"{[len(a) for a in split.assignments]} per client")

# Train with the neuron-path rewrite armed at epoch 15: the adversary takes
# a census of which hidden neurons its training nodes excite, then floods
# the quietest nodes' most influential columns before training resumes.
config = protocol.TrainConfig(epochs=50, seed=0, K=2, local_model="sgc",
                              manipulation="na2", tau=15, gamma=0.05,
                              per_class_paths=True)
pipe = manipulation.distillation_pipeline(graph, split, config)
print(f"manipulation plan: path {pipe.plan.target_path.indices}, "
      f"{len(pipe.plan.candidates)} candidate nodes, "
      f"{len(pipe.plan.features)} columns rewritten")
print(f"queries billed to the adversary so far: "
      f"{pipe.server.query_counter[0]}  (the single probability download)")

# That one download of train-node probabilities is all the shadow needs.
shadow = pipe.shadow
print(f"shadow distillation: mse {shadow.loss_curve[0]:.3f} -> "
      f"{shadow.loss_curve[-1]:.4f}, "
      f"argmax agreement {shadow.agreement[0]:.2f} -> "
      f"{shadow.agreement[1]:.2f}")

# Attack twenty correctly-classified test nodes with single edge flips
# chosen by the shadow's adjacency gradient.  Evaluation against the real
# federation is free for the attacker's bookkeeping (it is the outcome
# measurement, not an oracle call).
svc = protocol.QueryService(pipe.clients, pipe.server, graph, 0)
preds = svc.clean_predictions()
targets = [int(t) for t in graph.test_nodes
           if preds[t] == graph.labels[t]][:20]

A = graph.adjacency()
X_mal = pipe.clients[0].features
budget = attacks.AttackBudget(delta=1, queries=200)
wins = 0
for t in targets:
    out = attacks.fga_attack(shadow, A, X_mal, t, budget,
                             lambda A_hat, X, _t=t: svc.evaluate(_t, A_hat, X))
    wins += out.success

print(f"attack: {wins}/{len(targets)} targets flipped "
      f"(ASR {metrics.asr(wins, len(targets)):.1f}%) "
      f"with one edge each and one server query total")

accs = [protocol.client_only_accuracy(pipe.server, pipe.clients, graph, i)
        for i in range(2)]
cs = metrics.contribution_scores(accs)
print(f"contribution scores: adversary {cs[0]:.3f} vs peer {cs[1]:.3f} "
      f"(the rewrite also inflates the attacker's apparent usefulness)")
