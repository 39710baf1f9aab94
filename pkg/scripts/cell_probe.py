"""Probe one difficulty cell: all five systems, one seed, dev_B MERs."""
import json
import sys
import time

from cslab.corpus import SynthSpec, build_vocabulary, generate_corpus
from cslab.encoder import ModelConfig
from cslab.trainer import TrainConfig, run_experiment_matrix

n, sigma, seed = int(sys.argv[1]), float(sys.argv[2]), int(sys.argv[3])
t0 = time.time()
spec = SynthSpec(n_a=n, n_b=n, noise_sigma=sigma)
vocab = build_vocabulary(spec)
splits = {s.name: s for s in generate_corpus(spec)}
cfg = ModelConfig(vocab_size=vocab.size)
outcomes = run_experiment_matrix(TrainConfig(seed=seed), cfg, splits, vocab, jobs=1)
out = {"n": n, "sigma": sigma, "seed": seed,
       "minutes": round((time.time() - t0) / 60, 1)}
for tag, o in outcomes.items():
    row = {"B_beam": round(o.scores[("dev_B_heavy", "beam10")].mixed_error_rate, 4),
           "A_beam": round(o.scores[("dev_A_heavy", "beam10")].mixed_error_rate, 4)}
    if o.separation:
        row["cd_B"] = round(o.separation["dev_B_heavy"].mean_cosine_distance, 3)
    if o.gating:
        g = o.gating["dev_B_heavy"]
        row["gA|A"] = round(g.mean_gate_a_on_true_a, 3)
        row["gA|B"] = round(g.mean_gate_a_on_true_b, 3)
    out[tag] = row
print(json.dumps(out))
