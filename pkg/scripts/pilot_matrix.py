"""Pilot: full default matrix on one seed; prints dev MERs and analyses."""
import json
import sys
import time

from cslab.corpus import SynthSpec, build_vocabulary, generate_corpus
from cslab.encoder import ModelConfig
from cslab.trainer import TrainConfig, run_experiment_matrix

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
t0 = time.time()
spec = SynthSpec()
vocab = build_vocabulary(spec)
splits = {s.name: s for s in generate_corpus(spec)}
cfg = ModelConfig(vocab_size=vocab.size)
tc = TrainConfig(seed=seed)
outcomes = run_experiment_matrix(tc, cfg, splits, vocab, jobs=2)
report = {"seed": seed, "minutes": round((time.time() - t0) / 60, 1)}
for tag, o in outcomes.items():
    row = {}
    for (split, dec), rep in o.scores.items():
        row[f"{split}:{dec}"] = round(rep.mixed_error_rate, 4)
    row["params"] = o.parameter_total
    if o.separation:
        row["mean_cd_B"] = round(o.separation["dev_B_heavy"].mean_cosine_distance, 4)
    if o.gating:
        g = o.gating["dev_B_heavy"]
        row["gateA_onA"] = round(g.mean_gate_a_on_true_a, 3)
        row["gateA_onB"] = round(g.mean_gate_a_on_true_b, 3)
    report[tag] = row
print(json.dumps(report, indent=1))
