import json, sys, time
from cslab.corpus import SynthSpec, build_vocabulary, generate_corpus
from cslab.encoder import ModelConfig
from cslab.trainer import TrainConfig, run_experiment_matrix
sigma = float(sys.argv[1])
t0 = time.time()
spec = SynthSpec(n_a=40, n_b=40, noise_sigma=sigma)
vocab = build_vocabulary(spec)
splits = {s.name: s for s in generate_corpus(spec)}
cfg = ModelConfig(vocab_size=vocab.size)
outcomes = run_experiment_matrix(TrainConfig(seed=0), cfg, splits, vocab, jobs=1)
out = {"sigma": sigma, "minutes": round((time.time() - t0) / 60, 1)}
for tag, o in outcomes.items():
    row = {"B": round(o.scores[("dev_B_heavy", "beam10")].mixed_error_rate, 4)}
    if o.separation:
        row["cd"] = round(o.separation["dev_B_heavy"].mean_cosine_distance, 2)
    if o.gating:
        g = o.gating["dev_B_heavy"]
        row["gA|A"], row["gA|B"] = round(g.mean_gate_a_on_true_a, 2), round(g.mean_gate_a_on_true_b, 2)
    out[tag] = row
print(json.dumps(out))
