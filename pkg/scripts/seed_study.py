"""Five-seed study at the candidate corpus difficulty; prints criteria stats."""
import json, sys, time
import multiprocessing as mp

from cslab.corpus import SynthSpec, build_vocabulary, generate_corpus
from cslab.encoder import ModelConfig
from cslab.trainer import SYSTEM_TAGS, TrainConfig, run_system

N = int(sys.argv[1]) if len(sys.argv) > 1 else 40
SIGMA = float(sys.argv[2]) if len(sys.argv) > 2 else 0.5
CTX = {}

def init():
    spec = SynthSpec(n_a=N, n_b=N, noise_sigma=SIGMA)
    CTX["vocab"] = build_vocabulary(spec)
    CTX["splits"] = {s.name: s for s in generate_corpus(spec)}
    CTX["cfg"] = ModelConfig(vocab_size=CTX["vocab"].size)

def one(job):
    tag, seed = job
    o = run_system(tag, TrainConfig(seed=seed), CTX["cfg"], CTX["splits"], CTX["vocab"])
    res = {"tag": tag, "seed": seed,
           "B": o.scores[("dev_B_heavy", "beam10")].mixed_error_rate,
           "A": o.scores[("dev_A_heavy", "beam10")].mixed_error_rate}
    if o.separation:
        res["cd"] = o.separation["dev_B_heavy"].mean_cosine_distance
    if o.gating:
        g = o.gating["dev_B_heavy"]
        res["gAA"], res["gAB"] = g.mean_gate_a_on_true_a, g.mean_gate_a_on_true_b
    return res

if __name__ == "__main__":
    t0 = time.time()
    init()  # parent builds; fork children inherit
    jobs = [(tag, seed) for seed in range(5) for tag in SYSTEM_TAGS]
    with mp.get_context("fork").Pool(2) as pool:
        rows = pool.map(one, jobs)
    print(json.dumps({"n": N, "sigma": SIGMA,
                      "minutes": round((time.time() - t0) / 60, 1),
                      "rows": rows}))
