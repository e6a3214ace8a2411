"""Prototype of the directional domain-adaptation experiment (criterion 6)."""
import time
import numpy as np

from contact.synthgen import SynthSpec, gen_pretrain_corpora, gen_labeled
from contact.tokenizer import train_bpe
from contact.encoder import EncoderConfig, init_params
from contact.model import ModelState
from contact.training import (MaskingPolicy, TrainConfig, pretrain,
                              mlm_validation_loss, finetune_stance, predict_proba)
from contact.evalharness import binary_metrics

t_start = time.time()
spec = SynthSpec(n_pretrain_docs=400, n_labeled={"twitter": 150, "facebook": 150},
                 noise_rate=0.08, seed=11)
domain_a, domain_b = gen_pretrain_corpora(spec)
texts_a = [p.text for p in domain_a]
texts_b = [p.text for p in domain_b]
labeled = gen_labeled(spec)

vocab = train_bpe(texts_a + texts_b, vocab_size=360)
print("vocab", len(vocab), "merges", len(vocab.merges), f"{time.time()-t_start:.1f}s")

enc_cfg = EncoderConfig(n_layers=2, n_heads=2, d_model=32, d_ff=64,
                        max_positions=48, vocab_size=len(vocab), dropout_rate=0.1)
policy = MaskingPolicy(seed=101)
base = ModelState(params=init_params(enc_cfg, seed=5), vocab=vocab)

t0 = time.time()
cfg_a = TrainConfig(epochs=6, batch_size=16, learning_rate=1e-3,
                    validation_fraction=0.0, seed=21)
params_g, log_g = pretrain(base, texts_a, cfg_a, policy)
model_g = ModelState(params=params_g, vocab=vocab)
print(f"G pretrain {time.time()-t0:.1f}s, last loss {log_g.train_losses[-1]:.3f}")

# hold out 20% of domain B for MLM validation; C continues on the rest
n_hold = len(texts_b) // 5
b_train, b_val = texts_b[n_hold:], texts_b[:n_hold]
t0 = time.time()
cfg_b = TrainConfig(epochs=4, batch_size=16, learning_rate=1e-3,
                    validation_fraction=0.0, seed=22)
params_c, log_c = pretrain(model_g, b_train, cfg_b, policy)
model_c = ModelState(params=params_c, vocab=vocab)
print(f"C continue {time.time()-t0:.1f}s, last loss {log_c.train_losses[-1]:.3f}")

val_g = mlm_validation_loss(model_g, b_val, policy)
val_c = mlm_validation_loss(model_c, b_val, policy)
print(f"MLM val on B: G {val_g:.3f}  C {val_c:.3f}  improvement {(val_g-val_c)/val_g:.1%}")

# (b) downstream F1 across 5 seeds
wins = 0
t0 = time.time()
for seed in range(5):
    rng = np.random.default_rng(1000 + seed)
    order = rng.permutation(len(labeled))
    split = int(0.7 * len(labeled))
    train = [labeled[i] for i in order[:split]]
    test = [labeled[i] for i in order[split:]]
    ft = TrainConfig(epochs=4, batch_size=8, learning_rate=1e-3, seed=seed)
    f1s = {}
    for name, m in (("G", model_g), ("C", model_c)):
        p_ft = finetune_stance(m, train, ft)
        probs = predict_proba(p_ft, vocab, [p.text for p in test], "stance")
        pred = (probs >= 0.5).tolist()
        gold = [p.hesitant for p in test]
        f1s[name] = binary_metrics(gold, pred)[2]
    win = f1s["C"] > f1s["G"]
    wins += win
    print(f"seed {seed}: G {f1s['G']:.3f} C {f1s['C']:.3f} {'WIN' if win else 'LOSS'}")
print(f"downstream: C wins {wins}/5 ({time.time()-t0:.1f}s)")
print(f"total {time.time()-t_start:.1f}s")
