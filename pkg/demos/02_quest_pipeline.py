"""Walk the full test-time self-training pipeline on a hidden-rule task.

Setup: the base model is pretrained on mapping problems "Q: <sym> ->" whose
answer appends a per-document rule letter. At evaluation time the rule is
hidden, so the base model can only guess it. A scripted generator (standing in
for the model-as-generator at desk scale) emits five exemplar pairs that
reveal the query's rule; fitting a low-rank adapter on them teaches the model
the rule before it answers. Compare that against the entropy- and
perplexity-minimization baselines, which see only the query.

Run:
    python demos/02_quest_pipeline.py
"""

import re
import time

import numpy as np

from quest import (
    GenConfig,
    ModelSession,
    OptConfig,
    Query,
    RefConfig,
    base_answer,
    quest,
    spec_for_all_modules,
    tent,
    tlm,
    train_reference,
)
from quest.supervision import format_answer_prompt

SYMS = "defghijklmnopqrstu"
TAGS = "vwxy"

# -- pretrain the base model ----------------------------------------------------

rng = np.random.default_rng(0)
docs = []
for _ in range(1000):
    tag = TAGS[rng.integers(len(TAGS))]
    sym = SYMS[rng.integers(len(SYMS))]
    body = format_answer_prompt(f"Q: {sym} ->\nA:", "") + f"\\boxed{{{sym}{tag}}}"
    # most training docs carry a visible rule header; queries never do
    docs.append(f"rule: {tag}\n{body}" if rng.random() < 0.7 else body)

t0 = time.perf_counter()
backend = train_reference(docs, RefConfig(n_layer=2, d_model=64, n_head=4, max_len=128),
                          steps=1500, lr=3e-3, seed=0)
print(f"pretrained base model in {time.perf_counter() - t0:.1f}s")


# -- a scripted generator for the auxiliary pairs -------------------------------

class ScriptedGenerator:
    """Emits one exemplar of the query's hidden rule per generation call; the
    first variation is a near-duplicate of the query itself."""

    name = "scripted"
    eos_id = 0
    max_len = 1_000_000

    def __init__(self, ref, tag_of):
        self._ref = ref
        self._tag_of = tag_of
        self.vocab_size = ref.vocab_size

    def tokenize(self, text):
        return self._ref.tokenize(text)

    def detokenize(self, ids):
        return self._ref.detokenize(ids)

    def adaptable_modules(self):
        return []

    def generate(self, prompt, max_new_tokens, temperature, adapter=None, seed=None):
        text = self.detokenize(prompt)
        sym = re.search(r"Q: (\S) ->", text).group(1)
        idx = int(re.search(r"problem (\d+) ", text).group(1))
        pool = [sym] + [s for s in SYMS if s != sym][:4]
        s = pool[(idx - 1) % len(pool)]
        out = f"<problem>Q: {s} ->\nA:</problem><solution>\\boxed{{{s}{self._tag_of[sym]}}}</solution>"
        return self.tokenize(out)


# -- run every method over 20 queries -------------------------------------------

qrng = np.random.default_rng(42)
tag_of = {s: TAGS[i % len(TAGS)] for i, s in enumerate(qrng.permutation(list(SYMS)))}
queries = []
for i in range(20):
    sym = SYMS[qrng.integers(len(SYMS))]
    queries.append((Query(id=f"q{i}", text=f"Q: {sym} ->\nA:", system_prompt=""), f"{sym}{tag_of[sym]}"))

session = ModelSession(backend=backend, seed=7)
generator = ModelSession(backend=ScriptedGenerator(backend, tag_of), seed=7)
spec = spec_for_all_modules(backend.adaptable_modules(), rank=8, alpha=16, dropout=0.05)
gen_cfg = GenConfig(n_pairs=5, max_new_tokens=64, temperature=0.8)
opt_cfg = OptConfig(steps=200, lr=3e-3, grad_accumulation=4)

scores = {"base": 0, "tent": 0, "tlm": 0, "quest": 0}
for query, gold in queries:
    results = {
        "base": base_answer(session, query, max_new_tokens=16),
        "tent": tent(session, query, spec, opt_cfg, max_new_tokens=16),
        "tlm": tlm(session, query, spec, opt_cfg, max_new_tokens=16),
        "quest": quest(session, query, gen_cfg, spec, opt_cfg,
                       generator_session=generator, max_new_tokens=16),
    }
    for name, result in results.items():
        scores[name] += int(result.extracted == gold)

print(f"\naccuracy over {len(queries)} hidden-rule queries:")
for name, hits in scores.items():
    print(f"  {name:<6} {hits / len(queries):5.2f}")
print("\nquest learns the hidden rule from its generated exemplars;")
print("entropy/perplexity objectives see only the query and cannot recover it.")
