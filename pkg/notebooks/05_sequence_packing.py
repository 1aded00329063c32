"""Best-fit packing of token sequences and EOS-joined task items.

Run: python notebooks/05_sequence_packing.py
"""

from __future__ import annotations

import numpy as np

from mergeforge.packer import TokenSequence, best_fit_pack, next_fit_pack, pit_concat, segment_mask_bounds

# %% Four documents into 4096-token blocks
docs = [TokenSequence(f"doc{i}", np.arange(n)) for i, n in enumerate([2000, 2500, 1500, 4000])]
for i, block in enumerate(best_fit_pack(docs, 4096)):
    parts = ", ".join(f"{s.id}[{s.length}]" for s in block.segments)
    print(f"block {i}: fill {block.fill:4d}  {parts}  spans {segment_mask_bounds(block)}")

# %% Long documents are split at the capacity, never truncated
long = best_fit_pack([TokenSequence("book", np.arange(10_000))], 4096)
print("split:", [(s.chunk, s.length) for b in long for s in b.segments])

# %% Compared with packing in arrival order
rng = np.random.default_rng(0)
corpus = [TokenSequence(f"s{i}", np.ones(n)) for i, n in enumerate(rng.integers(50, 4096, 200))]
print("best fit blocks:", len(best_fit_pack(corpus, 4096)), " sequential blocks:", len(next_fit_pack(corpus, 4096)))

# %% Task items joined with one EOS between parts, then the source document
eos = 0
questions = [TokenSequence("q1", [11, 12]), TokenSequence("q2", [13])]
document = TokenSequence("note", [21, 22, 23])
print("task only:        ", pit_concat(questions, None, eos).tokens.tolist())
print("task + document:  ", pit_concat(questions, document, eos, "task_plus_document").tokens.tolist())
