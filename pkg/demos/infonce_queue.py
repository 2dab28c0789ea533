"""
InfoNCE against a queue of negatives
====================================

The loss compares each query with its positive key and with every row of
a FIFO queue. Here we watch the loss move as the positive gets closer and
as the queue fills with keys that look like the query.
"""

import math

import torch

from detco.contrast import info_nce
from detco.memory import FeatureQueue, random_unit_rows

torch.manual_seed(0)
gen = torch.Generator().manual_seed(0)
d = 16

# a queue warm-started with random unit vectors: easy negatives
queue = FeatureQueue.random(64, d, gen)
q = random_unit_rows(4, d, gen)
for mix in (0.0, 0.5, 0.9):
    k = torch.nn.functional.normalize(mix * q + (1 - mix) * random_unit_rows(4, d, gen), dim=1)
    print(f"positive mix {mix:.1f}: loss {float(info_nce(q, k, queue.negatives(), 0.2)):.3f}")

# when the queue holds copies of the positive, every logit ties: loss = log(K + 1)
k = q.clone()
tied = FeatureQueue(8, d)
tied.enqueue(q[:1].repeat(8, 1))
print("tied logits:", float(info_nce(q[:1], k[:1], tied.negatives(), 0.2)), "expected", math.log(9))

# FIFO: the newest rows always sit behind the write pointer
small = FeatureQueue(5, d)
for step in range(4):
    small.enqueue(random_unit_rows(2, d, gen))
    print(f"step {step}: ptr={small.ptr} filled={small.filled}")
