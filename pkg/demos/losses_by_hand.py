"""CTC and RNN-T likelihoods, computed two ways.

The dynamic programs in ``fourdeco.losses`` sum over every alignment of a
label sequence in O(T*S) time. Here the same sums are formed by listing the
alignments one by one, for a few tiny cases.
"""
import itertools
import math

import numpy as np

from fourdeco import losses
from fourdeco.core import collapse, AlignmentSeq, log_softmax

rng = np.random.default_rng(1)

print("CTC: T=3 frames, symbols {blank, a, b}, target 'a b'")
x = rng.normal(size=(3, 3))
lp = log_softmax(x)
target = (1, 2)
total = 0.0
for path in itertools.product(range(3), repeat=3):
    if collapse(AlignmentSeq(path)).ids == target:
        p = math.exp(sum(lp[t, z] for t, z in enumerate(path)))
        total += p
        print(f"  alignment {path}  p = {p:.6f}")
print(f"  sum over alignments        = {total:.12f}")
print(f"  exp(-ctc_loss)             = {math.exp(-losses.ctc_loss(x, target)):.12f}")

print("\nRNN-T: T=2 frames, target 'a' -> paths interleave one label with T blanks")
lat = rng.normal(size=(2, 2, 3))  # (frame, labels emitted so far, symbol)
lpl = lat - np.log(np.exp(lat).sum(axis=-1, keepdims=True))
paths = {
    "a φ φ": lpl[0, 0, 1] + lpl[0, 1, 0] + lpl[1, 1, 0],
    "φ a φ": lpl[0, 0, 0] + lpl[1, 0, 1] + lpl[1, 1, 0],
}
for name, v in paths.items():
    print(f"  path {name}  p = {math.exp(v):.6f}")
print(f"  sum over paths             = {sum(math.exp(v) for v in paths.values()):.12f}")
print(f"  exp(-rnnt_loss)            = {math.exp(-losses.rnnt_loss(lat, (1,))):.12f}")

print("\nGradients are softmax minus expected symbol occupancy; rows sum to zero:")
g = losses.ctc_grad(x, target)
print(np.array2string(g, precision=4), " max |row sum|:", np.abs(g.sum(axis=1)).max())
