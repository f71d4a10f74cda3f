"""The three attack losses on inputs small enough to check with a pencil."""
import math

import numpy as np

from vlapatch.actions import DEFAULT_SPEC, detokenize, tokenize
from vlapatch.objectives import loss_tma, loss_uada, upa_value

J = DEFAULT_SPEC.bins
centers = DEFAULT_SPEC.centers()[0]
print("bin width", DEFAULT_SPEC.width[0], "; centers of bins 0, 127, 128, 255:", centers[[0, 127, 128, 255]])
print("tokenize(zero action) ->", tokenize(np.zeros(7))[0], "; back to", detokenize(tokenize(np.zeros(7)))[0])

# uniform head: soft expectation sits at the middle of the bin axis, so for a
# ground truth in bin 0 the discrepancy is 127.5 bins of a possible 255
uniform = np.zeros((7, J))
print("UADA, uniform prediction, gt bin 0:", loss_uada(uniform, np.zeros(7, dtype=int), mask=[0]), "(1 / (127.5/255) = 2)")

y = np.array([1.0, 0.0, 0.0])
print("UPA, prediction opposite the reference:", upa_value(-y, y), "(0.8 * -1 + 0.2 / 2 = -0.7)")
print("UPA, orthogonal prediction:", upa_value(np.array([0.0, 1.0, 0.0]), y), "(0.2 / sqrt 2)")

print("TMA, uniform prediction:", loss_tma(uniform, [0.0], mask=[0]), "= ln 256 =", math.log(256))
