"""
Attention cost of window querying
=================================

ViT tokens query the aligned CNN tokens only inside ``w x w`` windows.  On a
16x16 token grid every query scores ``w*w`` keys, so the score tensor shrinks
by ``w^2 / 256`` relative to full cross attention.
"""
import numpy as np

from dqnet.autograd import Tensor
from dqnet.fusion import RBQ, rbq_cost
from dqnet.vit import TokenGrid

rng = np.random.default_rng(0)
dim, heads, side = 32, 4, 16
z = TokenGrid(Tensor(rng.standard_normal((1, side * side, dim)).astype(np.float32)), side, side)
y = TokenGrid(Tensor(rng.standard_normal((1, side * side, dim)).astype(np.float32)), side, side)

print(f"{'w':>4} {'scores':>8} {'ratio':>9} {'buffer':>10} {'mult-adds':>10}")
full = None
for w in (1, 2, 4, 8, 16):
    rbq = RBQ(dim, heads, w, rng)
    rbq(z, y)
    n = rbq.last_probe["score_elements"]
    full = full or n * side * side // (w * w)
    cost = rbq_cost((side, side), w, dim)
    print(f"{w:>4} {n:>8} {f'{n * 256 // full}/256':>9} {rbq.last_probe['score_bytes']:>9}B {cost.multiply_adds:>10}")
