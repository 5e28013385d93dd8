"""How region scores gate the image grid, and what the matching score contributes."""

import torch

from mmkp import NoiseFilter, filter_image

torch.manual_seed(0)
D = torch.float64
nf = NoiseFilter(d1=8, d2=4, n_heads=2, d_ffn=8).to(D)

text = torch.randn(1, 8, dtype=D)
grid = torch.randn(1, 49, 8, dtype=D)

match = nf.match_score(text, grid)
print("matching score:", float(match.s_c))

state = nf.correlation_scores(text, grid, match.s_c)
print(state.grid()[0].detach().numpy().round(2))          # 7x7 region scores

gated, gate = filter_image(state.A, grid)
print("gate range:", float(gate.min()), float(gate.max()))

# zero scores keep exactly half of every region
half, _ = filter_image(torch.zeros(1, 49, dtype=D), grid)
print(torch.equal(half, 0.5 * grid))

# without the score network and with no text projection the scores are just s_c
nf.ffn_bypass = True
with torch.no_grad():
    nf.W_T.weight.zero_()
flat = nf.correlation_scores(text, grid, match.s_c).A
print(bool((flat == match.s_c).all()))
