# Fidelity-weighted averaging of proxy models
# ===========================================
#
# Fidelity compares a proxy's public-set logits with the model it was
# distilled from: the mean per-sample cosine, rescaled to [0, 1].  Proxies
# that track their source closely get more say in the global average.

# %%
import torch

from mossfl.fidelity import aggregate, aggregation_weights, logit_fidelity
from mossfl.models import instantiate, small_tier
from mossfl.prom import ProxyModel

z = torch.randn(64, 10)
print("same logits      ", logit_fidelity(z, z)[0])
print("scaled logits    ", logit_fidelity(z, 3 * z)[0])
print("negated logits   ", logit_fidelity(z, -z)[0])
print("noisy logits     ", round(logit_fidelity(z, z + torch.randn(64, 10))[0], 3))

# %%
proxies = [ProxyModel(instantiate(small_tier(), seed=k), k) for k in range(3)]
fids = [0.9, 0.6, 0.3]
print("weights", [round(w, 3) for w in aggregation_weights(fids)])
print("sharpened", [round(w, 3) for w in aggregation_weights(fids, exponent=4)])
merged = aggregate(proxies, fids)
stack = torch.stack([p.model.flat() for p in proxies])
inside = bool(((merged.model.flat() >= stack.min(0).values - 1e-7)
               & (merged.model.flat() <= stack.max(0).values + 1e-7)).all())
print("global proxy stays inside the element-wise envelope:", inside)
