# Three model tiers and their wire format
# =======================================

# %%
import tempfile
from pathlib import Path

import torch

from mossfl import checkpoint
from mossfl.models import forward_features, instantiate, large_tier, medium_tier, small_tier
from mossfl.orchestrator import transmission_bytes

for spec in (large_tier(), medium_tier(), small_tier()):
    print(f"{spec.name:<7} {spec.param_count:>7} params  {spec.weight_layer_count} weight layers  "
          f"taps {spec.feature_shapes()}")

# %%
# A forward pass returns the tapped intermediate features along with the
# logits.  Those taps are what weight-wise transfer matches against.

model = instantiate(small_tier(), seed=0)
features, logits = forward_features(model, torch.randn(4, 1, 8, 8))
for name, f in features.items():
    print(name, tuple(f.shape))
print("logits", tuple(logits.shape))

# %%
# Models travel as little-endian float32 blobs plus a JSON manifest; the
# byte count is what the round records charge per upload or download.

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "small.ckpt"
    n = checkpoint.save(path, model.weights, "small")
    name, weights = checkpoint.load(path)
    same = all(torch.equal(a, b) for a, b in zip(model.weights.values(), weights.values()))
    print(f"{n} bytes on disk, round trip exact: {same}, charged: {transmission_bytes(model)}")
