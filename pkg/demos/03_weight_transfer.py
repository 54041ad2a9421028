# Moving knowledge from one architecture into another
# ===================================================
#
# A meta-network pair decides, for every (source tap, target tap)
# combination, how strongly the target layer should imitate the source layer
# (the location signal) and which channels matter (the degree signal).  The
# target is trained on cross-entropy plus the location-weighted feature loss.

# %%
import torch

from mossfl.data import load_digits_dataset
from mossfl.models import TrainingHyperparams, evaluate, instantiate, large_tier, local_train, small_tier
from mossfl.wire import (MetaNetworkPair, measure_transfer, transfer_location, wire_transfer)

torch.manual_seed(0)
digits = load_digits_dataset()
train = digits.view(range(0, 600))
public = digits.view(range(600, 800))
test = digits.view(range(800, len(digits)))

hp = TrainingHyperparams(learning_rate=0.05, local_epochs=10)
teacher = local_train(instantiate(large_tier(), seed=0), train, hp, seed=0)
student = instantiate(small_tier(), seed=1)
print("teacher accuracy", round(evaluate(teacher, test), 3), " fresh student", round(evaluate(student, test), 3))

# %%
meta = MetaNetworkPair(large_tier(), small_tier())
print(len(meta.pairs), "candidate tap pairs:", meta.pairs[:3], "...")
before = measure_transfer(teacher, student, meta, public)
moved, meta, trace = wire_transfer(teacher, student, meta, public, epochs=5,
                                   hp=TrainingHyperparams(0.05), seed=0)
for epoch, bundle in enumerate(trace):
    print(f"epoch {epoch}: final {bundle.l_final:.3f} = ce {bundle.l_ce:.3f} + location {bundle.l_location:.3f}")
print("student accuracy after transfer", round(evaluate(moved, test), 3))

# %%
# The learned location rows: each source tap spreads a unit of attention
# over the student's taps.

with torch.no_grad():
    feats, _ = teacher.net(public.tensors()[0])
    loc = transfer_location(meta, feats)
for (m, n), v in loc.items():
    print(f"{m:>5} -> {n:<6} {v.item():.3f}")
