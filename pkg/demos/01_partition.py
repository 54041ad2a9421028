# Splitting a labelled dataset across devices
# ===========================================
#
# Every experiment starts by dealing samples out to simulated devices.  Each
# device draws its own class mixture from a symmetric Dirichlet; a small
# concentration gives each device only a couple of dominant classes.

# %%
import numpy as np

from mossfl.data import (dirichlet_partition, label_entropy_bits, load_digits_dataset,
                         sample_public)

digits = load_digits_dataset()
print(len(digits), "samples,", digits.num_classes, "classes, input", digits.input_shape)

# %%
# Nine devices with 100 samples each, at two concentrations.

for alpha in (0.1, 100.0):
    part = dirichlet_partition(digits, n_devices=9, alpha=alpha, samples_per_device=100, seed=0)
    bits = [label_entropy_bits(digits, shard) for shard in part.device_shards]
    print(f"alpha={alpha:<6} median label entropy {np.median(bits):.2f} bits (max {np.log2(10):.2f})")

# %%
# The class histogram of the first three devices at alpha=0.1.

part = dirichlet_partition(digits, 9, 0.1, 100, seed=0)
labels = digits.labels_np()
for k, shard in enumerate(part.device_shards[:3]):
    print(k, np.bincount(labels[digits.rows(shard)], minlength=10))

# %%
# The server-side public set comes from whatever the devices did not take.

taken = [i for shard in part.device_shards for i in shard]
part.public_ids = sample_public(digits, taken, 100, seed=1)
part.validate(digits, 100)
print("public ids overlap device shards:", bool(set(part.public_ids) & set(taken)))
print(part.to_json()[:120], "...")
