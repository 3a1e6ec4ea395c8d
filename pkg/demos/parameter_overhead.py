"""
How much does the structure branch cost?
========================================

The structure head sees only an h x h similarity matrix, so its size depends
on the feature-map height and the number of identities, not on the backbone.
Parameter counts below come from the architecture description alone.
"""

from rldnet.model import ModelConfig, ResNetSpec, count_params, resnet50_reference

# ResNet-50 at 256x128 input gives an 8x4 map: the head sees a 64-entry matrix.
ref = count_params(resnet50_reference(num_classes=751))
print(f"ResNet-50, 751 ids: baseline {ref.baseline_params:,}  structure branch {ref.structure_branch_params:,}  "
      f"overhead {100 * ref.overhead_ratio:.2f}%")

for depth in (18, 34, 50, 101):
    print(f"ResNet-{depth} backbone: {ResNetSpec.resnet(depth).param_count():,} parameters")

# The desk-scale network used for the synthetic experiments.
for k in (20, 751):
    rep = count_params(ModelConfig(num_classes=k))
    print(f"desk network, {k} ids: baseline {rep.baseline_params:,}  branch {rep.structure_branch_params:,}  "
          f"overhead {100 * rep.overhead_ratio:.1f}%")
