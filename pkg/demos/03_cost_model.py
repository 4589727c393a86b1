"""Counting FLOPs and parameters of the I3D ResNet backbones.

Architectures are plain JSON (see src/segagg/archs). One multiply-add counts as
one FLOP; batch norm, ReLU and pooling are free.

Run: python3 demos/03_cost_model.py
"""

from segagg import DsaConfig, arch_cost, dsa_overhead, load_arch
from segagg.cost import every_other_block, report_render, stage_output_sizes

r50 = load_arch("i3d_r50")
r18 = load_arch("i3d_r18")

# %% Stage output sizes at the declared 4 x 224^2 input.
for stage, size in stage_output_sizes(r50, 4, 224).items():
    print(f"{stage:6s} {size}")

# %% One 8-frame clip versus four 4-frame snippets.
single = arch_cost(r50, 8, 224)
clip = arch_cost(r50, 4, 224, snippets=4)
print(f"R50 8x1x224^2: {single.gflops:.1f} GFLOPs")
print(f"R50 4x4x224^2: {clip.gflops:.1f} GFLOPs")
print("conv MACs ratio:", clip.conv_macs / single.conv_macs)

# %% Parameters of the ResNet-18 variant with a 200-way classifier.
print(f"R18, 200 classes: {arch_cost(r18, 4, 224, num_classes=200).total_params / 1e6:.2f}M params")

# %% DSA in every other block of res3 and res4.
placement = every_other_block(r50, ["res3", "res4"])
over = dsa_overhead(r50, placement, DsaConfig(channels=1), 4, 224)
print(report_render(over))
print(f"extra FLOPs {100 * over.total_macs / clip.total_macs:.4f}%, "
      f"extra params {100 * over.total_params / clip.total_params:.4f}%")
