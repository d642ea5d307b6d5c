"""
The four generator/cycle ablations
==================================

Explicit vs implicit artifact modelling, with and without the artifact
re-generator G_r, trained with the same seed and budget. Budget is kept
small here; raise ``max_steps`` for steadier numbers.
"""

from unaen.data import build_dataset
from unaen.kspace import MotionSpec, PhantomSpec, render_phantom
from unaen.metrics import evaluate_set
from unaen.models import ABLATION_LABELS, DiscriminatorConfig, GeneratorConfig, ModelConfig
from unaen.training import TrainConfig, run_ablation

images = [render_phantom(PhantomSpec(size=64), seed=i) for i in range(200)]
ds = build_dataset(images, MotionSpec(ts_eg=3), patch=64, seed=0)

base_model = ModelConfig(
    generator=GeneratorConfig(1, 2, 16),
    discriminator=DiscriminatorConfig(16, 4),
)
base_train = TrainConfig(
    epochs=50, lr=1e-4, disc_lr=3e-3, lr_halving_period=10, disc_warmup_steps=60, max_steps=300
)

baseline = evaluate_set(zip(ds.test_corrupt, ds.test_clean))
print(f"{'corrupted input':<20} SSIM {baseline.ssim:.4f}  PSNR {baseline.psnr:.2f}")
for row in run_ablation(ds, base_model, base_train):
    print(f"{ABLATION_LABELS[row.ablation]:<20} SSIM {row.ssim:.4f}  PSNR {row.psnr:.2f}")
