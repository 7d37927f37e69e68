"""Memorise 32 copy-and-shift pairs with a 2-layer D=64 model.

    python scripts/overfit_toy.py --seed 0
"""
import argparse
import time

from simmt.experiments import OverfitRecipe, overfit_toy


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--lr-scale", type=float, default=OverfitRecipe.lr_scale)
    ap.add_argument("--warmup", type=int, default=OverfitRecipe.warmup_steps)
    ap.add_argument("--batch-size", type=int, default=OverfitRecipe.batch_size)
    args = ap.parse_args()
    recipe = OverfitRecipe(lr_scale=args.lr_scale, warmup_steps=args.warmup,
                           batch_size=args.batch_size)
    t0 = time.time()
    ckpt, first = overfit_toy(recipe, args.seed)
    for h in ckpt.history[:: max(1, len(ckpt.history) // 10)]:
        print(f"epoch {h['epoch']:3d}  loss {h['train_loss']:.4f}  acc {h['val_accuracy']:.3f}")
    print(f"reached {recipe.target_accuracy:.0%} at epoch {first} in {time.time() - t0:.1f}s")


if __name__ == "__main__":
    main()
