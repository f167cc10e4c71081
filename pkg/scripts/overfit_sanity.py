"""Overfit a handful of phantoms without augmentation and report training DSC.

    python scripts/overfit_sanity.py --images 8 --epochs 500
"""
import argparse
import time

from veinseg.data_io import generate_dataset
from veinseg.network import NetConfig
from veinseg.trainer import TrainConfig, mean_dsc, prepare_eval, prepare_masks, train_supervised


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--images", type=int, default=8)
    ap.add_argument("--epochs", type=int, default=500, help="cap on BCE + focal epochs")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--width-div", type=int, default=8)
    ap.add_argument("--cardinality", type=int, default=4)
    args = ap.parse_args()

    entries = generate_dataset(args.seed, subjects=args.images, images_per_subject=1, labeled_per_subject=1)
    images, masks = [e.image for e in entries], [e.mask for e in entries]
    bce = min(100, args.epochs // 5)
    cfg = TrainConfig(net=NetConfig(width_div=args.width_div, cardinality=args.cardinality), augment=False,
                      lr_bce=1e-2, lr_focal=5e-3, bce_max_epochs=bce, focal_max_epochs=args.epochs - bce,
                      patience=50)
    t0 = time.perf_counter()
    res = train_supervised(images, masks, cfg, seed=args.seed)
    epochs = res.history["bce"]["epochs"] + res.history["focal"]["epochs"]
    score = mean_dsc(res.model, prepare_eval(images), prepare_masks(masks), cfg)
    print(f"training DSC {score:.4f} after {epochs} epochs in {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
