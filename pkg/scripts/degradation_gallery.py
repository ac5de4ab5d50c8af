"""Write one clean synthetic image and each degradation of it as PNGs."""

import argparse
from pathlib import Path

from mddaformer.data import KINDS, DegradeSpec, degrade, synthetic_image
from mddaformer.imageio import save_image
from mddaformer.metrics import psnr


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="gallery")
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    clean = synthetic_image(args.seed, args.size, args.size)
    save_image(clean, out / "clean.png")
    for kind in KINDS:
        d = degrade(clean, DegradeSpec(kind=kind, seed=args.seed))
        save_image(d, out / f"{kind}.png")
        print(f"{kind:15s} {psnr(d, clean):6.2f} dB")


if __name__ == "__main__":
    main()
