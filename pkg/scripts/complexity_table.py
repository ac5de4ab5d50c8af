"""Parameter / FLOP table for the presets and the three block layouts."""

import argparse

from mddaformer.complexity import FLOP_CONVENTION, tally
from mddaformer.network import ModelConfig

REFERENCE = {("full", "CTC"): (25.92, 67.38), ("small", "CTC"): (16.49, 39.50),
             ("small", "CCC"): (None, 33.38), ("small", "TTT"): (None, 59.11)}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--res", type=int, default=256)
    ap.add_argument("--by-stage", action="store_true")
    args = ap.parse_args()
    print(f"# {FLOP_CONVENTION}; input 1x3x{args.res}x{args.res}")
    print(f"{'preset':7s} {'layout':6s} {'params (M)':>11s} {'GFLOPs':>8s}  reference (M / G)")
    for preset in ("full", "small", "tiny"):
        for layout in ("CTC", "CCC", "TTT", "TCT"):
            t = tally(ModelConfig.preset(preset, stage_types=layout), args.res, args.res)
            ref = REFERENCE.get((preset, layout))
            ref_s = "" if ref is None else " / ".join("-" if v is None else f"{v:.2f}" for v in ref)
            print(f"{preset:7s} {layout:6s} {t.params / 1e6:11.3f} {t.flops / 1e9:8.2f}  {ref_s}")
            if args.by_stage:
                for name, f in t.by_stage.items():
                    print(f"{'':16s}{name:10s} {f / 1e9:8.3f}")


if __name__ == "__main__":
    main()
