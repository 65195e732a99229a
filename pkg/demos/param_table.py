"""Per-stage decoder parameter counts and network totals for the three families."""

from mpunet.unetzoo import ArchSpec, audit, build, count_params

SPECS = [
    ArchSpec("unet", unet_sqrt2_scale=True),
    ArchSpec("unet2p"),
    ArchSpec("unet2p", deep_supervision=True),
    ArchSpec("unet3p"),
    ArchSpec("unet3p", deep_supervision=True),
]


def main():
    for spec in SPECS:
        g = build(spec, materialize=False)   # shapes only, no weights allocated
        total, _ = count_params(g)
        print(f"{spec.name:12s} total {total / 1e6:6.2f}M")
        for row in audit(spec, g):
            print(f"    stage {row['stage']}: closed form {row['formula']:>11,d}  "
                  f"graph {row['graph']:>11,d}")


if __name__ == "__main__":
    main()
