"""Bubble fractions of the pipeline schedules at unit action costs."""

from deskpar import pipeline as pl


def main():
    print(f"{'S':>2} {'m':>2}  " + "  ".join(f"{n:>16}" for n in pl.SCHEDULES))
    for S in (2, 4):
        for m in (1, 2, 4, 8):
            row = []
            for name in pl.SCHEDULES:
                V = 2 if name == "interleaved_1f1b" else 1
                frac = pl.bubble_analysis(pl.make_schedule(name, S, S * V, m))["bubble_fraction"]
                row.append(f"{str(frac):>16}")
            print(f"{S:>2} {m:>2}  " + "  ".join(row))
    print("\n1f1b, S=2, m=2:\n" + pl.make_schedule("1f1b", 2, 2, 2).dump())


if __name__ == "__main__":
    main()
