"""Significance tests and box summaries on two made-up sets of per-subject Dice scores."""

import numpy as np

from mpunet.evalstats import box_stats, paired_t_test, wilcoxon_test


def main(seed=0):
    rng = np.random.default_rng(seed)
    a = np.clip(rng.normal(0.86, 0.03, 8), 0, 1)
    b = np.clip(a + rng.normal(0.01, 0.01, 8), 0, 1)
    print(f"paired t-test         p = {paired_t_test(a, b):.4f}")
    print(f"Wilcoxon rank-sum     p = {wilcoxon_test(a, b, 'rank_sum'):.4f}")
    print(f"Wilcoxon signed-rank  p = {wilcoxon_test(a, b, 'signed_rank'):.4f}")
    for name, s in (("a", a), ("b", b)):
        box = box_stats(s)
        print(f"{name}: median {box['median']:.3f}  IQR {box['iqr']:.3f}  "
              f"whiskers [{box['whisker_low']:.3f}, {box['whisker_high']:.3f}]  "
              f"outliers {box['outliers']}")


if __name__ == "__main__":
    main()
