"""Pure-Python pool-adjacent-violators, the fallback for the compiled kernel."""

import numpy as np


def pav_blocks(y):
    """Nondecreasing least-squares fit of ``y`` with unit weights.

    Returns ``(fit, block_id)`` where ``block_id[i]`` labels the pooled
    block containing ``i`` (labels are 0..n_blocks-1, left to right).
    """
    sums = []
    lens = []
    for v in np.asarray(y, dtype=np.float64).tolist():
        sums.append(v)
        lens.append(1)
        # compare means by cross-multiplication, same as the compiled kernel
        while len(sums) > 1 and sums[-2] * lens[-1] > sums[-1] * lens[-2]:
            s = sums.pop()
            c = lens.pop()
            sums[-1] += s
            lens[-1] += c
    fit = np.repeat([s / c for s, c in zip(sums, lens)], lens)
    ids = np.repeat(np.arange(len(lens), dtype=np.int64), lens)
    return fit.astype(np.float64), ids
