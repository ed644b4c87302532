"""Independent oracles used by the test-suite.

Nothing here imports the package's own masking or autodiff code paths.
"""

import numpy as np


def pseudocode_adaptive_mask(m1, loss, mask_ratio, overlap_ratio):
    """Line-by-line executor of the published adaptive-masking pseudocode.

    Plain Python lists, one row at a time; argsort is Python's stable
    ``sorted`` over indices.
    """
    out = []
    for row_m1, row_loss in zip(np.atleast_2d(m1).tolist(), np.atleast_2d(loss).tolist()):
        L = len(row_m1)
        len_keep = int(L * (1 - mask_ratio))
        loss_len = int(L - len_keep * 2)
        overlap_len = int(len_keep * overlap_ratio)
        masked_loss = [row_loss[i] * row_m1[i] for i in range(L)]
        loss_sorted = sorted(range(L), key=lambda i: masked_loss[i])
        n_sel = loss_len + overlap_len
        loss_ids = loss_sorted[L - n_sel:] if n_sel else []
        m2 = [0 if v == 1 else 1 for v in row_m1]
        for i in loss_ids:
            m2[i] = 1
        m1_ids = sorted(range(L), key=lambda i: row_m1[i])[:overlap_len]
        for i in m1_ids:
            m2[i] = 0
        out.append(m2)
    return np.array(out, dtype=np.int8)


def finite_difference_check(loss_fn, arrays, n_coords, rng, h=1e-6, min_grad=1e-6):
    """Compare float32 reverse-mode gradients against float64 central differences.

    ``loss_fn(tensors)`` builds a scalar loss from a dict of Tensors.
    ``arrays`` maps names to float64 arrays.  Returns the worst relative error
    over ``n_coords`` randomly chosen coordinates with ``|analytic| >= min_grad``.
    """
    from dama import tensor as T

    leaves = {k: T.Tensor(np.asarray(v, dtype=np.float32), requires_grad=True) for k, v in arrays.items()}
    loss = loss_fn(leaves)
    T.backward(loss)
    grads = {k: np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64)
             for k, t in leaves.items()}

    candidates = [(k, i) for k in arrays for i in range(np.asarray(arrays[k]).size)
                  if abs(grads[k].reshape(-1)[i]) >= min_grad]
    assert candidates, "no coordinate with a non-negligible gradient"
    picks = rng.choice(len(candidates), size=min(n_coords, len(candidates)), replace=False)

    def f64(perturbed):
        with T.no_grad():
            ts = {k: T.Tensor(np.asarray(v, dtype=np.float64)) for k, v in perturbed.items()}
            return float(loss_fn(ts).data)

    worst = 0.0
    for p in picks:
        k, i = candidates[p]
        plus = {n: np.array(v, dtype=np.float64, copy=True) for n, v in arrays.items()}
        minus = {n: np.array(v, dtype=np.float64, copy=True) for n, v in arrays.items()}
        plus[k].reshape(-1)[i] += h
        minus[k].reshape(-1)[i] -= h
        numeric = (f64(plus) - f64(minus)) / (2 * h)
        analytic = grads[k].reshape(-1)[i]
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
    return worst
