"""Pure NumPy ZNCC winner-take-all kernel (fallback for the compiled ``_zncc``).

Both backends share the exact contract of :func:`zncc_wta`; the test suite
checks they agree to rounding error.
"""

import numpy as np


def box_sum(a, r):
    """Sum over every full (2r+1)^2 window of ``a``; output shrinks by 2r per axis."""
    s = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    np.cumsum(a, axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])
    w = 2 * r + 1
    return s[w:, w:] - s[:-w, w:] - s[w:, :-w] + s[:-w, :-w]


def _update(best, bestk, prev, nxt, last, s, k):
    nxt[bestk == k - 1] = s[bestk == k - 1]
    better = s > best
    best[better] = s[better]
    bestk[better] = k
    prev[better] = last[better]
    nxt[better] = np.nan
    last[:] = s


def zncc_wta(left_pad, right_pad, mu_l, sd_l, mu_r, sd_r, radius, max_disp, min_sd=1e-4):
    """Stream ZNCC scores over disparities ``0..max_disp`` and keep the winners.

    ``left_pad``/``right_pad`` are grey images edge-padded by ``radius``;
    ``mu_*``/``sd_*`` are the un-padded H x W window means and standard
    deviations.  Left pixel ``x`` is compared with right pixel ``x - k``.

    Returns ``(left, right)`` where each is a tuple
    ``(best_k, best_score, score_at_k_minus_1, score_at_k_plus_1)``; missing
    neighbour scores are NaN and pixels never evaluated keep ``best_k = 0``
    with score ``-inf``.
    """
    h, w = mu_l.shape
    n = float((2 * radius + 1) ** 2)
    out = []
    state_l = [np.full((h, w), -np.inf), np.zeros((h, w), np.int64),
               np.full((h, w), np.nan), np.full((h, w), np.nan), np.full((h, w), np.nan)]
    state_r = [a.copy() for a in state_l]
    tex_l = sd_l >= min_sd
    tex_r = sd_r >= min_sd
    wp = left_pad.shape[1]
    for k in range(max_disp + 1):
        if k >= w:
            break
        prod = left_pad[:, k:] * right_pad[:, :wp - k]
        s_lr = box_sum(prod, radius)  # (h, w - k): left x = k..w-1
        ml, sl = mu_l[:, k:], sd_l[:, k:]
        mr, sr = mu_r[:, :w - k], sd_r[:, :w - k]
        ok = tex_l[:, k:] & tex_r[:, :w - k]
        with np.errstate(invalid="ignore", divide="ignore"):
            z = np.where(ok, (s_lr / n - ml * mr) / (sl * sr), 0.0)
        sub = [a[:, k:] for a in state_l]
        _update(*sub, z, k)
        sub = [a[:, :w - k] for a in state_r]
        _update(*sub, z, k)
    for st in (state_l, state_r):
        out.append((st[1], st[0], st[2], st[3]))
    return out[0], out[1]
