"""Pure-numpy implementations of the hot loops.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
"""
import numpy as np


def build_histogram(binned, rows, g, h, features, n_bins):
    """Accumulate (sum g, sum h, count) per (feature, bin) over ``rows``.

    ``binned`` is feature-major: shape (n_features, n_samples), uint8.
    Returns an array of shape (len(features), n_bins, 3).
    """
    n_feat = len(features)
    out = np.zeros((n_feat, n_bins, 3), dtype=np.float64)
    if n_feat == 0 or len(rows) == 0:
        return out
    sub = binned[features][:, rows].astype(np.intp)
    sub += (np.arange(n_feat, dtype=np.intp) * n_bins)[:, None]
    flat = sub.ravel()
    size = n_feat * n_bins
    gr = np.tile(g[rows], n_feat)
    hr = np.tile(h[rows], n_feat)
    out[:, :, 0] = np.bincount(flat, weights=gr, minlength=size).reshape(n_feat, n_bins)
    out[:, :, 1] = np.bincount(flat, weights=hr, minlength=size).reshape(n_feat, n_bins)
    out[:, :, 2] = np.bincount(flat, minlength=size).reshape(n_feat, n_bins)
    return out


def split_gains(hist, n_bins, l2, min_samples_leaf):
    """Gain of every (feature, threshold); invalid thresholds get -inf."""
    cum = np.cumsum(hist, axis=1)
    total = cum[:, -1:, :]
    left = cum[:, :-1, :]
    right = total - left
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = (
            left[..., 0] ** 2 / (left[..., 1] + l2)
            + right[..., 0] ** 2 / (right[..., 1] + l2)
            - total[..., 0] ** 2 / (total[..., 1] + l2)
        )
    t = np.arange(hist.shape[1] - 1)
    valid = (
        (left[..., 2] >= min_samples_leaf)
        & (right[..., 2] >= min_samples_leaf)
        & (t[None, :] < (np.asarray(n_bins)[:, None] - 1))
    )
    return np.where(valid, gain, -np.inf)


def find_best_split(hist, n_bins, l2, min_samples_leaf):
    """(feature row, threshold, gain) of the best valid split, first maximum on ties.

    Returns (-1, -1, -inf) when no threshold is valid.
    """
    if hist.shape[0] == 0 or hist.shape[1] < 2:
        return -1, -1, -np.inf
    gains = split_gains(hist, n_bins, l2, min_samples_leaf)
    flat = int(gains.argmax())
    f, t = divmod(flat, gains.shape[1])
    best = float(gains[f, t])
    if best == -np.inf:
        return -1, -1, best
    return f, t, best


def _walk(feature, threshold, left, right, values, X, binned_input):
    n = X.shape[0]
    node = np.zeros(n, dtype=np.intp)
    active = np.arange(n)
    while active.size:
        f = feature[node[active]]
        internal = f >= 0
        active = active[internal]
        if not active.size:
            break
        cur = node[active]
        x = X[active, feature[cur]]
        go_left = x <= threshold[cur]
        node[active] = np.where(go_left, left[cur], right[cur])
    return values[node]


def predict_raw(feature, threshold_value, left, right, value, X):
    """Evaluate one tree on a float matrix (n_samples, n_features)."""
    return _walk(feature, threshold_value, left, right, value, X, False)


def predict_binned(feature, threshold_bin, left, right, value, binned):
    """Evaluate one tree on feature-major binned data (n_features, n_samples)."""
    return _walk(feature, threshold_bin, left, right, value, binned.T, True)


def byte_entropy_counts(data, window, stride):
    """16x16 (entropy bin, byte>>4) counts, one increment per byte per window."""
    buf = np.frombuffer(bytes(data), dtype=np.uint8)
    out = np.zeros((16, 16), dtype=np.int64)
    n = buf.size
    start = 0
    while start < n:
        end = min(start + window, n)
        block = buf[start:end]
        c = np.bincount(block, minlength=256)
        p = c[c > 0] / block.size
        ent = float(-(p * np.log2(p)).sum())
        hbin = min(int(ent * 2), 15)
        out[hbin] += np.bincount(block >> 4, minlength=16)
        if end >= n:
            break
        start += stride
    return out
