"""Signal truncation and pairwise smoothing."""

import logging

import numpy as np
import pandas as pd

from .errors import DataError

log = logging.getLogger(__name__)


def _profile(values):
    """Pairwise means of consecutive non-overlapping pairs; an odd tail is kept."""
    v = np.asarray(values, dtype=float)
    k = v.size // 2
    out = v[: 2 * k].reshape(k, 2).mean(axis=1)
    if v.size % 2:
        out = np.append(out, v[-1])
    return out


def smooth_grid(heights):
    """Heights after pairwise smoothing: pair midpoints plus the odd tail."""
    return _profile(heights)


def preprocess_signals(signals, max_height=None, smooth=False):
    """Truncate signals above ``max_height`` and optionally average pairs.

    Parameters
    ----------
    signals : DataFrame
        Columns ``s1, s2, x, z``; every location must share one height grid.
    max_height : float, optional
        Heights strictly above this are dropped.
    smooth : bool
        Replace consecutive non-overlapping pairs by their means, with the
        heights set to the pair midpoints.

    Returns
    -------
    DataFrame
        Processed signals, with ``odd_tail`` in ``attrs`` when the last bin
        holds a single unaveraged value.
    """
    missing = {"s1", "s2", "x", "z"} - set(signals.columns)
    if missing:
        raise DataError(f"signal table lacks columns {sorted(missing)}")
    df = signals
    if max_height is not None:
        df = df[df["x"] <= max_height]
        dropped = set(map(tuple, signals[["s1", "s2"]].drop_duplicates().to_numpy())) - set(
            map(tuple, df[["s1", "s2"]].drop_duplicates().to_numpy())
        )
        if dropped:
            loc = sorted(dropped)[0]
            raise DataError(f"signal at location {loc} is empty after truncation at {max_height}")
    wide = df.pivot_table(index=["s1", "s2"], columns="x", values="z", aggfunc="first", sort=True)
    if wide.isna().any().any():
        raise DataError("signals do not share a common height grid")
    heights = wide.columns.to_numpy(dtype=float)
    Z = wide.to_numpy(dtype=float)
    odd = False
    if smooth:
        odd = heights.size % 2 == 1
        if odd:
            log.warning("odd number of heights (%d); last value kept unaveraged", heights.size)
        heights = smooth_grid(heights)
        Z = np.apply_along_axis(_profile, 1, Z)
    locs = wide.index.to_frame(index=False).to_numpy(dtype=float)
    out = pd.DataFrame(
        {
            "s1": np.repeat(locs[:, 0], heights.size),
            "s2": np.repeat(locs[:, 1], heights.size),
            "x": np.tile(heights, locs.shape[0]),
            "z": Z.ravel(),
        }
    )
    out.attrs["odd_tail"] = odd
    return out
