"""Pure-Python upper hull used when the compiled kernel is unavailable."""
import numpy as np


def upper_hull(x, y):
    """Indices of the least concave majorant's vertices (monotone chain, collinear points kept).

    x must be strictly increasing.
    """
    n = len(x)
    hull = []
    for k in range(n):
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            cross = (x[j] - x[i]) * (y[k] - y[i]) - (y[j] - y[i]) * (x[k] - x[i])
            if cross > 0:
                hull.pop()
            else:
                break
        hull.append(k)
    return np.asarray(hull, dtype=np.intp)


def upper_hulls(x, Y):
    """Upper hull of every row of Y over the shared abscissae x."""
    return [upper_hull(x, Y[r]) for r in range(Y.shape[0])]
