"""Independent brute-force reference implementations used by the tests.

Everything here is deliberately low-tech (python loops, math module, no
shared code with the package) so a bug in the package cannot hide in its
own oracle.
"""

import math


def percentile_linear(values, q):
    """Linear-interpolation percentile over a sequence."""
    xs = sorted(float(v) for v in values)
    n = len(xs)
    if n == 1:
        return xs[0]
    rank = (q / 100.0) * (n - 1)
    lo = int(math.floor(rank))
    hi = min(lo + 1, n - 1)
    frac = rank - lo
    return xs[lo] * (1 - frac) + xs[hi] * frac


def histogram_probs(values, bins=32):
    vals = [float(v) for v in values]
    lo, hi = min(vals), max(vals)
    if lo == hi:
        return [1.0]
    width = (hi - lo) / bins
    counts = [0] * bins
    for v in vals:
        idx = int((v - lo) / width)
        if idx >= bins:  # the maximum lands in the last bin
            idx = bins - 1
        counts[idx] += 1
    return [c / len(vals) for c in counts]


def first_order_oracle(values, voxel_volume=1.0):
    """All 19 first-order features by direct loops."""
    vals = [float(v) for v in values]
    n = len(vals)
    mean = sum(vals) / n
    energy = sum(v * v for v in vals)
    m2 = sum((v - mean) ** 2 for v in vals) / n
    m3 = sum((v - mean) ** 3 for v in vals) / n
    m4 = sum((v - mean) ** 4 for v in vals) / n
    p10 = percentile_linear(vals, 10)
    p25 = percentile_linear(vals, 25)
    p50 = percentile_linear(vals, 50)
    p75 = percentile_linear(vals, 75)
    p90 = percentile_linear(vals, 90)
    robust = [v for v in vals if p10 <= v <= p90]
    if robust:
        rmean = sum(robust) / len(robust)
        rmad = sum(abs(v - rmean) for v in robust) / len(robust)
    else:
        rmad = 0.0
    probs = [p for p in histogram_probs(vals) if p > 0]
    return {
        "Energy": energy,
        "TotalEnergy": voxel_volume * energy,
        "Entropy": -sum(p * math.log2(p) for p in probs),
        "Minimum": min(vals),
        "10Percentile": p10,
        "90Percentile": p90,
        "Maximum": max(vals),
        "Mean": mean,
        "Median": p50,
        "InterquartileRange": p75 - p25,
        "Range": max(vals) - min(vals),
        "MeanAbsoluteDeviation": sum(abs(v - mean) for v in vals) / n,
        "RobustMeanAbsoluteDeviation": rmad,
        "RootMeanSquared": math.sqrt(energy / n),
        "StandardDeviation": math.sqrt(m2),
        "Skewness": (m3 / m2**1.5) if m2 > 0 else 0.0,
        "Kurtosis": (m4 / m2**2) if m2 > 0 else 0.0,
        "Variance": m2,
        "Uniformity": sum(p * p for p in probs),
    }


def surface_area_oracle(mask, spacing):
    """Count exposed 6-neighborhood faces voxel by voxel."""
    D = len(mask)
    H = len(mask[0])
    W = len(mask[0][0])
    sz, sy, sx = spacing
    face = {0: sy * sx, 1: sz * sx, 2: sz * sy}
    total = 0.0
    for z in range(D):
        for y in range(H):
            for x in range(W):
                if not mask[z][y][x]:
                    continue
                for axis, (dz, dy, dx) in enumerate(
                    [(1, 0, 0), (0, 1, 0), (0, 0, 1)]
                ):
                    for sign in (-1, 1):
                        nz, ny, nx = z + sign * dz, y + sign * dy, x + sign * dx
                        covered = (
                            0 <= nz < D and 0 <= ny < H and 0 <= nx < W and mask[nz][ny][nx]
                        )
                        if not covered:
                            total += face[axis]
    return total


def surface_voxels_oracle(mask):
    D = len(mask)
    H = len(mask[0])
    W = len(mask[0][0])
    out = []
    for z in range(D):
        for y in range(H):
            for x in range(W):
                if not mask[z][y][x]:
                    continue
                exposed = False
                for dz, dy, dx in [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]:
                    nz, ny, nx = z + dz, y + dy, x + dx
                    if not (0 <= nz < D and 0 <= ny < H and 0 <= nx < W and mask[nz][ny][nx]):
                        exposed = True
                        break
                if exposed:
                    out.append((z, y, x))
    return out


def max_pairwise_oracle(points):
    best = 0.0
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = math.sqrt(sum((a - b) ** 2 for a, b in zip(points[i], points[j])))
            best = max(best, d)
    return best


def otsu_oracle(values, bin_count=32):
    """Best split among bin edges by direct two-class variance on the data."""
    vals = sorted(float(v) for v in values)
    lo, hi = vals[0], vals[-1]
    width = (hi - lo) / bin_count
    best_t, best_score = lo, -1.0
    for k in range(1, bin_count):
        t = lo + k * width
        low = [v for v in vals if v <= t]
        high = [v for v in vals if v > t]
        if not low or not high:
            continue
        w0 = len(low) / len(vals)
        w1 = len(high) / len(vals)
        mu0 = sum(low) / len(low)
        mu1 = sum(high) / len(high)
        score = w0 * w1 * (mu0 - mu1) ** 2
        if score > best_score:
            best_score, best_t = score, t
    return best_t


def auc_oracle(labels, scores):
    """Pairwise positive-vs-negative comparison with half credit for ties."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def youden_oracle(labels, scores):
    """Brute-force argmax of sensitivity + specificity - 1 over midpoints.

    Candidates are midpoints of adjacent sorted unique scores plus 0 and 1;
    ties resolve to the smallest threshold.
    """
    uniq = sorted(set(scores))
    candidates = [0.0] + [(a + b) / 2.0 for a, b in zip(uniq, uniq[1:])] + [1.0]
    npos = sum(1 for y in labels if y == 1)
    nneg = len(labels) - npos
    best_t, best_j = None, -2.0
    for t in sorted(candidates):
        tp = sum(1 for y, s in zip(labels, scores) if y == 1 and s >= t)
        tn = sum(1 for y, s in zip(labels, scores) if y == 0 and s < t)
        sens = tp / npos if npos else 0.0
        spec = tn / nneg if nneg else 0.0
        j = sens + spec - 1.0
        if j > best_j + 1e-12:
            best_j, best_t = j, t
    return best_t, best_j


def t_density(x, dof):
    return (
        math.gamma((dof + 1) / 2.0)
        / (math.sqrt(dof * math.pi) * math.gamma(dof / 2.0))
        * (1.0 + x * x / dof) ** (-(dof + 1) / 2.0)
    )


def t_sf_oracle(t, dof, steps=200_000):
    """P(T > t) by Simpson quadrature of the t density on [0, t] (t >= 0)."""
    if t < 0:
        return 1.0 - t_sf_oracle(-t, dof, steps)
    if t == 0:
        return 0.5
    # integrate 0..t, subtract from the half mass above 0
    h = t / steps
    acc = t_density(0.0, dof) + t_density(t, dof)
    for i in range(1, steps):
        acc += (4 if i % 2 else 2) * t_density(i * h, dof)
    integral = acc * h / 3.0
    return 0.5 - integral


def paired_t_oracle(a, b):
    """Two-sided paired t-test (statistic, p) from scratch."""
    diffs = [x - y for x, y in zip(a, b)]
    n = len(diffs)
    mean = sum(diffs) / n
    var = sum((d - mean) ** 2 for d in diffs) / (n - 1)
    se = math.sqrt(var / n)
    t = mean / se
    p = 2.0 * t_sf_oracle(abs(t), n - 1)
    return t, p
