"""Independent loop-based recomputations used as oracles.

Nothing here imports the package: each function restates its rule in
plain Python so agreement is meaningful.
"""
import math

FLOOR = 1e-12


def dist(a, b):
    return math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))


def entropy2(p):
    return -sum(v * math.log2(v) for v in p if v > 0)


def centroids(features, probs):
    k_count = len(probs[0])
    out = []
    for k in range(k_count):
        mass = sum(p[k] for p in probs)
        acc = [0.0] * len(features[0])
        for f, p in zip(features, probs):
            for d in range(len(f)):
                acc[d] += p[k] * f[d]
        out.append([a / max(mass, FLOOR) for a in acc])
    return out


def pseudo_labels(features, cents):
    labels = []
    for f in features:
        best, best_d = 0, dist(f, cents[0])
        for k in range(1, len(cents)):
            d = dist(f, cents[k])
            if d < best_d:
                best, best_d = k, d
        labels.append(best)
    return labels


def mean_discrepancy(p1, p2):
    return sum(dist(a, b) for a, b in zip(p1, p2)) / len(p1)


def confident(p1, p2, m_dis):
    avg = [[(a + b) / 2 for a, b in zip(r1, r2)] for r1, r2 in zip(p1, p2)]
    h = [entropy2(p) for p in avg]
    m_h = sum(h) / len(h)
    return [dist(a, b) < m_dis and hi < m_h for a, b, hi in zip(p1, p2, h)]


def knn(points, k):
    out = []
    for i, p in enumerate(points):
        cands = sorted((dist(p, q), j) for j, q in enumerate(points) if j != i)
        out.append([j for _, j in cands[:k]])
    return out


def reliable_neighbors(features, probs_avg, k):
    return [sorted(set(a) & set(b)) for a, b in zip(knn(features, k), knn(probs_avg, k))]


def plal(probs_avg, pseudo):
    return -sum(math.log(max(p[y], FLOOR)) for p, y in zip(probs_avg, pseudo)) / len(pseudo)


def ccdl(p1, p2, mask):
    ds = [dist(a, b) for a, b, m in zip(p1, p2, mask) if m]
    return sum(ds) / len(ds) if ds else 0.0


def lcl(probs_avg, neighbors):
    total = 0.0
    for i, nb in enumerate(neighbors):
        for j in nb:
            dot = sum(a * b for a, b in zip(probs_avg[i], probs_avg[j]))
            total += math.log(min(max(dot, FLOOR), 1.0))
    return -total / len(probs_avg)


def group_dro(probs_avg, labels, weights):
    groups = {}
    for p, y in zip(probs_avg, labels):
        groups.setdefault(y, []).append(-weights[y] * math.log(max(p[y], FLOOR)))
    return max(sum(v) / len(v) for v in groups.values())


def pretrain_total(p1, p2, labels, weights, alpha):
    avg = [[(a + b) / 2 for a, b in zip(r1, r2)] for r1, r2 in zip(p1, p2)]
    return group_dro(avg, labels, weights) + alpha * mean_discrepancy(p1, p2)
