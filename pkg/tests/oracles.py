"""Slow, obviously-correct reference implementations used by the tests."""

import math
from fractions import Fraction

import numpy as np

from hbmcn.evaluation import FeatureSet, evaluate


def brute_force_eval(qf, qp, qc, gf, gp, gc):
    """Per-query (AP, first-hit rank) by explicit sorting and counting.

    Returns ``(aps, firsts, skipped, longest_valid_list)``.
    """
    def norm(v):
        return math.sqrt(sum(float(a) * float(a) for a in v))

    aps, firsts, skipped, longest = [], [], [], 0
    for i in range(len(qf)):
        qn = norm(qf[i])
        scored = []
        for j in range(len(gf)):
            dot = sum(float(a) * float(b) for a, b in zip(qf[i], gf[j]))
            scored.append((-(dot / (qn * norm(gf[j]))), j))
        scored.sort()
        ranked = []
        for _, j in scored:
            if gp[j] == -1:
                continue
            if gp[j] == qp[i] and gc[j] == qc[i]:
                continue
            ranked.append(gp[j] == qp[i])
        longest = max(longest, len(ranked))
        n_rel = sum(ranked)
        if n_rel == 0:
            skipped.append(i)
            continue
        seen, total = 0, Fraction(0)
        first = None
        for pos, rel in enumerate(ranked, start=1):
            if rel:
                seen += 1
                total += Fraction(seen, pos)
                if first is None:
                    first = pos
        aps.append(total / n_rel)
        firsts.append(first)
    return aps, firsts, skipped, longest


def planted_instance(seed, n_q=None, n_g=None, dim=8):
    rng = np.random.default_rng(seed)
    n_q = n_q or int(rng.integers(5, 51))
    n_g = n_g or int(rng.integers(20, 201))
    n_ids = int(rng.integers(3, 12))
    centers = rng.standard_normal((n_ids, dim))
    qp = rng.integers(0, n_ids, n_q)
    gp = rng.integers(0, n_ids, n_g)
    gp[rng.random(n_g) < 0.05] = -1
    qc = rng.integers(1, 4, n_q)
    gc = rng.integers(1, 4, n_g)
    qf = centers[qp] + rng.standard_normal((n_q, dim))
    gf = centers[np.maximum(gp, 0)] + rng.standard_normal((n_g, dim))
    return FeatureSet(qf, qp, qc), FeatureSet(gf, gp, gc)


def check_against_oracle(q, g):
    aps, firsts, skipped, longest = brute_force_eval(
        q.features, q.person_ids.tolist(), q.camera_ids.tolist(),
        g.features, g.person_ids.tolist(), g.camera_ids.tolist(),
    )
    report = evaluate(q, g)
    assert report.first_hit_ranks == firsts
    assert report.skipped == skipped
    assert len(report.cmc) == longest
    for k in range(1, longest + 1):
        assert report.cmc[k - 1] == sum(f <= k for f in firsts) / len(firsts)
    for got, want in zip(report.average_precisions, aps):
        assert abs(got - float(want)) <= 1e-12
    assert abs(report.mAP - float(sum(aps) / len(aps))) <= 1e-12
    return report
