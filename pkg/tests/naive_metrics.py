"""Independent brute-force re-implementations of the evaluation metrics.

Used by the test suite as an oracle: everything here is written with plain
Python loops straight from the metric definitions, sharing no ranking or
aggregation code with the package.
"""


def naive_topk(scores, k):
    """Top-k class ids by repeated scan; equal scores keep the lower id."""
    scores = [float(s) for s in scores]
    chosen = []
    for _ in range(k):
        best = None
        for j in range(len(scores)):
            if j in chosen:
                continue
            if best is None or scores[j] > scores[best]:
                best = j
        chosen.append(best)
    return chosen


def naive_topk_hit(scores, truth, k):
    return truth in naive_topk(scores, k)


def naive_accuracy(score_rows, truths, k):
    hits = 0
    for scores, truth in zip(score_rows, truths):
        if naive_topk_hit(scores, truth, k):
            hits += 1
    return 100.0 * hits / len(truths)


def naive_mean_topk_recall(score_rows, truths, k, classes):
    total = 0.0
    present = 0
    excluded = 0
    for c in sorted(set(int(c) for c in classes)):
        indices = [i for i, t in enumerate(truths) if int(t) == c]
        if not indices:
            excluded += 1
            continue
        hits = 0
        for i in indices:
            if naive_topk_hit(score_rows[i], c, k):
                hits += 1
        total += hits / len(indices)
        present += 1
    return 100.0 * total / present, excluded


def naive_time_to_action(score_rows, taus, truth, k):
    best = 0.0
    for t in range(len(score_rows)):
        if naive_topk_hit(score_rows[t], truth, k) and taus[t] > best:
            best = taus[t]
    return best


def naive_min_observation_ratio(score_rows, ratios, truth):
    for t in range(len(score_rows)):
        if naive_topk(score_rows[t], 1)[0] == truth:
            return 100.0 * ratios[t], True
    return 100.0, False


def naive_marginalize(probs, actions, num_verbs, num_nouns):
    verb = [0.0] * num_verbs
    noun = [0.0] * num_nouns
    for a in range(len(actions)):
        v, n = actions[a]
        verb[v] += probs[a]
        noun[n] += probs[a]
    return verb, noun
