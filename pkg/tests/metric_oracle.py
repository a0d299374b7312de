"""Pixel-loop reference implementations of the segmentation scores."""


def class_scores(pred, truth, c):
    tp = tn = fp = fn = 0
    h, w = len(truth), len(truth[0])
    for i in range(h):
        for j in range(w):
            p, t = pred[i][j] == c, truth[i][j] == c
            if p and t:
                tp += 1
            elif p:
                fp += 1
            elif t:
                fn += 1
            else:
                tn += 1
    return {
        "accuracy": (tp + tn) / (tp + tn + fp + fn),
        "sensitivity": tp / (tp + fn) if tp + fn else 1.0,
        "specificity": tn / (tn + fp) if tn + fp else 1.0,
        "dice": 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 1.0,
    }


def region_scores(pred, truth, labels):
    m1 = n1 = both1 = both0 = n0 = 0
    for prow, trow in zip(pred, truth):
        for p, t in zip(prow, trow):
            pm, tm = p in labels, t in labels
            m1 += pm
            n1 += tm
            n0 += not tm
            both1 += pm and tm
            both0 += (not pm) and (not tm)
    return (
        both1 / ((m1 + n1) / 2) if m1 + n1 else 1.0,
        both1 / n1 if n1 else 1.0,
        both0 / n0 if n0 else 1.0,
    )
