"""Multi-label evaluation: per-class AP / mAP and top-k precision, recall, F1."""

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    ap: list
    map: float
    op: float
    or_: float
    of1: float
    cp: float
    cr: float
    cf1: float
    flags: list = field(default_factory=list)

    def as_dict(self):
        d = asdict(self)
        d["or"] = d.pop("or_")
        return d

    def to_text(self):
        lines = [f"ap.{c}={v!r}" for c, v in enumerate(self.ap)]
        for key in ("map", "op", "or", "of1", "cp", "cr", "cf1"):
            lines.append(f"{key}={self.as_dict()[key]!r}")
        lines += [f"flag={f}" for f in self.flags]
        return "\n".join(lines) + "\n"

    def save(self, stem):
        """Write ``<stem>.txt`` (key=value) and ``<stem>.json``."""
        with open(f"{stem}.txt", "w") as fh:
            fh.write(self.to_text())
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)


def average_precision(scores, truth):
    """Precision averaged over the ranks of the positives (no interpolation).

    Images are ranked by descending score, ties broken by lower index.
    Returns ``nan`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth).astype(bool)
    npos = int(truth.sum())
    if npos == 0:
        return float("nan")
    order = np.lexsort((np.arange(scores.size), -scores))
    hits = truth[order]
    ranks = np.flatnonzero(hits) + 1
    # sequential sum in rank order
    return float(np.cumsum(np.arange(1, npos + 1) / ranks)[-1] / npos)


def mean_average_precision(scores, truth):
    """Per-class AP and their mean over classes with at least one positive.

    Returns:
        (ap list with nan for excluded classes, mAP, flags)
    """
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    aps = [average_precision(scores[:, c], truth[:, c]) for c in range(scores.shape[1])]
    flags = [f"ap_no_positives:{c}" for c, a in enumerate(aps) if np.isnan(a)]
    valid = [a for a in aps if not np.isnan(a)]
    return aps, (float(np.mean(valid)) if valid else 0.0), flags


def top_k_with_threshold(probs, k=3, threshold=0.1):
    """The k most probable labels (ties to the lower index) with prob >= threshold."""
    if k < 1:
        raise ValueError("top_k_with_threshold: k must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    order = np.lexsort((np.arange(probs.size), -probs))[:k]
    return {int(c) for c in order if probs[c] >= threshold}


def _safe_div(num, den):
    return num / den if den > 0 else 0.0


def _f1(p, r):
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def precision_recall_suite(assignments, truth):
    """Overall and per-class precision / recall / F1 from label sets.

    Args:
        assignments: per-image iterables of predicted class indices.
        truth: (n_images, C) binary array.

    Returns:
        dict with op, or, of1, cp, cr, cf1, the per-class counts
        (n_correct, n_predicted, n_truth) and flags for zero denominators.
    """
    truth = np.asarray(truth).astype(bool)
    n_img, C = truth.shape
    if len(assignments) != n_img:
        raise ValueError(f"{len(assignments)} assignments for {n_img} images")
    pred = np.zeros_like(truth)
    for i, labels in enumerate(assignments):
        for c in labels:
            pred[i, int(c)] = True
    n_c = (pred & truth).sum(axis=0)
    n_p = pred.sum(axis=0)
    n_g = truth.sum(axis=0)
    flags = []
    if n_p.sum() == 0:
        flags.append("op_no_predictions")
    if n_g.sum() == 0:
        flags.append("or_no_truth")
    op = _safe_div(int(n_c.sum()), int(n_p.sum()))
    or_ = _safe_div(int(n_c.sum()), int(n_g.sum()))
    flags += [f"cp_no_predictions:{c}" for c in range(C) if n_p[c] == 0]
    flags += [f"cr_no_truth:{c}" for c in range(C) if n_g[c] == 0]
    cp = sum(_safe_div(int(n_c[c]), int(n_p[c])) for c in range(C)) / C
    cr = sum(_safe_div(int(n_c[c]), int(n_g[c])) for c in range(C)) / C
    return {
        "op": float(op), "or": float(or_), "of1": float(_f1(op, or_)),
        "cp": cp, "cr": cr, "cf1": float(_f1(cp, cr)),
        "n_correct": n_c, "n_predicted": n_p, "n_truth": n_g, "flags": flags,
    }


def evaluate_predictions(probs, truth, k=3, threshold=0.1):
    """Full report from (n_images, C) probabilities and binary truth."""
    probs = np.asarray(probs, dtype=np.float64)
    truth = np.asarray(truth)
    if probs.shape != truth.shape:
        raise ValueError(f"probabilities {probs.shape} vs truth {truth.shape}")
    aps, m, flags = mean_average_precision(probs, truth)
    suite = precision_recall_suite([top_k_with_threshold(p, k, threshold) for p in probs], truth)
    return MetricsReport(
        ap=[float(a) for a in aps], map=m,
        op=suite["op"], or_=suite["or"], of1=suite["of1"],
        cp=suite["cp"], cr=suite["cr"], cf1=suite["cf1"],
        flags=flags + suite["flags"],
    )


def read_predictions(path, delimiter=","):
    """Parse ``image_id,p_0,...,p_{C-1}`` rows (``#`` starts a comment).

    Returns:
        (ids, (n, C) probability array)
    """
    ids, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter=delimiter), 1):
            if not row or row[0].startswith("#"):
                continue
            try:
                vals = [float(v) for v in row[1:]]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric probability") from None
            if rows and len(vals) != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} probabilities, got {len(vals)}")
            ids.append(row[0])
            rows.append(vals)
    return ids, np.array(rows, dtype=np.float64)


def write_predictions(path, ids, probs, delimiter=","):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter)
        for i, p in zip(ids, probs):
            w.writerow([i] + [repr(float(v)) for v in p])
