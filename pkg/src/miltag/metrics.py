"""Ranking metrics and the four evaluation protocols.

Per image the model produces one score per tag in the installed universe
(seen tags first, then unseen).  Each task ranks a subset of that universe:

* ``conventional`` ranks the seen tags,
* ``zst`` ranks the unseen tags,
* ``gzst`` ranks all tags,
* ``zsr`` is the single-label restriction of ``zst`` and additionally
  reports mean per-class top-1 accuracy over the unseen classes.

Ground truth is intersected with the task's subset; images left with no
ground truth are skipped and counted.  Image average precision sums
precision at every rank holding a relevant tag, divided by the ground-truth
size, over the full subset ranking.  Aggregate P@K and R@K are means over
evaluated images, with the aggregate F1 taken as their harmonic mean.

:func:`brute_force_report` recomputes everything by naive enumeration in
plain Python and shares no ranking or aggregation code with
:func:`evaluate`; it exists to cross-check the fast path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import TASKS, forward, rank_tags, task_index_range


@dataclass
class EvalReport:
    task: str
    miap: float
    per_k: dict = field(default_factory=dict)  # K -> (precision, recall, f1)
    zsr_top1: float | None = None
    images_evaluated: int = 0
    images_skipped: int = 0

    def to_text(self):
        lines = [
            f"task: {self.task}",
            f"images_evaluated: {self.images_evaluated}",
            f"images_skipped: {self.images_skipped}",
            f"miap: {self.miap!r}",
        ]
        for k in sorted(self.per_k):
            p, r, f1 = self.per_k[k]
            lines.append(f"precision_at_{k}: {p!r}")
            lines.append(f"recall_at_{k}: {r!r}")
            lines.append(f"f1_at_{k}: {f1!r}")
        if self.zsr_top1 is not None:
            lines.append(f"zsr_top1: {self.zsr_top1!r}")
        return "\n".join(lines) + "\n"

    def to_records(self):
        """Line-delimited JSON records, one metric per line."""
        records = [
            {"task": self.task, "metric": "images_evaluated", "value": self.images_evaluated},
            {"task": self.task, "metric": "images_skipped", "value": self.images_skipped},
            {"task": self.task, "metric": "miap", "value": self.miap},
        ]
        for k in sorted(self.per_k):
            p, r, f1 = self.per_k[k]
            records.append({"task": self.task, "metric": "precision", "k": k, "value": p})
            records.append({"task": self.task, "metric": "recall", "k": k, "value": r})
            records.append({"task": self.task, "metric": "f1", "k": k, "value": f1})
        if self.zsr_top1 is not None:
            records.append({"task": self.task, "metric": "zsr_top1", "value": self.zsr_top1})
        return "\n".join(json.dumps(rec) for rec in records) + "\n"


def image_ap(ranking, ground_truth):
    """Average precision of one ranked tag list against a ground-truth set.

    Equals 1.0 exactly when every relevant tag occupies the top ``|G|`` ranks.
    """
    ranking = [int(t) for t in ranking]
    gt = {int(t) for t in ground_truth}
    if not gt:
        raise ValueError("ground truth is empty; the image should have been skipped")
    outside = gt - set(ranking)
    if outside:
        raise ValueError(f"ground-truth tags {sorted(outside)} are outside the ranking's universe")
    hits = 0
    total = 0.0
    for rank, tag in enumerate(ranking, start=1):
        if tag in gt:
            hits += 1
            total += hits / rank
    return total / len(gt)


def prf_at_k(ranking, ground_truth, k):
    """Precision, recall, and F1 of the top-K prediction for one image."""
    ranking = [int(t) for t in ranking]
    gt = {int(t) for t in ground_truth}
    if not gt:
        raise ValueError("ground truth is empty; the image should have been skipped")
    k = int(k)
    if not (1 <= k <= len(ranking)):
        raise ValueError(f"k={k} is outside the {len(ranking)}-tag ranking")
    hits = len(set(ranking[:k]) & gt)
    precision = hits / k
    recall = hits / len(gt)
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0.0 else 0.0
    return precision, recall, f1


def evaluate_scores(score_rows, gt_sets, task, ks, num_seen):
    """Aggregate metrics from precomputed per-image score vectors.

    Parameters
    ----------
    score_rows : sequence of arrays, each shape (C,)
        One score per tag in the installed universe.
    gt_sets : sequence of sets of int
        Ground-truth tag indices per image, in universe indexing.
    task : str
    ks : sequence of int
        Cutoffs for P/R/F1; each must fit inside the task's tag subset.
    num_seen : int
        Tags ``[0, num_seen)`` are the seen block.
    """
    if len(score_rows) != len(gt_sets):
        raise ValueError("score rows and ground-truth sets differ in length")
    if not score_rows:
        raise ValueError("nothing to evaluate")
    num_total = int(np.asarray(score_rows[0]).shape[0])
    lo, hi = task_index_range(task, num_seen, num_total)
    subset = set(range(lo, hi))
    ks = [int(k) for k in ks]
    for k in ks:
        if not (1 <= k <= hi - lo):
            raise ValueError(f"k={k} exceeds the task's {hi - lo}-tag subset")

    aps = []
    per_k_p = {k: [] for k in ks}
    per_k_r = {k: [] for k in ks}
    skipped = 0
    class_hits: dict[int, int] = {}
    class_counts: dict[int, int] = {}

    for scores, gt in zip(score_rows, gt_sets):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (num_total,):
            raise ValueError(f"score row has shape {scores.shape}, expected ({num_total},)")
        restricted = {int(t) for t in gt} & subset
        if not restricted:
            skipped += 1
            continue
        ranking = rank_tags(scores, task, num_seen)
        aps.append(image_ap(ranking, restricted))
        for k in ks:
            p, r, _ = prf_at_k(ranking, restricted, k)
            per_k_p[k].append(p)
            per_k_r[k].append(r)
        if task == "zsr":
            top1 = int(ranking[0])
            for cls in restricted:
                class_counts[cls] = class_counts.get(cls, 0) + 1
                if top1 == cls:
                    class_hits[cls] = class_hits.get(cls, 0) + 1

    if not aps:
        raise ValueError("no image has ground truth inside the task's tag subset")

    per_k = {}
    for k in ks:
        p = float(np.mean(per_k_p[k]))
        r = float(np.mean(per_k_r[k]))
        f1 = 2.0 * p * r / (p + r) if p + r > 0.0 else 0.0
        per_k[k] = (p, r, f1)
    zsr_top1 = None
    if task == "zsr":
        accs = [class_hits.get(c, 0) / n for c, n in sorted(class_counts.items())]
        zsr_top1 = float(np.mean(accs))
    return EvalReport(
        task=task,
        miap=float(np.mean(aps)),
        per_k=per_k,
        zsr_top1=zsr_top1,
        images_evaluated=len(aps),
        images_skipped=skipped,
    )


def evaluate(params, test, task, ks=(3, 5)):
    """Run one task protocol over a test dataset.

    ``params.frozen`` must hold the dataset's seen tags followed by its
    unseen tags, in order (the extended matrix).
    """
    expected = tuple(test.seen_tags) + tuple(test.unseen_tags)
    if params.frozen.tags != expected:
        raise ValueError(
            "installed tag matrix does not match the dataset's seen+unseen tags; "
            "rebuild it with build_matrix(table, seen, unseen)"
        )
    index = params.frozen.index
    rows = []
    gts = []
    for bag in test.bags:
        rows.append(forward(params, bag).bag_scores)
        gts.append({index[t] for t in bag.tags})
    return evaluate_scores(rows, gts, task, ks, num_seen=len(test.seen_tags))


def brute_force_report(score_rows, gt_sets, task, ks, num_seen):
    """Recompute :func:`evaluate_scores` by naive enumeration.

    Pure-Python oracle: its restriction, sorting, per-image metrics, and
    aggregation are all written independently of the fast path.  Agreement
    must hold to within 1e-12 on any input.
    """
    if len(score_rows) != len(gt_sets):
        raise ValueError("score rows and ground-truth sets differ in length")
    if not score_rows:
        raise ValueError("nothing to evaluate")
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    num_total = len(list(score_rows[0]))
    if task == "conventional":
        eligible = list(range(0, num_seen))
    elif task in ("zst", "zsr"):
        eligible = list(range(num_seen, num_total))
    else:
        eligible = list(range(0, num_total))
    if not eligible:
        raise ValueError(f"task {task!r} has an empty tag subset")
    ks = [int(k) for k in ks]
    for k in ks:
        if k < 1 or k > len(eligible):
            raise ValueError(f"k={k} exceeds the task's {len(eligible)}-tag subset")

    ap_values = []
    precisions = {k: [] for k in ks}
    recalls = {k: [] for k in ks}
    skipped = 0
    per_class = {}

    for row, gt in zip(score_rows, gt_sets):
        row = [float(x) for x in row]
        relevant = sorted(t for t in gt if t in eligible)
        if not relevant:
            skipped += 1
            continue
        order = sorted(eligible, key=lambda t: (-row[t], t))

        # average precision by walking the ranked list
        seen_hits = 0
        ap = 0.0
        for position, tag in enumerate(order, start=1):
            if tag in relevant:
                seen_hits += 1
                ap += seen_hits / position
        ap_values.append(ap / len(relevant))

        for k in ks:
            hits = 0
            for tag in order[:k]:
                if tag in relevant:
                    hits += 1
            precisions[k].append(hits / k)
            recalls[k].append(hits / len(relevant))

        if task == "zsr":
            winner = order[0]
            for cls in relevant:
                total_for_class, hits_for_class = per_class.get(cls, (0, 0))
                per_class[cls] = (total_for_class + 1, hits_for_class + (1 if winner == cls else 0))

    if not ap_values:
        raise ValueError("no image has ground truth inside the task's tag subset")

    per_k = {}
    for k in ks:
        p = sum(precisions[k]) / len(precisions[k])
        r = sum(recalls[k]) / len(recalls[k])
        f1 = 2.0 * p * r / (p + r) if p + r > 0.0 else 0.0
        per_k[k] = (p, r, f1)
    zsr_top1 = None
    if task == "zsr":
        accs = [hits / total for total, hits in (per_class[c] for c in sorted(per_class))]
        zsr_top1 = sum(accs) / len(accs)
    return EvalReport(
        task=task,
        miap=sum(ap_values) / len(ap_values),
        per_k=per_k,
        zsr_top1=zsr_top1,
        images_evaluated=len(ap_values),
        images_skipped=skipped,
    )


def random_baseline(test, task, trials=1000, seed=0):
    """Monte Carlo chance floor: MiAP under uniformly random rankings.

    Each trial draws an independent random permutation of the task's tag
    subset per image and averages the resulting image APs.  Returns the mean
    and the sample standard deviation over trials.
    """
    trials = int(trials)
    if trials < 100:
        raise ValueError("use at least 100 trials for a stable baseline")
    universe = list(test.seen_tags) + list(test.unseen_tags)
    index = {t: i for i, t in enumerate(universe)}
    lo, hi = task_index_range(task, len(test.seen_tags), len(universe))
    subset_size = hi - lo

    # local ground-truth indices within the task subset, skipping empty images
    local_gts = []
    for bag in test.bags:
        local = np.array(
            sorted(index[t] - lo for t in bag.tags if lo <= index[t] < hi), dtype=np.intp
        )
        if local.size:
            local_gts.append(local)
    if not local_gts:
        raise ValueError("no image has ground truth inside the task's tag subset")

    rng = np.random.default_rng(seed)
    miaps = np.empty(trials, dtype=np.float64)
    for trial in range(trials):
        total = 0.0
        for gt in local_gts:
            perm = rng.permutation(subset_size)
            ranks = np.sort(np.nonzero(np.isin(perm, gt))[0] + 1)
            total += float(np.mean(np.arange(1, gt.size + 1) / ranks))
        miaps[trial] = total / len(local_gts)
    return float(np.mean(miaps)), float(np.std(miaps, ddof=1))
