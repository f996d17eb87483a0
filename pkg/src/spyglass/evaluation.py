"""Metrics, per-domain evaluation, embedding export, cluster separation.

Domains whose tag starts with "ood" count toward the out-of-domain average;
everything else pools into the in-domain accuracy. The overall average is
the unweighted mean of the in-domain accuracy and each OOD domain's
accuracy (one column per domain, like the headline results table).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import decode_image
from .model import forward


@dataclass
class DomainMetrics:
    tp: int = 0
    fp: int = 0
    tn: int = 0
    fn: int = 0

    @property
    def total(self):
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.total if self.total else 0.0

    @property
    def precision(self):
        denom = self.tp + self.fp
        return self.tp / denom if denom else 0.0

    @property
    def recall(self):
        denom = self.tp + self.fn
        return self.tp / denom if denom else 0.0

    @property
    def f1(self):
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if (p + r) else 0.0

    def as_dict(self):
        return {
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy, "precision": self.precision,
            "recall": self.recall, "f1": self.f1,
        }


@dataclass
class EvalReport:
    per_domain: dict = field(default_factory=dict)
    in_domain_accuracy: float = None
    ood_average_accuracy: float = None
    overall_average: float = None
    threshold: float = 0.5

    def as_dict(self):
        return {
            "threshold": self.threshold,
            "per_domain": {k: m.as_dict() for k, m in self.per_domain.items()},
            "in_domain_accuracy": self.in_domain_accuracy,
            "ood_average_accuracy": self.ood_average_accuracy,
            "overall_average": self.overall_average,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def format_table(self):
        def fmt(v):
            return "  -  " if v is None else f"{v:.3f}"

        lines = [
            f"{'domain':24s} {'n':>5s} {'acc':>6s} {'prec':>6s} "
            f"{'rec':>6s} {'f1':>6s}"
        ]
        for domain in sorted(self.per_domain):
            m = self.per_domain[domain]
            lines.append(
                f"{domain:24s} {m.total:5d} {m.accuracy:6.3f} "
                f"{m.precision:6.3f} {m.recall:6.3f} {m.f1:6.3f}"
            )
        lines.append(
            f"in-domain acc {fmt(self.in_domain_accuracy)} | "
            f"OOD average {fmt(self.ood_average_accuracy)} | "
            f"overall average {fmt(self.overall_average)}"
        )
        return "\n".join(lines)


def _is_ood(domain):
    return domain.startswith("ood")


def predict_records(model, records, batch_size=64, decode_fn=decode_image):
    """Probabilities and joint embeddings for a record list, input order."""
    probs = []
    embeddings = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = [decode_fn(r.path) for r in chunk]
        p, emb = forward(model, images)
        probs.append(p.data)
        embeddings.append(emb.data)
    return np.concatenate(probs), np.concatenate(embeddings)


def evaluate(model, records, threshold=0.5, batch_size=64,
             decode_fn=decode_image):
    """Per-domain confusion matrices and aggregate accuracies."""
    if not records:
        raise ValueError("evaluate() needs at least one record")
    probs, _ = predict_records(model, records, batch_size, decode_fn)
    return report_from_predictions(records, probs, threshold)


def report_from_predictions(records, probs, threshold=0.5):
    """Build an EvalReport from per-record probabilities (input order)."""
    report = EvalReport(threshold=threshold)
    by_domain = {}
    for rec, p in zip(records, probs):
        by_domain.setdefault(rec.domain, []).append((rec.label, p))
    for domain, pairs in sorted(by_domain.items()):
        if not pairs:
            warnings.warn(f"domain {domain!r} has no records; omitted")
            continue
        m = DomainMetrics()
        for label, p in pairs:
            predicted = 1 if p >= threshold else 0
            if label == 1 and predicted == 1:
                m.tp += 1
            elif label == 1:
                m.fn += 1
            elif predicted == 1:
                m.fp += 1
            else:
                m.tn += 1
        report.per_domain[domain] = m

    in_domain = [m for d, m in report.per_domain.items() if not _is_ood(d)]
    ood = {d: m for d, m in report.per_domain.items() if _is_ood(d)}
    if in_domain:
        pooled = DomainMetrics(
            tp=sum(m.tp for m in in_domain), fp=sum(m.fp for m in in_domain),
            tn=sum(m.tn for m in in_domain), fn=sum(m.fn for m in in_domain),
        )
        report.in_domain_accuracy = pooled.accuracy
    if ood:
        report.ood_average_accuracy = float(
            np.mean([m.accuracy for m in ood.values()])
        )
    columns = ([report.in_domain_accuracy] if in_domain else []) + [
        m.accuracy for _, m in sorted(ood.items())
    ]
    report.overall_average = float(np.mean(columns)) if columns else None
    return report


def export_embeddings(model, records, out_path, batch_size=64,
                      decode_fn=decode_image):
    """CSV of (path, label, domain, e0..e{D-1}), 9 significant digits."""
    _, embeddings = predict_records(model, records, batch_size, decode_fn)
    dim = embeddings.shape[1]
    header = "path,label,domain," + ",".join(f"e{i}" for i in range(dim))
    lines = [header]
    for rec, row in zip(records, embeddings):
        values = ",".join(f"{v:.9g}" for v in row)
        lines.append(f"{rec.path},{rec.label},{rec.domain},{values}")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return embeddings


def pca_project(embeddings, components=2):
    """Top principal components by covariance eigen-decomposition.

    Sign convention: each component's largest-magnitude loading is positive.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.shape[1] < components:
        raise ValueError(
            f"need at least {components} embedding dims, got {x.shape[1]}"
        )
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / max(1, x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:components]
    basis = eigvecs[:, order]
    for j in range(basis.shape[1]):
        pivot = np.argmax(np.abs(basis[:, j]))
        if basis[pivot, j] < 0:
            basis[:, j] = -basis[:, j]
    return centered @ basis


def silhouette(embeddings, labels):
    """Mean silhouette with Euclidean distances on the full embeddings.

    Degenerate conventions: a singleton cluster contributes 0; if cohesion
    and separation are both 0 (identical points) the sample contributes 0.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    scores = np.zeros(n)
    unique = np.unique(labels)
    for i in range(n):
        same = (labels == labels[i])
        same_count = int(same.sum())
        if same_count <= 1:
            continue
        a = dist[i, same].sum() / (same_count - 1)
        b = np.inf
        for other in unique:
            if other == labels[i]:
                continue
            mask = labels == other
            b = min(b, dist[i, mask].mean())
        denom = max(a, b)
        scores[i] = (b - a) / denom if denom > 0 else 0.0
    return float(scores.mean())


def separation_score(embeddings, labels):
    """(N x 2 PCA projection, mean silhouette) for labeled embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.shape[0] < 4:
        raise ValueError("separation_score needs at least 4 samples")
    if np.unique(labels).size < 2:
        raise ValueError("separation_score needs both labels present")
    return pca_project(x, components=2), silhouette(x, labels)
