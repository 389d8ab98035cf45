"""Segmentation scores, expert-balance statistics and routing traces."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from doremi3d.errors import ConfigurationError, FormatError


def confusion_matrix(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; negative labels are ignored."""
    pred = np.asarray(pred, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    keep = labels >= 0
    if np.any(labels[keep] >= n_classes) or np.any((pred[keep] < 0) | (pred[keep] >= n_classes)):
        raise ConfigurationError("class id out of range")
    flat = labels[keep] * n_classes + pred[keep]
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes).astype(np.float64)


@dataclass
class SegmentationScores:
    iou: np.ndarray
    present: np.ndarray
    miou: float
    macc: float
    allacc: float

    def to_dict(self, class_names: Sequence[str] | None = None) -> dict:
        names = class_names or [str(i) for i in range(self.iou.size)]
        return {
            "mIoU": float(self.miou),
            "mAcc": float(self.macc),
            "allAcc": float(self.allacc),
            "per_class_iou": {
                n: (float(v) if p else None) for n, v, p in zip(names, self.iou, self.present)
            },
        }


def scores_from_confusion(conf: np.ndarray) -> SegmentationScores:
    """IoU = TP/(TP+FP+FN); means run over classes present in the ground truth."""
    conf = np.asarray(conf, dtype=np.float64)
    tp = np.diag(conf)
    gt = conf.sum(axis=1)
    predicted = conf.sum(axis=0)
    present = gt > 0
    union = gt + predicted - tp
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, tp / union, 0.0)
        recall = np.where(gt > 0, tp / gt, 0.0)
    total = conf.sum()
    if total == 0:
        raise ConfigurationError("empty confusion matrix")
    return SegmentationScores(
        iou=iou,
        present=present,
        miou=float(iou[present].mean()),
        macc=float(recall[present].mean()),
        allacc=float(tp.sum() / total),
    )


def alpha_metric(counts) -> float:
    """Normalised standard deviation of expert activation counts (population std / mean)."""
    c = np.asarray(counts, dtype=np.float64)
    if c.ndim != 1 or c.size == 0:
        raise ConfigurationError("counts must be a non-empty vector")
    mean = c.mean()
    if mean <= 0:
        raise ConfigurationError("all-zero expert counts")
    return float(np.sqrt(np.mean((c - mean) ** 2)) / mean)


# ---------------------------------------------------------------- traces


@dataclass
class RoutingTrace:
    """Per-token routing record: one row per (layer, token)."""

    layer: list[str] = field(default_factory=list)
    domain_id: list[np.ndarray] = field(default_factory=list)
    token: list[np.ndarray] = field(default_factory=list)
    entropy: list[np.ndarray] = field(default_factory=list)
    k: list[np.ndarray] = field(default_factory=list)
    active: list[np.ndarray] = field(default_factory=list)
    n_experts: int | None = None

    def add(self, layer: str, domain_id: int, entropy, k, active) -> None:
        active = np.asarray(active, dtype=bool)
        if self.n_experts is None:
            self.n_experts = active.shape[1]
        elif active.shape[1] != self.n_experts:
            raise ConfigurationError("trace mixes different expert counts")
        n = active.shape[0]
        self.layer.append(layer)
        self.domain_id.append(np.full(n, int(domain_id)))
        self.token.append(np.arange(n))
        self.entropy.append(np.asarray(entropy, dtype=np.float64))
        self.k.append(np.asarray(k, dtype=np.int64))
        self.active.append(active)

    def extend(self, other: "RoutingTrace") -> None:
        for i in range(len(other.layer)):
            self.add(other.layer[i], int(other.domain_id[i][0]) if other.domain_id[i].size else 0,
                     other.entropy[i], other.k[i], other.active[i])

    def __len__(self) -> int:
        return int(sum(a.shape[0] for a in self.active))

    def layers(self) -> list[str]:
        return sorted(set(self.layer))

    def select(self, layer: str | None = None) -> "RoutingTrace":
        out = RoutingTrace(n_experts=self.n_experts)
        for i, name in enumerate(self.layer):
            if layer is None or name == layer:
                out.layer.append(name)
                out.domain_id.append(self.domain_id[i])
                out.token.append(self.token[i])
                out.entropy.append(self.entropy[i])
                out.k.append(self.k[i])
                out.active.append(self.active[i])
        return out

    def expert_counts(self) -> np.ndarray:
        if not self.active:
            return np.zeros(self.n_experts or 0)
        return np.sum([a.sum(axis=0) for a in self.active], axis=0).astype(np.float64)

    def counts_by_domain(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        for dom, act in zip(self.domain_id, self.active):
            if act.shape[0] == 0:
                continue
            d = int(dom[0])
            out[d] = out.get(d, np.zeros(act.shape[1])) + act.sum(axis=0)
        return dict(sorted(out.items()))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "token", "domain_id", "entropy", "k", "active", "n_experts"])
            for i, name in enumerate(self.layer):
                for t, d, h, k, a in zip(self.token[i], self.domain_id[i], self.entropy[i],
                                         self.k[i], self.active[i]):
                    w.writerow([name, int(t), int(d), repr(float(h)), int(k),
                                ";".join(str(j) for j in np.nonzero(a)[0]), self.n_experts])

    @classmethod
    def read_csv(cls, path: str | Path) -> "RoutingTrace":
        rows: dict[tuple[str, int], list] = {}
        n_experts = None
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                try:
                    n_experts = int(row["n_experts"])
                    key = (row["layer"], int(row["domain_id"]))
                    active = np.zeros(n_experts, dtype=bool)
                    if row["active"]:
                        active[[int(j) for j in row["active"].split(";")]] = True
                    rows.setdefault(key, []).append((float(row["entropy"]), int(row["k"]), active))
                except (KeyError, ValueError) as exc:
                    raise FormatError(f"bad trace row: {row}") from exc
        out = cls(n_experts=n_experts)
        for (layer, dom), items in rows.items():
            out.add(layer, dom, [h for h, _, _ in items], [k for _, k, _ in items],
                    np.array([a for _, _, a in items]).reshape(len(items), n_experts))
        return out


def expert_utilization(traces: RoutingTrace | Iterable[RoutingTrace], by_domain: bool = True) -> dict:
    """Fraction of activations landing on each expert, per domain (or pooled under key -1)."""
    if isinstance(traces, RoutingTrace):
        traces = [traces]
    total: dict[int, np.ndarray] = {}
    for tr in traces:
        per = tr.counts_by_domain() if by_domain else {-1: tr.expert_counts()}
        for d, c in per.items():
            total[d] = total.get(d, 0) + c
    out = {}
    for d, c in sorted(total.items()):
        s = c.sum()
        if s > 0:
            out[d] = c / s
    return out


def write_utilization_csv(hist: dict[int, np.ndarray], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        k = len(next(iter(hist.values()))) if hist else 0
        w.writerow(["domain_id"] + [f"expert_{j}" for j in range(k)])
        for d, h in hist.items():
            w.writerow([d] + [repr(float(v)) for v in h])


def read_utilization_csv(path: str | Path) -> dict[int, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return {int(r[0]): np.array([float(v) for v in r[1:]]) for r in reader}
