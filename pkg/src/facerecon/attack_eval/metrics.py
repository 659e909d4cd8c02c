"""Verification and identification metrics.

Convention: a comparison is accepted when ``score >= threshold``. Thresholds are
empirical quantiles of the impostor scores without interpolation.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import EvaluationError, InsufficientImpostorsError

ATTACK_KINDS = ("type1", "type2", "original")


@dataclass
class ScoreSet:
    genuine: np.ndarray
    impostor: np.ndarray
    fold_id: int = 0
    attack_kind: str = "type1"

    def __post_init__(self):
        self.genuine = np.asarray(self.genuine, dtype=np.float64).ravel()
        self.impostor = np.asarray(self.impostor, dtype=np.float64).ravel()
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"attack_kind must be one of {ATTACK_KINDS}, got {self.attack_kind!r}")

    def check(self):
        if len(self.genuine) == 0 or len(self.impostor) == 0:
            raise EvaluationError("score set needs non-empty genuine and impostor lists")
        for name in ("genuine", "impostor"):
            s = getattr(self, name)
            if not np.all(np.isfinite(s)) or s.min() < -1.0 - 1e-9 or s.max() > 1.0 + 1e-9:
                raise EvaluationError(f"{name} scores must be finite cosine values in [-1, 1]")
        return self


@dataclass
class VerificationResult:
    """One fold's operating points plus its ROC curve (rates are fractions)."""

    fold_id: int
    attack_kind: str
    far_targets: tuple
    tar: tuple
    thresholds: tuple
    roc_far: np.ndarray = field(repr=False, default=None)
    roc_tar: np.ndarray = field(repr=False, default=None)

    def at(self, far):
        return self.tar[self.far_targets.index(far)]


@dataclass
class IdentificationResult:
    rate: float                 # percent
    partition: str
    best_subject: list
    best_index: list
    tied: list

    @property
    def n_probes(self):
        return len(self.best_subject)


def _check_far(far, n_impostor):
    if not 0.0 < far < 1.0:
        raise ValueError(f"FAR targets must lie in (0, 1), got {far}")
    if n_impostor * far < 1.0 - 1e-9:
        raise InsufficientImpostorsError(
            f"FAR {far:g} needs at least {int(np.ceil(1.0 / far - 1e-9))} impostor scores, "
            f"have {n_impostor}")


def threshold_at_far(impostor, far):
    """Smallest candidate ``t`` with ``#{impostor >= t} / n <= far``.

    Candidates are the impostor scores themselves plus the next float above
    their maximum, which rejects every impostor.
    """
    imp = np.sort(np.asarray(impostor, dtype=np.float64))
    n = len(imp)
    _check_far(far, n)
    cand = np.unique(imp)
    count_ge = n - np.searchsorted(imp, cand, side="left")
    ok = np.nonzero(count_ge / n <= far)[0]
    if len(ok) == 0:
        return float(np.nextafter(imp[-1], np.inf))
    return float(cand[ok[0]])


def tar_at_far(scores: ScoreSet, far_targets):
    """TAR and threshold at each requested FAR for one score set."""
    scores.check()
    fars = tuple(float(f) for f in far_targets)
    if not fars:
        raise ValueError("need at least one FAR target")
    for f in fars:
        _check_far(f, len(scores.impostor))
    gen = np.sort(scores.genuine)
    thresholds, tars = [], []
    for f in fars:
        t = threshold_at_far(scores.impostor, f)
        thresholds.append(t)
        tars.append(float((len(gen) - np.searchsorted(gen, t, side="left")) / len(gen)))
    roc_far, roc_tar = roc_points(scores)
    return VerificationResult(scores.fold_id, scores.attack_kind, fars, tuple(tars), tuple(thresholds),
                              roc_far, roc_tar)


def roc_points(scores: ScoreSet):
    """(FAR, TAR) at every distinct score used as threshold, FAR increasing."""
    gen = np.sort(scores.genuine)
    imp = np.sort(scores.impostor)
    t = np.unique(np.concatenate([gen, imp, [np.inf]]))[::-1]
    far = (len(imp) - np.searchsorted(imp, t, side="left")) / len(imp)
    tar = (len(gen) - np.searchsorted(gen, t, side="left")) / len(gen)
    return far, tar


def aggregate_folds(per_fold):
    """Per FAR: mean, population std and the reported value mean - std.

    Units follow the inputs (fractions in, fractions out).
    """
    per_fold = list(per_fold)
    if len(per_fold) < 2:
        raise EvaluationError(f"aggregation needs at least 2 folds, got {len(per_fold)}")
    fars = per_fold[0].far_targets
    if any(r.far_targets != fars for r in per_fold):
        raise EvaluationError("all folds must share the same FAR targets")
    out = {}
    for j, f in enumerate(fars):
        tars = np.array([r.tar[j] for r in per_fold])
        ths = np.array([r.thresholds[j] for r in per_fold])
        # sorted so the floating-point result does not depend on fold order
        mu, sigma = float(np.sort(tars).mean()), float(np.sort(tars).std(ddof=0))
        out[f] = {"mu": mu, "sigma": sigma, "reported": mu - sigma, "threshold": float(np.sort(ths).mean()),
                  "per_fold": [float(v) for v in tars]}
    return out


def rank1_from_templates(gallery, gallery_subjects, probes, probe_subjects, partition=""):
    """Closed-set rank-1: each probe takes the subject of its most similar gallery template.

    Ties go to the lowest gallery index and are flagged in the result.
    """
    gallery = np.asarray(gallery, dtype=np.float64)
    probes = np.asarray(probes, dtype=np.float64)
    if len(gallery) == 0 or len(probes) == 0:
        raise EvaluationError("identification needs non-empty gallery and probe sets")
    if gallery.shape[1] != probes.shape[1]:
        raise EvaluationError(f"gallery dim {gallery.shape[1]} != probe dim {probes.shape[1]}")
    g = gallery / np.linalg.norm(gallery, axis=1, keepdims=True)
    p = probes / np.linalg.norm(probes, axis=1, keepdims=True)
    sim = p @ g.T
    best = np.argmax(sim, axis=1)
    top = sim[np.arange(len(p)), best]
    tied = [bool(v) for v in ((sim == top[:, None]).sum(axis=1) > 1)]
    subj = [gallery_subjects[int(i)] for i in best]
    correct = sum(s == t for s, t in zip(subj, probe_subjects))
    return IdentificationResult(100.0 * correct / len(p), partition, subj, [int(i) for i in best], tied)
