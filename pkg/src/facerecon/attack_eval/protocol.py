"""Attack protocols: subject-disjoint folds, type-I/type-II score sets, rank-1 identification."""
from dataclasses import dataclass

import numpy as np
import torch

from ..errors import EvaluationError
from ..nbnet import ReconstructionModel, reconstruct_batch
from .metrics import ScoreSet, aggregate_folds, rank1_from_templates, tar_at_far


@dataclass(frozen=True)
class Fold:
    """Indices into an evaluation set.

    ``test`` are the images attacked in this fold; ``impostor_pairs`` are
    different-subject pairs with at least one member in ``test``.
    """

    fold_id: int
    test: tuple
    impostor_pairs: tuple


def make_folds(subject_ids, n_folds=10, seed=0):
    """Seeded subject-disjoint splits in the style of the BLUFR protocol."""
    subjects = sorted(set(subject_ids))
    if len(subjects) < n_folds or n_folds < 1:
        raise EvaluationError(f"{len(subjects)} subjects cannot form {n_folds} subject-disjoint folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    group = {subjects[s]: k % n_folds for k, s in enumerate(order)}
    labels = np.array([group[s] for s in subject_ids])
    subj = np.asarray(subject_ids)
    folds = []
    for f in range(n_folds):
        test = np.nonzero(labels == f)[0]
        pairs = {(int(min(i, j)), int(max(i, j)))
                 for i in test for j in np.nonzero(subj != subj[i])[0]}
        folds.append(Fold(f, tuple(int(i) for i in test), tuple(sorted(pairs))))
    return folds


def genuine_pairs(subject_ids, sample_ids, indices):
    """Ordered same-subject pairs (a, b), a != b, among ``indices``."""
    out = []
    for a in indices:
        for b in indices:
            if a != b and subject_ids[a] == subject_ids[b]:
                if sample_ids[a] == sample_ids[b]:
                    raise EvaluationError(
                        f"genuine pair repeats sample {subject_ids[a]}/{sample_ids[a]}")
                out.append((int(a), int(b)))
    return out


class IdentityReconstructor:
    """Returns the original image; anchors the 'Original' rows."""

    name = "original"

    def reconstruct_from(self, templates, images):
        return images


class ConstantReconstructor:
    """Returns one fixed image whatever the template."""

    name = "constant"

    def __init__(self, image):
        self.image = torch.as_tensor(image, dtype=torch.float32)

    def reconstruct_from(self, templates, images):
        return self.image.expand(len(templates), *self.image.shape).clone()


def reconstruct_images(model, templates, images):
    """Reconstructions of ``images`` from their ``templates``."""
    if isinstance(model, ReconstructionModel):
        return reconstruct_batch(model, templates).clamp(-1.0, 1.0)
    if hasattr(model, "reconstruct_from"):
        return model.reconstruct_from(templates, images)
    raise TypeError(f"cannot reconstruct with {type(model).__name__}")


def _unit(t):
    t = np.asarray(t, dtype=np.float64)
    return t / np.linalg.norm(t, axis=1, keepdims=True)


@dataclass
class AttackTemplates:
    """Templates of the originals and of their reconstructions, row-aligned."""

    original: np.ndarray
    reconstructed: np.ndarray
    subject_ids: list
    sample_ids: list


def attack_templates(originals, model, extractor):
    if len(originals) == 0:
        raise EvaluationError("no original images to attack")
    t = extractor.embed(originals.pixels)
    recon = reconstruct_images(model, t, originals.pixels)
    return AttackTemplates(_unit(t), _unit(extractor.embed(recon)),
                           list(originals.subject_ids), list(originals.sample_ids))


def _impostor_scores(at, fold):
    if not fold.impostor_pairs:
        raise EvaluationError(f"fold {fold.fold_id} has no impostor pairs")
    p = np.asarray(fold.impostor_pairs)
    return np.einsum("ij,ij->i", at.original[p[:, 0]], at.original[p[:, 1]])


def type1_scores(at: AttackTemplates, fold: Fold):
    if not fold.test:
        raise EvaluationError(f"fold {fold.fold_id} has no test images")
    idx = np.asarray(fold.test)
    gen = np.einsum("ij,ij->i", at.original[idx], at.reconstructed[idx])
    return ScoreSet(np.clip(gen, -1, 1), np.clip(_impostor_scores(at, fold), -1, 1), fold.fold_id, "type1")


def type2_scores(at: AttackTemplates, fold: Fold, pairs=None):
    pairs = genuine_pairs(at.subject_ids, at.sample_ids, fold.test) if pairs is None else pairs
    for a, b in pairs:
        if at.subject_ids[a] != at.subject_ids[b] or at.sample_ids[a] == at.sample_ids[b]:
            raise EvaluationError(f"pair ({a}, {b}) is not a same-subject distinct-sample pair")
    if not pairs:
        raise EvaluationError(f"fold {fold.fold_id} has no genuine pairs")
    p = np.asarray(pairs)
    gen = np.einsum("ij,ij->i", at.original[p[:, 1]], at.reconstructed[p[:, 0]])
    return ScoreSet(np.clip(gen, -1, 1), np.clip(_impostor_scores(at, fold), -1, 1), fold.fold_id, "type2")


def original_scores(at: AttackTemplates, fold: Fold):
    pairs = genuine_pairs(at.subject_ids, at.sample_ids, fold.test)
    if not pairs:
        raise EvaluationError(f"fold {fold.fold_id} has no genuine pairs")
    p = np.asarray(pairs)
    gen = np.einsum("ij,ij->i", at.original[p[:, 0]], at.original[p[:, 1]])
    return ScoreSet(np.clip(gen, -1, 1), np.clip(_impostor_scores(at, fold), -1, 1), fold.fold_id,
                    "original")


def build_type1_scores(originals, model, extractor, fold):
    """Genuine: original vs its own reconstruction. Impostor: originals only."""
    return type1_scores(attack_templates(originals, model, extractor), fold)


def build_type2_scores(pairs, originals, model, extractor, fold):
    """Genuine pair (a, b): b's original vs the reconstruction of a. Impostor: originals only."""
    return type2_scores(attack_templates(originals, model, extractor), fold, pairs)


_SCORERS = {"type1": type1_scores, "type2": type2_scores, "original": original_scores}


@dataclass
class AttackResult:
    model: str
    dataset: str
    attack: str
    far_targets: tuple
    folds: list                 # VerificationResult per fold
    aggregate: dict             # far -> {mu, sigma, reported, threshold, per_fold}


def evaluate_attack(originals, model, extractor, folds, attacks=("type1", "type2"),
                    far_targets=(0.001, 0.01), model_name="model", dataset_name="dataset"):
    """Run each attack over every fold and aggregate as mean - std."""
    at = attack_templates(originals, model, extractor)
    results = []
    for kind in attacks:
        if kind not in _SCORERS:
            raise EvaluationError(f"unknown attack {kind!r}")
        rows = [tar_at_far(_SCORERS[kind](at, f), far_targets) for f in folds]
        agg = aggregate_folds(rows) if len(rows) >= 2 else None
        results.append(AttackResult(model_name, dataset_name, kind, tuple(far_targets), rows, agg))
    return results


def rank1_identification(gallery, probes, extractor, model=None, partition="probe"):
    """Rank-1 rate of ``probes`` (or their reconstructions under ``model``) against ``gallery``."""
    if len(gallery) == 0 or len(probes) == 0:
        raise EvaluationError("identification needs non-empty gallery and probe sets")
    g = extractor.embed(gallery.pixels).numpy()
    t = extractor.embed(probes.pixels)
    if model is not None:
        t = extractor.embed(reconstruct_images(model, t, probes.pixels))
    return rank1_from_templates(g, list(gallery.subject_ids), t.numpy(), list(probes.subject_ids),
                                partition)
