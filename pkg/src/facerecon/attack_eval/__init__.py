"""Type-I/type-II verification attacks and rank-1 identification."""
from .metrics import (IdentificationResult, ScoreSet, VerificationResult, aggregate_folds,
                      rank1_from_templates, roc_points, tar_at_far, threshold_at_far)
from .protocol import (AttackResult, AttackTemplates, ConstantReconstructor, Fold, IdentityReconstructor,
                       attack_templates, build_type1_scores, build_type2_scores, evaluate_attack,
                       genuine_pairs, make_folds, original_scores, rank1_identification,
                       reconstruct_images, type1_scores, type2_scores)
from .report import render_report, results_json
