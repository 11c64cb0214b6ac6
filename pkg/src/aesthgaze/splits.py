"""Participant-level train/val/test splitting.

Trials from one participant never straddle splits. Validation and test each
receive max(1, round(ratio * P)) participants; everything left goes to train,
which keeps the assignment deterministic and favors training data.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

TRAIN, VAL, TEST = "train", "val", "test"


@dataclass
class SplitAssignment:
    assignment: dict            # participant_id -> split name
    ratios: tuple
    seed: int

    def participants(self, split):
        return sorted(p for p, s in self.assignment.items() if s == split)


def split_by_participant(manifest, ratios=(0.70, 0.15, 0.15), seed=0) -> SplitAssignment:
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"split ratios must sum to 1, got {ratios}")
    participants = manifest.participants if hasattr(manifest, "participants") \
        else sorted(set(manifest))
    n = len(participants)
    if n < 3:
        raise ValidationError(f"need >= 3 participants to populate all splits, got {n}")

    n_val = max(1, round(ratios[1] * n))
    n_test = max(1, round(ratios[2] * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValidationError(f"split ratios leave no training participants for n={n}")

    order = np.array(sorted(participants))
    rng = np.random.default_rng(seed)
    rng.shuffle(order)

    assignment = {}
    for p in order[:n_train]:
        assignment[str(p)] = TRAIN
    for p in order[n_train:n_train + n_val]:
        assignment[str(p)] = VAL
    for p in order[n_train + n_val:]:
        assignment[str(p)] = TEST
    return SplitAssignment(assignment=assignment, ratios=tuple(ratios), seed=seed)
