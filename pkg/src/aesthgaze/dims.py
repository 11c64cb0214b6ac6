"""Registry of the aesthetic evaluation dimensions.

Fifteen active dimensions (4 objective perceptual properties, 11 subjective
affective responses) plus three excluded low-variance dimensions that are kept
in the registry only so that tooling can name and reject them.
"""

from dataclasses import dataclass

from .errors import ValidationError

OBJECTIVE = "objective"
SUBJECTIVE = "subjective"


@dataclass(frozen=True)
class DimensionSpec:
    id: int
    name: str
    polarity: tuple  # (negative pole, positive pole)
    category: str    # "objective" or "subjective"
    excluded: bool = False


_REGISTRY = [
    DimensionSpec(0, "light", ("dark", "bright"), OBJECTIVE),
    DimensionSpec(1, "complexity", ("simple", "complex"), OBJECTIVE),
    DimensionSpec(2, "organization", ("disordered", "organized"), OBJECTIVE),
    DimensionSpec(3, "naturalness", ("artificial", "natural"), OBJECTIVE),
    DimensionSpec(4, "color_comfort", ("uncomfortable_color", "comfortable_color"), SUBJECTIVE),
    DimensionSpec(5, "interest", ("boring", "interesting"), SUBJECTIVE),
    DimensionSpec(6, "valence", ("unpleasant", "pleasant"), SUBJECTIVE),
    DimensionSpec(7, "stimulation", ("calming", "stimulating"), SUBJECTIVE),
    DimensionSpec(8, "vitality", ("lifeless", "vibrant"), SUBJECTIVE),
    DimensionSpec(9, "comfort", ("uncomfortable", "comfortable"), SUBJECTIVE),
    DimensionSpec(10, "relaxation", ("tense", "relaxing"), SUBJECTIVE),
    DimensionSpec(11, "hominess", ("unhomely", "homely"), SUBJECTIVE),
    DimensionSpec(12, "uplift", ("depressing", "uplifting"), SUBJECTIVE),
    DimensionSpec(13, "approachability", ("leave", "enter"), SUBJECTIVE),
    DimensionSpec(14, "explorability", ("unexplorable", "explorable"), SUBJECTIVE),
    # Excluded: too little variance across stimuli to model.
    DimensionSpec(15, "beauty", ("ugly", "beautiful"), SUBJECTIVE, excluded=True),
    DimensionSpec(16, "personality", ("impersonal", "personal"), SUBJECTIVE, excluded=True),
    DimensionSpec(17, "modernity", ("aged", "modern"), SUBJECTIVE, excluded=True),
]

_BY_NAME = {d.name: d for d in _REGISTRY}

N_ACTIVE = 15


def all_dimensions():
    return list(_REGISTRY)


def active_dimensions():
    return [d for d in _REGISTRY if not d.excluded]


def objective_dimensions():
    return [d for d in _REGISTRY if not d.excluded and d.category == OBJECTIVE]


def subjective_dimensions():
    return [d for d in _REGISTRY if not d.excluded and d.category == SUBJECTIVE]


def get(dim_id: int) -> DimensionSpec:
    for d in _REGISTRY:
        if d.id == dim_id:
            return d
    raise ValidationError(f"unknown dimension id {dim_id}")


def by_name(name: str) -> DimensionSpec:
    try:
        return _BY_NAME[name]
    except KeyError:
        raise ValidationError(f"unknown dimension name {name!r}") from None


def require_active(dim_id: int) -> DimensionSpec:
    """Return the spec for an active dimension, rejecting excluded ones."""
    d = get(dim_id)
    if d.excluded:
        raise ValidationError(
            f"dimension {d.name!r} (id {d.id}) is excluded from modeling"
        )
    return d
