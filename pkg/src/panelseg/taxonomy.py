"""The ten-class fouling label space used by every other module.

Class ids 0..9 are normative and index every histogram, weight vector,
confusion matrix and CSV column in the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

IGNORE_ID = 255

CLASS_NAMES = (
    "bare",
    "slime",
    "barnacle",
    "arborescent_bryozoan",
    "encrusting_bryozoan",
    "colonial_tunicate",
    "solitary_tunicate",
    "calcareous_tubeworm",
    "sponge",
    "cnidaria",
)

NUM_CLASSES = len(CLASS_NAMES)

# Display palette embedded in saved masks. Advisory only; the pixel value
# (class id) is the normative content.
PALETTE = (
    (190, 190, 190),  # bare
    (107, 142, 35),   # slime
    (255, 127, 14),   # barnacle
    (148, 103, 189),  # arborescent bryozoan
    (140, 86, 75),    # encrusting bryozoan
    (227, 119, 194),  # colonial tunicate
    (214, 39, 40),    # solitary tunicate
    (31, 119, 180),   # calcareous tubeworm
    (255, 221, 113),  # sponge
    (23, 190, 207),   # cnidaria
)


@dataclass(frozen=True)
class ClassTaxonomy:
    """Ordered (id, name) pairs plus the reserved ignore id."""

    classes: tuple[tuple[int, str], ...] = field(
        default_factory=lambda: tuple(enumerate(CLASS_NAMES))
    )
    ignore_id: int = IGNORE_ID

    def __post_init__(self):
        ids = [cid for cid, _ in self.classes]
        if ids != list(range(len(self.classes))):
            raise ValueError("class ids must be contiguous starting at 0")
        if len(self.classes) != NUM_CLASSES:
            raise ValueError(f"taxonomy must define exactly {NUM_CLASSES} classes")
        if self.ignore_id in ids:
            raise ValueError("ignore_id collides with a class id")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(name for _, name in self.classes)

    def name_of(self, class_id: int) -> str:
        return self.classes[class_id][1]


DEFAULT_TAXONOMY = ClassTaxonomy()
