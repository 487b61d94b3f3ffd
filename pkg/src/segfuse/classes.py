"""Detection class vocabulary used throughout the pipeline."""

from enum import IntEnum


class KittiClass(IntEnum):
    """Index into the 4-wide semantic block (s0..s3)."""

    UNLABELED = 0
    CAR = 1
    PEDESTRIAN = 2
    CYCLIST = 3

    @property
    def label_name(self):
        return _LABEL_NAMES[self]

    @classmethod
    def from_name(cls, name):
        """Parse either a KITTI label-file name ("Car") or a config keyword ("car")."""
        key = name.strip().lower()
        for member, label in _LABEL_NAMES.items():
            if key == label.lower() or key == member.name.lower():
                return member
        raise ValueError(f"unknown class name {name!r}")


_LABEL_NAMES = {
    KittiClass.UNLABELED: "Unlabeled",
    KittiClass.CAR: "Car",
    KittiClass.PEDESTRIAN: "Pedestrian",
    KittiClass.CYCLIST: "Cyclist",
}

NUM_CLASSES = len(KittiClass)
DETECTION_CLASSES = (KittiClass.CAR, KittiClass.PEDESTRIAN, KittiClass.CYCLIST)


def class_from_label_name(name):
    """Map a KITTI object-label type string to a detection class, or None."""
    for member in DETECTION_CLASSES:
        if member.label_name == name:
            return member
    return None
