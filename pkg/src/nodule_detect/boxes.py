"""Axis-aligned boxes in pixel coordinates, corner form ``(x1, y1, x2, y2)``."""

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidArgumentError(f"degenerate box {tuple(self)}")

    def __iter__(self):
        return iter((self.x1, self.y1, self.x2, self.y2))

    @property
    def width(self):
        return self.x2 - self.x1

    @property
    def height(self):
        return self.y2 - self.y1

    @property
    def area(self):
        return self.width * self.height

    def as_array(self):
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, a):
        x1, y1, x2, y2 = (float(v) for v in a)
        return cls(x1, y1, x2, y2)

    def scaled(self, sx, sy):
        return Box(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


def as_box_array(boxes):
    """Coerce a Box, a sequence of Boxes or an array-like to an ``(N, 4)`` float64 array."""
    if isinstance(boxes, Box):
        return boxes.as_array()[None]
    if isinstance(boxes, np.ndarray):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    boxes = list(boxes)
    if not boxes:
        return np.zeros((0, 4), dtype=np.float64)
    if np.isscalar(boxes[0]):
        return np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.array([list(b) for b in boxes], dtype=np.float64).reshape(-1, 4)


def to_center_form(boxes):
    b = as_box_array(boxes)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    return b[:, 0] + 0.5 * w, b[:, 1] + 0.5 * h, w, h


def clip_boxes(boxes, width, height):
    b = as_box_array(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, width)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, height)
    return b


def valid_mask(boxes, min_size=1e-6):
    b = as_box_array(boxes)
    return ((b[:, 2] - b[:, 0]) > min_size) & ((b[:, 3] - b[:, 1]) > min_size)
