import math

from .types import BoxTuple


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def box_iou(a: BoxTuple, b: BoxTuple) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def box_contains(box: BoxTuple, x: float, y: float) -> bool:
    bx, by, bw, bh = box
    return bx <= x <= bx + bw and by <= y <= by + bh


def angular_distance(a: float, b: float) -> float:
    """Smallest absolute difference of two azimuths in degrees, in [0, 180]."""
    diff = (a - b) % 360.0
    return min(diff, 360.0 - diff)


def azimuth_of(dx: float, dy: float) -> float:
    """Azimuth of an image vector, degrees clockwise from image-up."""
    return math.degrees(math.atan2(dx, -dy)) % 360.0


def percent(numerator: float, denominator: float) -> float:
    return 100.0 * numerator / denominator if denominator else 0.0
