"""Hand-computed evaluation fixtures shared by unit and acceptance tests."""

from detal.core import Detection, Segment


def det(vid, s, e, c, q):
    return Detection(Segment(s, e), c, q, vid)


# two GTs, three ranked detections, one false positive between the hits:
# AP = (1/1)*0.5 + (2/3)*0.5 = 5/6
FIVE_SIXTHS_GT = [("v", Segment(0, 4), 0), ("v", Segment(10, 14), 0)]
FIVE_SIXTHS_DETS = [det("v", 0, 4, 0, 0.9), det("v", 5, 9, 0, 0.8), det("v", 10, 14, 0, 0.7)]

# three videos, two classes
THREE_VIDEO_GT = [
    ("a", Segment(0, 9), 0),
    ("b", Segment(5, 14), 0),
    ("b", Segment(0, 4), 1),
    ("c", Segment(10, 19), 1),
]
THREE_VIDEO_DETS = [
    det("a", 0, 9, 0, 0.9),    # tIoU 1.0
    det("b", 10, 14, 0, 0.8),  # tIoU 0.5
    det("c", 0, 4, 0, 0.7),    # no class-0 GT in c
    det("b", 0, 4, 1, 0.6),    # tIoU 1.0
    det("c", 12, 19, 1, 0.5),  # tIoU 0.8
    det("c", 10, 19, 1, 0.4),  # tIoU 1.0, duplicate once the GT is taken
]
# walked by hand:
#   thr 0.5: class 0 hits at ranks 1,2 -> 1.0; class 1 hits at ranks 1,2 -> 1.0
#   thr 0.7: class 0 hit at rank 1 only -> 1/2; class 1 hits at ranks 1,2 -> 1.0
#   thr 0.9: class 0 -> 1/2; class 1 hits at ranks 1,3 -> (1 + 2/3) / 2 = 5/6
THREE_VIDEO_AP = {
    0.5: {0: 1.0, 1: 1.0},
    0.7: {0: 0.5, 1: 1.0},
    0.9: {0: 0.5, 1: 5 / 6},
}
THREE_VIDEO_MAP = {0.5: 1.0, 0.7: 0.75, 0.9: 2 / 3}
