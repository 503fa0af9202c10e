# Mask sequences: decoupling overlapping objects and the RLE file format.
import numpy as np

from motiontransfer.masks import MaskSequence, background_mask, decouple, dumps, iou, loads, rle_encode

a = np.zeros((2, 6, 6), bool)
a[:, 1:4, 1:4] = True
b = np.zeros((2, 6, 6), bool)
b[0, 3:6, 3:6] = True
b[1, 2:5, 2:5] = True  # b moves into a
masks = [MaskSequence("a", a), MaskSequence("b", b)]

print("a, frame 0, after removing b's frame-1 footprint:")
print(decouple(0, 0, 1, masks).astype(int))
print("IoU(a@0, b@1) =", round(iou(a[0], b[1]), 4))
print("background cells in frame 1:", int(background_mask(masks, 1).sum()))

print("RLE of a@0:", rle_encode(a[0]))
text = dumps(masks)
back = loads(text)
print("round trip exact:", all(np.array_equal(x.masks, y.masks) for x, y in zip(masks, back)))

try:
    loads(text[:40])
except ValueError as exc:
    print("truncated file ->", exc)
