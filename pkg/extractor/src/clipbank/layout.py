"""The 18-view multi-scale crop layout of the TOGB bank format.

Order is part of the format contract: global view first, then the 3x3 grid
row-major, the 2x2 grid row-major, vertical halves left/right, horizontal
halves top/bottom. Rects are (x0, y0, x1, y1) in unit-square coordinates.
"""

VIEWS = (
    [("global", (0.0, 0.0, 1.0, 1.0))]
    + [("grid3x3", (gx / 3, gy / 3, (gx + 1) / 3, (gy + 1) / 3))
       for gy in range(3) for gx in range(3)]
    + [("grid2x2", (gx / 2, gy / 2, (gx + 1) / 2, (gy + 1) / 2))
       for gy in range(2) for gx in range(2)]
    + [("vhalf", (0.0, 0.0, 0.5, 1.0)), ("vhalf", (0.5, 0.0, 1.0, 1.0))]
    + [("hhalf", (0.0, 0.0, 1.0, 0.5)), ("hhalf", (0.0, 0.5, 1.0, 1.0))]
)


def crop_boxes(width, height):
    """Pixel-space crop boxes for one image, in layout order."""
    boxes = []
    for _, (x0, y0, x1, y1) in VIEWS:
        boxes.append((round(x0 * width), round(y0 * height),
                      round(x1 * width), round(y1 * height)))
    return boxes
