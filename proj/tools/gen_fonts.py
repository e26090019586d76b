#!/usr/bin/env python3
"""Regenerates the built-in bitmap font documents under fonts/.

mono5x7 is the classic 5x7 column-encoded LCD font; mono8x12 is a bold,
padded variant derived from it.
"""
import json
import pathlib

COLS = [
    (0x00, 0x00, 0x00, 0x00, 0x00), (0x00, 0x00, 0x5F, 0x00, 0x00), (0x00, 0x07, 0x00, 0x07, 0x00),
    (0x14, 0x7F, 0x14, 0x7F, 0x14), (0x24, 0x2A, 0x7F, 0x2A, 0x12), (0x23, 0x13, 0x08, 0x64, 0x62),
    (0x36, 0x49, 0x55, 0x22, 0x50), (0x00, 0x05, 0x03, 0x00, 0x00), (0x00, 0x1C, 0x22, 0x41, 0x00),
    (0x00, 0x41, 0x22, 0x1C, 0x00), (0x08, 0x2A, 0x1C, 0x2A, 0x08), (0x08, 0x08, 0x3E, 0x08, 0x08),
    (0x00, 0x50, 0x30, 0x00, 0x00), (0x08, 0x08, 0x08, 0x08, 0x08), (0x00, 0x60, 0x60, 0x00, 0x00),
    (0x20, 0x10, 0x08, 0x04, 0x02), (0x3E, 0x51, 0x49, 0x45, 0x3E), (0x00, 0x42, 0x7F, 0x40, 0x00),
    (0x42, 0x61, 0x51, 0x49, 0x46), (0x21, 0x41, 0x45, 0x4B, 0x31), (0x18, 0x14, 0x12, 0x7F, 0x10),
    (0x27, 0x45, 0x45, 0x45, 0x39), (0x3C, 0x4A, 0x49, 0x49, 0x30), (0x01, 0x71, 0x09, 0x05, 0x03),
    (0x36, 0x49, 0x49, 0x49, 0x36), (0x06, 0x49, 0x49, 0x29, 0x1E), (0x00, 0x36, 0x36, 0x00, 0x00),
    (0x00, 0x56, 0x36, 0x00, 0x00), (0x00, 0x08, 0x14, 0x22, 0x41), (0x14, 0x14, 0x14, 0x14, 0x14),
    (0x41, 0x22, 0x14, 0x08, 0x00), (0x02, 0x01, 0x51, 0x09, 0x06), (0x32, 0x49, 0x79, 0x41, 0x3E),
    (0x7E, 0x11, 0x11, 0x11, 0x7E), (0x7F, 0x49, 0x49, 0x49, 0x36), (0x3E, 0x41, 0x41, 0x41, 0x22),
    (0x7F, 0x41, 0x41, 0x22, 0x1C), (0x7F, 0x49, 0x49, 0x49, 0x41), (0x7F, 0x09, 0x09, 0x01, 0x01),
    (0x3E, 0x41, 0x41, 0x51, 0x32), (0x7F, 0x08, 0x08, 0x08, 0x7F), (0x00, 0x41, 0x7F, 0x41, 0x00),
    (0x20, 0x40, 0x41, 0x3F, 0x01), (0x7F, 0x08, 0x14, 0x22, 0x41), (0x7F, 0x40, 0x40, 0x40, 0x40),
    (0x7F, 0x02, 0x04, 0x02, 0x7F), (0x7F, 0x04, 0x08, 0x10, 0x7F), (0x3E, 0x41, 0x41, 0x41, 0x3E),
    (0x7F, 0x09, 0x09, 0x09, 0x06), (0x3E, 0x41, 0x51, 0x21, 0x5E), (0x7F, 0x09, 0x19, 0x29, 0x46),
    (0x46, 0x49, 0x49, 0x49, 0x31), (0x01, 0x01, 0x7F, 0x01, 0x01), (0x3F, 0x40, 0x40, 0x40, 0x3F),
    (0x1F, 0x20, 0x40, 0x20, 0x1F), (0x7F, 0x20, 0x18, 0x20, 0x7F), (0x63, 0x14, 0x08, 0x14, 0x63),
    (0x03, 0x04, 0x78, 0x04, 0x03), (0x61, 0x51, 0x49, 0x45, 0x43), (0x00, 0x00, 0x7F, 0x41, 0x41),
    (0x02, 0x04, 0x08, 0x10, 0x20), (0x41, 0x41, 0x7F, 0x00, 0x00), (0x04, 0x02, 0x01, 0x02, 0x04),
    (0x40, 0x40, 0x40, 0x40, 0x40), (0x00, 0x01, 0x02, 0x04, 0x00), (0x20, 0x54, 0x54, 0x54, 0x78),
    (0x7F, 0x48, 0x44, 0x44, 0x38), (0x38, 0x44, 0x44, 0x44, 0x20), (0x38, 0x44, 0x44, 0x48, 0x7F),
    (0x38, 0x54, 0x54, 0x54, 0x18), (0x08, 0x7E, 0x09, 0x01, 0x02), (0x08, 0x14, 0x54, 0x54, 0x3C),
    (0x7F, 0x08, 0x04, 0x04, 0x78), (0x00, 0x44, 0x7D, 0x40, 0x00), (0x20, 0x40, 0x44, 0x3D, 0x00),
    (0x00, 0x7F, 0x10, 0x28, 0x44), (0x00, 0x41, 0x7F, 0x40, 0x00), (0x7C, 0x04, 0x18, 0x04, 0x78),
    (0x7C, 0x08, 0x04, 0x04, 0x78), (0x38, 0x44, 0x44, 0x44, 0x38), (0x7C, 0x14, 0x14, 0x14, 0x08),
    (0x08, 0x14, 0x14, 0x18, 0x7C), (0x7C, 0x08, 0x04, 0x04, 0x08), (0x48, 0x54, 0x54, 0x54, 0x20),
    (0x04, 0x3F, 0x44, 0x40, 0x20), (0x3C, 0x40, 0x40, 0x20, 0x7C), (0x1C, 0x20, 0x40, 0x20, 0x1C),
    (0x3C, 0x40, 0x30, 0x40, 0x3C), (0x44, 0x28, 0x10, 0x28, 0x44), (0x0C, 0x50, 0x50, 0x50, 0x3C),
    (0x44, 0x64, 0x54, 0x4C, 0x44), (0x00, 0x08, 0x36, 0x41, 0x00), (0x00, 0x00, 0x7F, 0x00, 0x00),
    (0x00, 0x41, 0x36, 0x08, 0x00), (0x02, 0x01, 0x02, 0x04, 0x02),
]
assert len(COLS) == 95


def rows5x7(cols):
    return [[(cols[x] >> y) & 1 for x in range(5)] for y in range(7)]


def bold8x12(src):
    out = [[0] * 8 for _ in range(12)]
    for y in range(10):
        for x in range(6):
            v = src[y * 7 // 10][x * 5 // 6]
            if v:
                out[y + 1][x + 1] = 1
                out[y + 1][x + 2] = 1
    return out


def doc(name, w, h, make):
    glyphs = {}
    for i, cols in enumerate(COLS):
        bm = make(rows5x7(cols))
        glyphs[str(32 + i)] = ["".join(str(b) for b in row) for row in bm]
    return {"name": name, "cell_w": w, "cell_h": h, "glyphs": glyphs}


def main():
    root = pathlib.Path(__file__).resolve().parent.parent / "fonts"
    for d in (doc("mono5x7", 5, 7, lambda r: r), doc("mono8x12", 8, 12, bold8x12)):
        (root / f"{d['name']}.json").write_text(json.dumps(d, indent=1) + "\n")


if __name__ == "__main__":
    main()
