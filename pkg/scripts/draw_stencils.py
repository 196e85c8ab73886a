"""Redraw the predefined mask stencils shipped in src/radap/stencils/.

Stencils are 112x112 and laid out for an aligned frontal face: eyes near
42% of the height, mouth near 74%.
"""

from pathlib import Path

from PIL import Image, ImageDraw

SIZE = 112
OUT = Path(__file__).resolve().parents[1] / "src" / "radap" / "stencils"


def glasses():
    img = Image.new("L", (SIZE, SIZE), 0)
    d = ImageDraw.Draw(img)
    for cx in (36, 76):
        d.ellipse((cx - 17, 33, cx + 17, 59), outline=255, width=9)
    d.rectangle((50, 40, 62, 46), fill=255)
    d.rectangle((6, 40, 20, 46), fill=255)
    d.rectangle((92, 40, 106, 46), fill=255)
    return img


def sticker():
    img = Image.new("L", (SIZE, SIZE), 0)
    ImageDraw.Draw(img).rectangle((40, 8, 71, 39), fill=255)
    return img


def respirator():
    img = Image.new("L", (SIZE, SIZE), 0)
    d = ImageDraw.Draw(img)
    d.polygon([(26, 66), (56, 58), (86, 66), (90, 86), (76, 104), (56, 110),
               (36, 104), (22, 86)], fill=255)
    return img


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    for name, draw in (("glasses", glasses), ("sticker", sticker), ("respirator", respirator)):
        draw().save(OUT / f"{name}.png")
