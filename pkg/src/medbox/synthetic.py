"""Synthetic medicinal-box image generator.

Renders box-like packages with a class-specific color scheme, stripe
pattern, and corner glyph, under per-sample lighting/scale/rotation/
background jitter. Classes 0 and 1 share color scheme and stripes and
differ only by glyph, giving the dataset a deliberately confusable pair.

Generation is deterministic: the same seed produces byte-identical PNGs.
"""
from __future__ import annotations

import colorsys
import json
import os

import numpy as np
from PIL import Image, ImageDraw

from .data import ClassEntry, DatasetManifest, Sample, save_manifest

# 5x5 glyph patterns, designed to stay distinct after downscaling
_GLYPHS = [
    "01110 11111 11111 11111 01110",  # disk
    "10001 01010 00100 01010 10001",  # X
    "10001 10001 11111 10001 10001",  # H
    "11111 00100 00100 00100 11111",  # I
    "11111 10000 11110 10000 11111",  # E
    "00100 01110 11111 01110 00100",  # diamond
    "11011 11011 00000 11011 11011",  # checker
    "11111 10001 10101 10001 11111",  # ring-dot
    "10000 10000 10000 11111 11111",  # L
    "11111 00001 00111 00001 11111",  # bracket
    "01010 11111 01010 11111 01010",  # weave
    "00011 00110 01100 11000 10000",  # slash
    "11100 00100 11111 00100 00111",  # plus-step
    "10101 01010 10101 01010 10101",  # fine checker
    "11111 11111 00000 11111 11111",  # bars
    "00100 00100 11111 00100 00100",  # plus
]


def _class_style(class_index: int, num_classes: int, rng: np.random.Generator) -> dict:
    """Visual identity of one class. Classes 0 and 1 share everything but
    the glyph."""
    base_of = 0 if class_index in (0, 1) else class_index - 1
    # hues spaced evenly over the distinct base styles (classes 0/1 share one)
    n_bases = max(2, num_classes - 1)
    hue = base_of / n_bases
    sat = 0.55 + 0.25 * ((base_of * 7) % 3) / 2.0
    base = tuple(int(255 * v) for v in colorsys.hsv_to_rgb(hue, sat, 0.82))
    stripe_hue = (hue + 0.45) % 1.0
    stripe = tuple(int(255 * v) for v in colorsys.hsv_to_rgb(stripe_hue, 0.7, 0.6))
    glyph_bits = _GLYPHS[class_index % len(_GLYPHS)]
    if class_index >= len(_GLYPHS):
        bits = rng.integers(0, 2, 25)
        glyph_bits = " ".join("".join(str(b) for b in bits[i : i + 5]) for i in range(0, 25, 5))
    return {
        "base": base,
        "stripe": stripe,
        "stripe_angle": ["h", "v", "d"][base_of % 3],
        "stripe_step": 8 + (base_of % 3) * 3,
        "glyph": glyph_bits,
    }


def _render_box(style: dict, scale: float, theta_deg: float, shift: tuple[int, int],
                bg: tuple, size: int) -> Image.Image:
    """Compose one sample at 2x resolution, then downsample for soft edges."""
    big = size * 2
    canvas = Image.new("RGB", (big, big))
    draw = ImageDraw.Draw(canvas)
    (r0, g0, b0), (r1, g1, b1) = bg
    for y in range(big):
        t = y / (big - 1)
        draw.line([(0, y), (big, y)], fill=(
            int(r0 + (r1 - r0) * t), int(g0 + (g1 - g0) * t), int(b0 + (b1 - b0) * t)))

    side = int(big * 0.68 * scale)
    box = Image.new("RGBA", (side, side), (0, 0, 0, 0))
    bd = ImageDraw.Draw(box)
    bd.rounded_rectangle([0, 0, side - 1, side - 1], radius=side // 10,
                         fill=style["base"] + (255,),
                         outline=tuple(int(v * 0.55) for v in style["base"]) + (255,),
                         width=max(2, side // 28))
    step = max(4, int(style["stripe_step"] * scale))
    wdt = max(2, step // 3)
    if style["stripe_angle"] == "h":
        for y in range(step, side - step // 2, step):
            bd.line([(side // 14, y), (side - side // 14, y)], fill=style["stripe"] + (255,), width=wdt)
    elif style["stripe_angle"] == "v":
        for x in range(step, side - step // 2, step):
            bd.line([(x, side // 14), (x, side - side // 14)], fill=style["stripe"] + (255,), width=wdt)
    else:
        for d in range(-side, side, step):
            bd.line([(d, side), (d + side, 0)], fill=style["stripe"] + (255,), width=wdt)

    # corner badge with the class glyph
    badge = int(side * 0.46)
    bx = by = side // 12
    bd.rounded_rectangle([bx, by, bx + badge, by + badge], radius=badge // 8,
                         fill=(248, 246, 240, 255))
    rows = style["glyph"].split()
    cell = badge // 7
    ox, oy = bx + cell, by + cell
    for gy, row in enumerate(rows):
        for gx, bit in enumerate(row):
            if bit == "1":
                bd.rectangle([ox + gx * cell, oy + gy * cell,
                              ox + (gx + 1) * cell - 1, oy + (gy + 1) * cell - 1],
                             fill=(25, 22, 30, 255))

    box = box.rotate(theta_deg, resample=Image.BILINEAR, expand=True)
    px = (big - box.width) // 2 + shift[0]
    py = (big - box.height) // 2 + shift[1]
    canvas.paste(box, (px, py), box)
    return canvas.resize((size, size), resample=Image.BILINEAR)


def generate_synthetic(classes: int, per_class: int, seed: int, out_dir,
                       image_size: int = 64) -> DatasetManifest:
    """Render the dataset under ``out_dir`` and write manifest.json there."""
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)

    entries = [ClassEntry(f"med-{c:02d}", f"Boxigen {c:02d}") for c in range(classes)]
    samples = []
    for c in range(classes):
        style = _class_style(c, classes, np.random.default_rng((seed, 7919, c)))
        rng = np.random.default_rng((seed, c))
        for i in range(per_class):
            brightness = 1.0 + rng.uniform(-0.2, 0.2)
            scale = 1.0 + rng.uniform(-0.15, 0.15)
            theta = rng.uniform(-10.0, 10.0)
            shift = (int(rng.integers(-image_size // 10, image_size // 10 + 1)),
                     int(rng.integers(-image_size // 10, image_size // 10 + 1)))
            gray = rng.integers(170, 245)
            tint = rng.integers(-18, 19, size=3)
            c0 = tuple(int(np.clip(gray + t, 0, 255)) for t in tint)
            c1 = tuple(int(np.clip(gray - 35 + t, 0, 255)) for t in tint)
            img = _render_box(style, scale, theta, shift, (c0, c1), image_size)
            arr = np.asarray(img, dtype=np.float32) * brightness
            img = Image.fromarray(np.clip(arr, 0, 255).astype(np.uint8))
            rel = os.path.join("images", f"{entries[c].id}_{i:03d}.png")
            img.save(os.path.join(out_dir, rel))
            samples.append(Sample(rel, c, "synthetic"))

    manifest = DatasetManifest(entries, samples, version=1, root=os.path.abspath(out_dir))
    save_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest


def write_demo_catalog(manifest: DatasetManifest, path) -> None:
    """Medicine catalog covering the manifest's classes (demo text)."""
    records = []
    for i, c in enumerate(manifest.classes):
        records.append({
            "id": c.id,
            "name": c.name,
            "class_index": i,
            "posology": f"One tablet of {c.name} twice daily after meals.",
            "pil": {
                "usage": f"{c.name} relieves synthetic-benchmark symptoms. "
                         "Swallow whole with water.",
                "warnings": "Do not exceed two tablets in 24 hours. "
                            "Keep out of reach of children.",
                "interactions": "Avoid combining with other boxigen-family "
                                "products or with alcohol.",
            },
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, indent=1)
        f.write("\n")
