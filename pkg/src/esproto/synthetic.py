"""Procedural stand-in for raw Omniglot.

Writes ``<root>/<alphabet>/<character>/<nn>.png`` trees of 105x105
black-on-white stroke glyphs. Each character has a fixed stroke skeleton;
its drawings jitter the control points, so classes are learnable but not
trivially identical. Used for fixtures and smoke runs when the real
dataset is not available.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

RAW_SIZE = 105


def _skeleton(rng: np.random.Generator) -> list[np.ndarray]:
    strokes = []
    for _ in range(rng.integers(2, 5)):
        points = rng.integers(2, 5)
        strokes.append(rng.uniform(15, 90, size=(points, 2)))
    return strokes


def draw_glyph(strokes, rng: np.random.Generator, jitter: float = 7.0) -> Image.Image:
    im = Image.new("L", (RAW_SIZE, RAW_SIZE), 255)
    draw = ImageDraw.Draw(im)
    shift = rng.normal(0, jitter, size=2)
    width = int(rng.integers(4, 9))
    for stroke in strokes:
        pts = stroke + shift + rng.normal(0, jitter, size=stroke.shape)
        draw.line([tuple(p) for p in pts], fill=0, width=width, joint="curve")
    if rng.random() < 0.5:
        # a stray mark that carries no class information
        draw.line([tuple(p) for p in rng.uniform(10, 95, size=(2, 2))], fill=0, width=width)
    return im


def write_raw_tree(root, alphabets: int, characters_per_alphabet: int, images_per_character: int = 20,
                   seed: int = 0, characters: int | None = None) -> Path:
    """Create a raw tree; ``characters`` caps the total (last alphabet may be short)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    total = alphabets * characters_per_alphabet if characters is None else characters
    made = 0
    for a in range(alphabets):
        for c in range(characters_per_alphabet):
            if made == total:
                return root
            d = root / f"alphabet_{a:02d}" / f"character{c + 1:02d}"
            d.mkdir(parents=True, exist_ok=True)
            strokes = _skeleton(rng)
            for k in range(images_per_character):
                draw_glyph(strokes, rng).save(d / f"{made:04d}_{k + 1:02d}.png")
            made += 1
    return root


def write_omniglot_shaped_tree(root, seed: int = 0) -> Path:
    """1623 characters x 20 drawings, the same shape as raw Omniglot."""
    return write_raw_tree(root, alphabets=50, characters_per_alphabet=33, seed=seed, characters=1623)
