"""Omniglot ingestion, rotation augmentation, class splits and episode sampling."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

IMAGE_SIZE = 32
IMAGES_PER_CLASS = 20
OMNIGLOT_CHARACTERS = 1623
ROTATIONS = (0, 90, 180, 270)
CANONICAL_SPLIT = {"train": 4804, "val": 1012, "test": 676}
SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif"}

_CLASS_HEADER = struct.Struct("<IHHH")
MANIFEST = "manifest.json"


class IngestionError(RuntimeError):
    def __init__(self, paths):
        self.paths = [str(p) for p in paths]
        shown = "\n  ".join(self.paths[:20])
        more = f"\n  ... and {len(self.paths) - 20} more" if len(self.paths) > 20 else ""
        super().__init__(f"{len(self.paths)} unreadable image(s):\n  {shown}{more}")


class DatasetIntegrityError(RuntimeError):
    pass


class CapacityError(ValueError):
    pass


@dataclass
class ClassTable:
    """Classes of one split held in memory.

    ``images`` has shape (classes, images_per_class, 32, 32), float32 in [0, 1].
    """

    split: str
    class_ids: np.ndarray
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.class_ids)

    @property
    def images_per_class(self) -> int:
        return self.images.shape[1]


@dataclass
class Episode:
    way: int
    shot: int
    query_count: int
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray
    class_ids: np.ndarray
    # indices of the images drawn from each class, support first
    image_indices: np.ndarray

    @property
    def images(self) -> np.ndarray:
        """Support and query stacked into one batch (support rows first)."""
        return np.concatenate([self.support, self.query], axis=0)


# -- ingestion ---------------------------------------------------------------


def find_characters(raw_dir) -> list[tuple[Path, list[Path]]]:
    """Character directories (alphabet/character/*.png) below ``raw_dir``, sorted."""
    raw_dir = Path(raw_dir)
    found: dict[Path, list[Path]] = {}
    for path in sorted(raw_dir.rglob("*")):
        if path.is_file() and path.suffix.lower() in IMAGE_SUFFIXES:
            found.setdefault(path.parent, []).append(path)
    return sorted(found.items(), key=lambda kv: kv[0].relative_to(raw_dir).as_posix())


def load_image(path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Read an Omniglot image as a size x size float32 array with ink = 1."""
    with Image.open(path) as im:
        gray = np.asarray(im.convert("L"), dtype=np.float32) / 255.0
    inverted = Image.fromarray(1.0 - gray)
    resized = np.asarray(inverted.resize((size, size), Image.BILINEAR), dtype=np.float32)
    return np.clip(resized, 0.0, 1.0)


def rotate(images: np.ndarray, degrees: int) -> np.ndarray:
    """Rotate the trailing two axes counter-clockwise by a multiple of 90 degrees."""
    if degrees % 90:
        raise ValueError(f"rotation must be a multiple of 90, got {degrees}")
    return np.ascontiguousarray(np.rot90(images, k=degrees // 90, axes=(-2, -1)))


def write_class_file(path, class_id: int, images: np.ndarray) -> None:
    count, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(_CLASS_HEADER.pack(class_id, count, h, w))
        fh.write(np.ascontiguousarray(images, dtype="<f4").tobytes())


def read_class_file(path) -> tuple[int, np.ndarray]:
    data = Path(path).read_bytes()
    class_id, count, h, w = _CLASS_HEADER.unpack_from(data)
    body = data[_CLASS_HEADER.size :]
    if len(body) != 4 * count * h * w:
        raise DatasetIntegrityError(f"{path}: payload size does not match header")
    images = np.frombuffer(body, dtype="<f4").astype(np.float32).reshape(count, h, w)
    return class_id, images


def split_sizes_for(total_classes: int, expected_characters: int) -> dict[str, int]:
    if expected_characters == OMNIGLOT_CHARACTERS:
        return dict(CANONICAL_SPLIT)
    # same proportions on reduced trees (used for fixtures)
    train = round(total_classes * CANONICAL_SPLIT["train"] / 6492)
    val = round(total_classes * CANONICAL_SPLIT["val"] / 6492)
    return {"train": train, "val": val, "test": total_classes - train - val}


def prepare_dataset(
    raw_dir,
    out_dir,
    seed: int,
    *,
    expected_characters: int = OMNIGLOT_CHARACTERS,
    images_per_class: int = IMAGES_PER_CLASS,
) -> dict[str, ClassTable]:
    """Resize, rotate, split and cache raw Omniglot.

    Every character becomes four classes (0/90/180/270 degrees); class id is
    ``4 * character_index + rotation_index`` over the sorted character list.
    Classes are shuffled with ``seed`` and partitioned train/val/test.
    """
    raw_dir, out_dir = Path(raw_dir), Path(out_dir)
    characters = find_characters(raw_dir)
    if len(characters) != expected_characters:
        raise DatasetIntegrityError(
            f"found {len(characters)} character directories under {raw_dir}, "
            f"expected {expected_characters}"
        )
    bad_count = [d for d, files in characters if len(files) != images_per_class]
    if bad_count:
        raise DatasetIntegrityError(
            f"{len(bad_count)} characters do not have {images_per_class} images, "
            f"e.g. {bad_count[0]}"
        )

    base = np.empty((len(characters), images_per_class, IMAGE_SIZE, IMAGE_SIZE), np.float32)
    failed = []
    for ci, (_, files) in enumerate(characters):
        for ii, f in enumerate(files):
            try:
                base[ci, ii] = load_image(f)
            except (OSError, UnidentifiedImageError, ValueError):
                failed.append(f)
    if failed:
        raise IngestionError(failed)
    log.info("loaded %d characters from %s", len(characters), raw_dir)

    total = len(characters) * len(ROTATIONS)
    sizes = split_sizes_for(total, expected_characters)
    order = np.random.default_rng(seed).permutation(total)
    bounds = np.cumsum([sizes[s] for s in SPLITS])
    assignment = dict(zip(SPLITS, np.split(order, bounds[:-1])))

    manifest = {
        "seed": seed,
        "source": str(raw_dir),
        "image_size": IMAGE_SIZE,
        "images_per_class": images_per_class,
        "splits": {},
        "classes": {},
    }
    tables = {}
    for split in SPLITS:
        ids = np.sort(assignment[split])
        (out_dir / split).mkdir(parents=True, exist_ok=True)
        images = np.empty((len(ids), images_per_class, IMAGE_SIZE, IMAGE_SIZE), np.float32)
        for row, cid in enumerate(ids):
            char_index, rot_index = divmod(int(cid), len(ROTATIONS))
            images[row] = rotate(base[char_index], ROTATIONS[rot_index])
            write_class_file(out_dir / split / f"{cid}.bin", int(cid), images[row])
            rel = characters[char_index][0].relative_to(raw_dir).as_posix()
            manifest["classes"][str(cid)] = {"character": rel, "rotation": ROTATIONS[rot_index]}
        manifest["splits"][split] = [int(c) for c in ids]
        tables[split] = ClassTable(split, ids.astype(np.int64), images)
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return tables


def load_split(data_dir, split: str) -> ClassTable:
    data_dir = Path(data_dir)
    manifest_path = data_dir / MANIFEST
    if not manifest_path.exists():
        raise FileNotFoundError(f"no prepared dataset at {data_dir} (missing {MANIFEST})")
    manifest = json.loads(manifest_path.read_text())
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in manifest; have {list(manifest['splits'])}")
    ids = manifest["splits"][split]
    per_class = manifest["images_per_class"]
    size = manifest["image_size"]
    images = np.empty((len(ids), per_class, size, size), np.float32)
    for row, cid in enumerate(ids):
        got, imgs = read_class_file(data_dir / split / f"{cid}.bin")
        if got != cid or imgs.shape != (per_class, size, size):
            raise DatasetIntegrityError(f"class file {split}/{cid}.bin is inconsistent")
        images[row] = imgs
    return ClassTable(split, np.asarray(ids, dtype=np.int64), images)


# -- sampling ----------------------------------------------------------------


def sample_episode(
    table: ClassTable, way: int, shot: int, query_count: int, rng: np.random.Generator
) -> Episode:
    per_class = table.images_per_class
    if shot + query_count > per_class:
        raise CapacityError(
            f"shot + query = {shot + query_count} exceeds {per_class} images per class"
        )
    if way > len(table):
        raise CapacityError(f"{way}-way episode needs more than {len(table)} classes")
    rows = rng.choice(len(table), size=way, replace=False)
    picks = np.stack(
        [rng.choice(per_class, size=shot + query_count, replace=False) for _ in rows]
    )
    chosen = table.images[rows[:, None], picks]  # (way, shot+query, H, W)
    h, w = chosen.shape[-2:]
    support = chosen[:, :shot].reshape(way * shot, 1, h, w)
    query = chosen[:, shot:].reshape(way * query_count, 1, h, w)
    labels = np.arange(way)
    return Episode(
        way=way,
        shot=shot,
        query_count=query_count,
        support=support,
        support_labels=np.repeat(labels, shot),
        query=query,
        query_labels=np.repeat(labels, query_count),
        class_ids=table.class_ids[rows],
        image_indices=picks,
    )
