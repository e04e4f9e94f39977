"""Dataset persistence, patch tiling, synthetic scene generation, and
checkpoint serialization."""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .config import RunConfig
from .supervision import InstanceAnnotation, box_iou_matrix, mask_bbox
from .tape import linear_resize_matrix

CHECKPOINT_MAGIC = b"SMCKPT01"


class CheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run-length encoding (column-major, leading zero-run)


@dataclass
class RleMask:
    size: tuple            # (height, width)
    counts: list[int]      # alternating 0-run / 1-run lengths

    def __post_init__(self):
        h, w = self.size
        if sum(self.counts) != h * w:
            raise ValueError(f"rle counts sum {sum(self.counts)} != {h}*{w}")
        if any(c < 0 for c in self.counts):
            raise ValueError("rle counts must be non-negative")


def rle_encode(mask: np.ndarray) -> RleMask:
    mask = np.asarray(mask).astype(bool)
    h, w = mask.shape
    flat = mask.T.ravel()
    if flat.size == 0:
        return RleMask((h, w), [0])
    edges = np.nonzero(np.diff(flat))[0] + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return RleMask((h, w), [int(c) for c in counts])


def rle_decode(rle: RleMask) -> np.ndarray:
    h, w = rle.size
    flat = np.zeros(h * w, dtype=bool)
    pos = 0
    val = False
    for run in rle.counts:
        if val:
            flat[pos : pos + run] = True
        pos += run
        val = not val
    if pos != h * w:
        raise ValueError(f"rle counts cover {pos} pixels, expected {h * w}")
    return flat.reshape(w, h).T


def rle_area(rle: RleMask) -> int:
    return int(sum(rle.counts[1::2]))


# ---------------------------------------------------------------------------
# manifest


@dataclass
class DatasetManifest:
    images: list = field(default_factory=list)        # {id, file_name, height, width}
    annotations: list = field(default_factory=list)   # {id, image_id, category_id, segmentation, bbox, area}
    categories: list = field(default_factory=list)    # {id, name}

    def validate(self) -> None:
        image_ids = {im["id"] for im in self.images}
        sizes = {im["id"]: (im["height"], im["width"]) for im in self.images}
        cat_ids = {c["id"] for c in self.categories}
        for ann in self.annotations:
            if ann["image_id"] not in image_ids:
                raise ValueError(f"annotation {ann['id']} references missing image {ann['image_id']}")
            if ann["category_id"] not in cat_ids:
                raise ValueError(f"annotation {ann['id']} has unknown category {ann['category_id']}")
            seg = ann["segmentation"]
            if tuple(seg["size"]) != sizes[ann["image_id"]]:
                raise ValueError(f"annotation {ann['id']} RLE size mismatch")
            rle = RleMask(tuple(seg["size"]), list(seg["counts"]))
            if rle_area(rle) != ann["area"]:
                raise ValueError(f"annotation {ann['id']} area mismatch")

    def save(self, path) -> None:
        payload = {"images": self.images, "annotations": self.annotations, "categories": self.categories}
        _atomic_write_text(path, json.dumps(payload, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        with open(path) as f:
            d = json.load(f)
        m = cls(images=d["images"], annotations=d["annotations"], categories=d["categories"])
        m.validate()
        return m

    def instances_for(self, image_id: int) -> list[InstanceAnnotation]:
        out = []
        for ann in self.annotations:
            if ann["image_id"] != image_id:
                continue
            seg = ann["segmentation"]
            mask = rle_decode(RleMask(tuple(seg["size"]), list(seg["counts"])))
            out.append(
                InstanceAnnotation(
                    class_id=ann["category_id"], mask=mask, bbox=tuple(ann["bbox"]), area=ann["area"]
                )
            )
        return out


def annotation_record(ann_id: int, image_id: int, inst: InstanceAnnotation) -> dict:
    rle = rle_encode(inst.mask)
    return {
        "id": ann_id,
        "image_id": image_id,
        "category_id": int(inst.class_id),
        "segmentation": {"size": list(rle.size), "counts": rle.counts},
        "bbox": [float(v) for v in inst.bbox],
        "area": int(inst.area),
    }


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        f.write(text)
    os.replace(tmp, path)


def _atomic_write_bytes(path, blob: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def save_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


# ---------------------------------------------------------------------------
# tiling


@dataclass
class TilePatch:
    image: np.ndarray
    annotations: list[InstanceAnnotation]
    origin: tuple    # (x, y) of the patch's top-left corner


def tile_origins(dim: int, patch: int, stride: int) -> list[int]:
    """Origins at stride multiples, final origin clamped to dim - patch."""
    if stride <= 0:
        raise ValueError("stride must be positive")
    if stride > patch:
        raise ValueError(f"stride {stride} larger than patch {patch} would leave coverage gaps")
    if patch > dim:
        raise ValueError(f"patch {patch} exceeds image dimension {dim}")
    last = dim - patch
    origins = list(range(0, last + 1, stride))
    if origins[-1] != last:
        origins.append(last)
    return origins


def tile(
    image: np.ndarray,
    annotations: list[InstanceAnnotation],
    patch: int = 800,
    stride: int = 200,
    keep_empty: bool = False,
    min_area: int = 10,
) -> list[TilePatch]:
    """Slide a patch window; clip annotations and drop slivers under min_area."""
    h, w = image.shape[:2]
    out = []
    for oy in tile_origins(h, patch, stride):
        for ox in tile_origins(w, patch, stride):
            clipped = []
            for inst in annotations:
                sub = inst.mask[oy : oy + patch, ox : ox + patch]
                area = int(sub.sum())
                if area < min_area:
                    continue
                clipped.append(InstanceAnnotation(class_id=inst.class_id, mask=sub.copy()))
            if clipped or keep_empty:
                out.append(TilePatch(image[oy : oy + patch, ox : ox + patch].copy(), clipped, (ox, oy)))
    return out


def tile_dataset(manifest: DatasetManifest, images: dict, patch: int, stride: int, keep_empty: bool = False):
    """Tile every image in a manifest; returns (manifest, images) for the patches."""
    out_manifest = DatasetManifest(categories=[dict(c) for c in manifest.categories])
    out_images: dict[int, np.ndarray] = {}
    next_img, next_ann = 1, 1
    for im in manifest.images:
        insts = manifest.instances_for(im["id"])
        for patch_out in tile(images[im["id"]], insts, patch, stride, keep_empty):
            out_images[next_img] = patch_out.image
            out_manifest.images.append(
                {
                    "id": next_img,
                    "file_name": f"patch_{next_img:05d}.png",
                    "height": patch_out.image.shape[0],
                    "width": patch_out.image.shape[1],
                    "origin": list(patch_out.origin),
                    "source_image_id": im["id"],
                }
            )
            for inst in patch_out.annotations:
                out_manifest.annotations.append(annotation_record(next_ann, next_img, inst))
                next_ann += 1
            next_img += 1
    return out_manifest, out_images


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthConfig:
    num_images: int = 16
    image_size: int = 256
    classes: tuple = ("disc", "rectangle", "bar")
    scale_range: tuple = (0.08, 0.7)
    instances: tuple = (2, 5)
    clutter: int = 6
    texture: float = 0.15
    placement_retries: int = 30
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.scale_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError("scale_range must satisfy 0 < min <= max <= 1")
        unknown = set(self.classes) - set(SHAPE_ARCHETYPES)
        if unknown:
            raise ValueError(f"unknown shape archetypes: {sorted(unknown)}")

    @classmethod
    def from_run_config(cls, cfg: RunConfig, seed: int | None = None) -> "SynthConfig":
        return cls(
            num_images=cfg["synth.num_images"],
            image_size=cfg["synth.image_size"],
            classes=tuple(cfg["synth.classes"]),
            scale_range=tuple(cfg["synth.scale_range"]),
            instances=tuple(cfg["synth.instances"]),
            clutter=cfg["synth.clutter"],
            texture=cfg["synth.texture"],
            placement_retries=cfg["synth.placement_retries"],
            seed=cfg["seed"] if seed is None else seed,
        )


SHAPE_ARCHETYPES = ("disc", "rectangle", "bar", "ring")

_CLASS_COLORS = {
    "disc": (0.85, 0.25, 0.2),
    "rectangle": (0.2, 0.55, 0.85),
    "bar": (0.9, 0.75, 0.2),
    "ring": (0.3, 0.75, 0.35),
}


def _value_noise(rng, size: int, amplitude: float) -> np.ndarray:
    """Multi-octave bilinear value noise in [-amplitude, amplitude]."""
    total = np.zeros((size, size))
    for cells in (4, 8, 16):
        grid = rng.uniform(-1, 1, (cells, cells))
        mh = linear_resize_matrix(cells, size)
        total += mh @ grid @ mh.T / 2.0
    return total * amplitude / 1.5


def _draw_shape(rng, archetype: str, size: int, side: float):
    """Rasterize one shape; returns (mask bool (size,size)) or None if off-image."""
    canvas = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(canvas)
    cx = rng.uniform(side / 2, size - side / 2)
    cy = rng.uniform(side / 2, size - side / 2)
    if archetype == "disc":
        rx = side / 2
        ry = side / 2 * rng.uniform(0.8, 1.0)
        draw.ellipse([cx - rx, cy - ry, cx + rx, cy + ry], fill=255)
    elif archetype == "rectangle":
        w = side
        h = side * rng.uniform(0.6, 1.0)
        draw.rectangle([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], fill=255)
    elif archetype == "bar":
        length = side
        width = max(side * rng.uniform(0.15, 0.3), 2.0)
        ang = rng.uniform(0, np.pi)
        dx, dy = np.cos(ang), np.sin(ang)
        px, py = -dy, dx
        pts = []
        for sx, sy in ((-1, -1), (-1, 1), (1, 1), (1, -1)):
            pts.append(
                (cx + sx * dx * length / 2 + sy * px * width / 2,
                 cy + sx * dy * length / 2 + sy * py * width / 2)
            )
        draw.polygon(pts, fill=255)
    elif archetype == "ring":
        rx = side / 2
        draw.ellipse([cx - rx, cy - rx, cx + rx, cy + rx], fill=255)
        inner = rx * rng.uniform(0.45, 0.6)
        draw.ellipse([cx - inner, cy - inner, cx + inner, cy + inner], fill=0)
    else:
        raise ValueError(f"unknown archetype {archetype}")
    mask = np.asarray(canvas) > 0
    return mask if mask.any() else None


def synth_generate(cfg: SynthConfig):
    """Textured background + distractor clutter + labeled shape instances.

    Deterministic per seed. Returns (manifest, {image_id: float image}).
    """
    rng = np.random.default_rng(cfg.seed)
    size = cfg.image_size
    manifest = DatasetManifest(
        categories=[{"id": i + 1, "name": name} for i, name in enumerate(cfg.classes)]
    )
    images: dict[int, np.ndarray] = {}
    ann_id = 1
    log_lo, log_hi = np.log(cfg.scale_range[0] * size), np.log(cfg.scale_range[1] * size)

    for img_id in range(1, cfg.num_images + 1):
        base = rng.uniform(0.3, 0.5)
        img = np.full((size, size, 3), base)
        if cfg.texture > 0:
            for ch in range(3):
                img[:, :, ch] += _value_noise(rng, size, cfg.texture)

        # distractor clutter: class-colored shapes, unlabeled, kept small
        clutter_lo = np.log(max(0.02 * size, 3.0))
        clutter_hi = np.log(max(0.12 * size, 4.0))
        for _ in range(cfg.clutter):
            archetype = cfg.classes[rng.integers(len(cfg.classes))]
            side = float(np.exp(rng.uniform(clutter_lo, clutter_hi)))
            mask = _draw_shape(rng, archetype, size, side)
            if mask is None:
                continue
            color = np.array(_CLASS_COLORS[archetype]) + rng.uniform(-0.25, 0.25, 3)
            blend = rng.uniform(0.35, 0.6)
            img[mask] = (1 - blend) * img[mask] + blend * np.clip(color, 0, 1)

        # labeled instances; later paint occludes earlier, masks track visibility
        n_instances = int(rng.integers(cfg.instances[0], cfg.instances[1] + 1))
        placed: list[tuple[int, np.ndarray]] = []
        placed_boxes: list[tuple] = []
        for _ in range(n_instances):
            for _attempt in range(cfg.placement_retries):
                cls_idx = int(rng.integers(len(cfg.classes)))
                archetype = cfg.classes[cls_idx]
                side = float(np.clip(np.exp(rng.uniform(log_lo, log_hi)), 4.0, size - 2.0))
                mask = _draw_shape(rng, archetype, size, side)
                if mask is None:
                    continue
                box = mask_bbox(mask)
                if placed_boxes and box_iou_matrix(np.array([box]), np.array(placed_boxes)).max() > 0.3:
                    continue
                color = np.clip(np.array(_CLASS_COLORS[archetype]) + rng.uniform(-0.08, 0.08, 3), 0, 1)
                img[mask] = color
                for _, earlier in placed:
                    earlier &= ~mask
                placed.append((cls_idx + 1, mask))
                placed_boxes.append(box)
                break

        for cls_id, mask in placed:
            if mask.sum() < 10:
                continue
            inst = InstanceAnnotation(class_id=cls_id, mask=mask)
            manifest.annotations.append(annotation_record(ann_id, img_id, inst))
            ann_id += 1

        img = np.clip(img, 0.0, 1.0)
        images[img_id] = img
        manifest.images.append(
            {"id": img_id, "file_name": f"synth_{img_id:05d}.png", "height": size, "width": size}
        )
    manifest.validate()
    return manifest, images


def save_dataset(manifest: DatasetManifest, images: dict, out_dir) -> None:
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    by_id = {im["id"]: im for im in manifest.images}
    for img_id, arr in images.items():
        save_image(os.path.join(out_dir, "images", by_id[img_id]["file_name"]), arr)
    manifest.save(os.path.join(out_dir, "manifest.json"))


def load_dataset(dataset_dir):
    manifest = DatasetManifest.load(os.path.join(dataset_dir, "manifest.json"))
    images = {
        im["id"]: load_image(os.path.join(dataset_dir, "images", im["file_name"]))
        for im in manifest.images
    }
    return manifest, images


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_save(params: dict, opt_state: dict | None, config: RunConfig, path) -> None:
    """Versioned binary container with a config hash and trailing sha256."""

    def describe(arrays: dict, blobs: list):
        meta = []
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            blobs.append(arr.tobytes())
            meta.append({"name": name, "shape": list(arr.shape), "dtype": str(arr.dtype)})
        return meta

    blobs: list[bytes] = []
    header = {
        "version": 1,
        "arch_hash": config.arch_hash(),
        "config": config.snapshot(),
        "params": describe(params, blobs),
        "opt": describe(opt_state or {}, blobs),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    _atomic_write_bytes(path, body + digest)


def checkpoint_load(path, expect_config: RunConfig | None = None):
    """Returns (params, opt_state, config). Raises CheckpointError on damage
    or on an architecture-config mismatch."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 + 32:
        raise CheckpointError("checkpoint file truncated")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch (truncated or corrupted)")
    if body[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", body[off : off + 8])
    off += 8
    header = json.loads(body[off : off + hlen].decode())
    off += hlen
    if header.get("version") != 1:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    config = RunConfig(header["config"])
    if expect_config is not None and expect_config.arch_hash() != header["arch_hash"]:
        raise CheckpointError(
            f"architecture config hash mismatch: checkpoint {header['arch_hash']}, expected {expect_config.arch_hash()}"
        )

    def restore(meta):
        nonlocal off
        arrays = {}
        for m in meta:
            nbytes = int(np.prod(m["shape"]) if m["shape"] else 1) * np.dtype(m["dtype"]).itemsize
            arrays[m["name"]] = np.frombuffer(body[off : off + nbytes], dtype=m["dtype"]).reshape(m["shape"]).copy()
            off += nbytes
        return arrays

    params = restore(header["params"])
    opt = restore(header["opt"])
    if off != len(body):
        raise CheckpointError("checkpoint payload size mismatch")
    return params, opt, config
