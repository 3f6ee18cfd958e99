"""Dataset plumbing: a seeded synthetic-shapes detection set, binary
PPM/PGM image IO, a minimal Pascal-VOC-style XML annotation reader, a JSON
annotation equivalent, and the dataset manifest tying them together."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .weak_gt import BoundingBox, SegGrid, grid_resolution_for, rasterize

SHAPE_NAMES = ("circle", "square", "triangle")


@dataclass
class Sample:
    """One training/eval item: image in [0,1], annotations, cached label grid."""

    image: np.ndarray = field(repr=False)
    boxes: list
    seg_grid: SegGrid | None = None


@dataclass
class DatasetManifest:
    """Class-name table (index 0 is background) plus image/annotation pairs."""

    classes: list
    samples: list
    base_dir: Path = Path(".")

    def __post_init__(self):
        if not self.classes or self.classes[0] != "background":
            raise ValueError("class table must start with 'background'")


# ---------------------------------------------------------------------------
# synthetic scenes
# ---------------------------------------------------------------------------

def _shape_mask(kind, size, cx, cy, s):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if kind == 0:  # circle
        r = s / 2.0
        return (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    if kind == 1:  # square
        half = s / 2.0
        return (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    # upward triangle
    top, bot = cy - s / 2.0, cy + s / 2.0
    frac = np.clip((yy - top) / max(bot - top, 1e-9), 0.0, 1.0)
    return (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= frac * s / 2.0)


def _mask_bbox(mask, size):
    ys, xs = np.nonzero(mask)
    return (xs.min() / size, ys.min() / size,
            (xs.max() + 1) / size, (ys.max() + 1) / size)


def _background(rng, size):
    base = rng.uniform(0.2, 0.8, size=3)
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    ramp = np.linspace(-1.0, 1.0, size)
    amp = rng.uniform(-0.12, 0.12, size=(3, 2))
    img += amp[:, 0, None, None] * ramp[None, :, None]
    img += amp[:, 1, None, None] * ramp[None, None, :]
    # low-contrast clutter blobs: visual texture, never annotated
    for _ in range(int(rng.integers(2, 6))):
        bx, by = rng.uniform(0, size, size=2)
        r = rng.uniform(3.0, 11.0)
        shift = rng.uniform(-0.18, 0.18, size=3)
        yy, xx = np.mgrid[0:size, 0:size]
        bump = np.exp(-(((xx - bx) ** 2 + (yy - by) ** 2) / (2 * r * r)))
        img += shift[:, None, None] * bump
    return img, base


def _shape_color(rng, base):
    for _ in range(20):
        c = rng.uniform(0.0, 1.0, size=3)
        if np.abs(c - base).sum() >= 0.8:
            return c
    return 1.0 - base


def render_scene(rng, classes=3, size=64, min_px=None, max_px=None, max_shapes=4,
                 first_class=None):
    """Draw one scene; returns (image, boxes, masks).

    Boxes are exact pixel-tight bounds of each drawn mask.  ``first_class``
    forces the class of the first shape (used for per-class quotas).
    Shape sizes default to roughly 1/6 .. 4/9 of the canvas.
    """
    if not (1 <= classes <= len(SHAPE_NAMES)):
        raise ValueError(f"classes must be in 1..{len(SHAPE_NAMES)}, got {classes}")
    if min_px is None:
        min_px = max(4, round(size * 10 / 64))
    if max_px is None:
        max_px = max(min_px + 2, round(size * 28 / 64))
    if max_px + 4 > size:
        raise ValueError(f"max_px {max_px} too large for a {size}px canvas")
    img, base = _background(rng, size)
    count = int(rng.integers(1, max_shapes + 1))
    boxes, masks = [], []
    occupied = []
    for k in range(count):
        cid = first_class if (k == 0 and first_class) else int(rng.integers(1, classes + 1))
        placed = False
        for _ in range(25):
            s = rng.uniform(min_px, max_px)
            cx = rng.uniform(s / 2 + 1, size - s / 2 - 1)
            cy = rng.uniform(s / 2 + 1, size - s / 2 - 1)
            rect = (cx - s / 2, cy - s / 2, cx + s / 2, cy + s / 2)
            if all(_rect_iou(rect, o) < 0.15 for o in occupied):
                placed = True
                break
        if not placed:
            continue
        mask = _shape_mask(cid - 1, size, cx, cy, s)
        if mask.sum() < 12:
            continue
        color = _shape_color(rng, base)
        img[:, mask] = color[:, None]
        occupied.append(rect)
        boxes.append(BoundingBox(cid, *_mask_bbox(mask, size)))
        masks.append(mask)
    img += rng.normal(0.0, 0.035, size=img.shape)
    return np.clip(img, 0.0, 1.0), boxes, masks


def _rect_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua if ua > 0 else 0.0


def gen_synthetic(seed, count, classes=3, size=64, grid_stride=8):
    """Deterministic synthetic detection dataset.

    Same seed, same everything: the single RNG stream fixes the whole
    dataset bit-for-bit.  The first shape of sample ``i`` has class
    ``1 + (i % classes)``, so every class is present whenever
    ``count >= classes``.  Label grids are rasterized at
    ``ceil(size / grid_stride)``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng([int(seed), 0xDE5])
    grid = grid_resolution_for(size, grid_stride)
    samples = []
    for i in range(count):
        image, boxes, _ = render_scene(rng, classes=classes, size=size,
                                       first_class=1 + (i % classes))
        samples.append(Sample(image, boxes, rasterize(boxes, grid, grid)))
    return samples


def class_names_for(classes=3):
    return ["background"] + list(SHAPE_NAMES[:classes])


# ---------------------------------------------------------------------------
# PPM / PGM (binary, maxval 255)
# ---------------------------------------------------------------------------

class PnmParseError(ValueError):
    """Malformed PPM/PGM data; the message carries the byte offset."""


def _read_pnm_token(buf, pos):
    n = len(buf)
    while pos < n:
        ch = buf[pos : pos + 1]
        if ch == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise PnmParseError(f"unexpected end of header at byte {pos}")
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    return buf[start:pos], pos


def _parse_pnm(buf, magic, channels):
    tok, pos = _read_pnm_token(buf, 0)
    if tok != magic:
        if tok in (b"P3", b"P2"):
            raise PnmParseError(f"ASCII variant {tok.decode()} not supported "
                                f"(byte 0); use binary {magic.decode()}")
        raise PnmParseError(f"bad magic {tok!r} at byte 0, expected {magic.decode()}")
    dims = []
    for what in ("width", "height", "maxval"):
        tok, pos = _read_pnm_token(buf, pos)
        try:
            dims.append(int(tok))
        except ValueError:
            raise PnmParseError(f"non-numeric {what} {tok!r} at byte {pos - len(tok)}") from None
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise PnmParseError(f"degenerate image size {w}x{h} (byte {pos})")
    if maxval != 255:
        raise PnmParseError(f"unsupported maxval {maxval} (byte {pos}), expected 255")
    pos += 1  # single whitespace byte separating header and raster
    need = w * h * channels
    raster = buf[pos : pos + need]
    if len(raster) != need:
        raise PnmParseError(f"truncated raster at byte {pos}: "
                            f"need {need} bytes, have {len(raster)}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels), w, h


def read_ppm(source):
    """Read a binary P6 PPM into a ``3 x H x W`` float array in [0, 1]."""
    buf = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    raster, _, _ = _parse_pnm(bytes(buf), b"P6", 3)
    return raster.astype(np.float64).transpose(2, 0, 1) / 255.0


def write_ppm(image, path):
    """Write a ``3 x H x W`` float image in [0, 1] as binary P6."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected 3xHxW image, got {arr.shape}")
    raster = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[1:]
    header = f"P6\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + raster.transpose(1, 2, 0).tobytes())


def write_pgm(gray, path):
    """Write an ``H x W`` array of byte values as binary P5."""
    arr = np.asarray(gray)
    if arr.ndim != 2:
        raise ValueError(f"expected HxW grayscale, got {arr.shape}")
    raster = np.clip(np.rint(arr.astype(np.float64)), 0, 255).astype(np.uint8)
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + raster.tobytes())


# ---------------------------------------------------------------------------
# VOC-style XML annotations (hand-rolled reader for the fixed schema)
# ---------------------------------------------------------------------------

class VocParseError(ValueError):
    """Structurally broken annotation document."""


class VocValidationError(VocParseError):
    """Well-formed document carrying inconsistent values."""


class _XmlNode:
    __slots__ = ("tag", "children", "text", "line")

    def __init__(self, tag, line):
        self.tag = tag
        self.children = []
        self.text = []
        self.line = line

    def find(self, tag):
        for c in self.children:
            if c.tag == tag:
                return c
        return None

    def find_all(self, tag):
        return [c for c in self.children if c.tag == tag]

    def content(self):
        return "".join(self.text).strip()


def _parse_xml(text):
    """Tiny element parser: tags, nesting, text; attributes are skipped.

    Handles the prolog, comments and self-closing tags; anything outside
    that subset raises :class:`VocParseError` with a line number.
    """
    pos, n = 0, len(text)

    def line_at(p):
        return text.count("\n", 0, p) + 1

    def fail(msg, p):
        raise VocParseError(f"{msg} (line {line_at(p)})")

    def skip_misc(p):
        while True:
            while p < n and text[p].isspace():
                p += 1
            if text.startswith("<?", p):
                end = text.find("?>", p)
                if end < 0:
                    fail("unterminated processing instruction", p)
                p = end + 2
            elif text.startswith("<!--", p):
                end = text.find("-->", p)
                if end < 0:
                    fail("unterminated comment", p)
                p = end + 3
            elif text.startswith("<!", p):
                end = text.find(">", p)
                if end < 0:
                    fail("unterminated declaration", p)
                p = end + 1
            else:
                return p

    def parse_element(p):
        if p >= n or text[p] != "<":
            fail("expected element", p)
        q = p + 1
        start = q
        while q < n and (text[q].isalnum() or text[q] in "_-.:"):
            q += 1
        tag = text[start:q]
        if not tag:
            fail("empty tag name", p)
        node = _XmlNode(tag, line_at(p))
        # skip attributes up to '>', honoring quoted values
        while q < n and text[q] not in ">":
            if text[q] in "\"'":
                quote = text[q]
                q = text.find(quote, q + 1)
                if q < 0:
                    fail(f"unterminated attribute in <{tag}>", p)
            q += 1
        if q >= n:
            fail(f"unterminated tag <{tag}>", p)
        if text[q - 1] == "/":  # self-closing
            return node, q + 1
        q += 1
        while True:
            q = _collect_text(node, q)
            if q >= n:
                fail(f"missing closing tag for <{tag}>", p)
            if text.startswith("</", q):
                end = text.find(">", q)
                if end < 0:
                    fail(f"unterminated closing tag in <{tag}>", q)
                closing = text[q + 2 : end].strip()
                if closing != tag:
                    fail(f"mismatched closing tag </{closing}> for <{tag}>", q)
                return node, end + 1
            if text.startswith("<!--", q):
                end = text.find("-->", q)
                if end < 0:
                    fail("unterminated comment", q)
                q = end + 3
                continue
            child, q = parse_element(q)
            node.children.append(child)

    def _collect_text(node, p):
        start = p
        while p < n and text[p] != "<":
            p += 1
        if p > start:
            node.text.append(text[start:p])
        return p

    pos = skip_misc(0)
    if pos >= n:
        raise VocParseError("empty document (line 1)")
    root, pos = parse_element(pos)
    pos = skip_misc(pos)
    if pos < n:
        fail("trailing content after root element", pos)
    return root


def _required(node, tag):
    child = node.find(tag)
    if child is None:
        raise VocParseError(f"missing element <{tag}> inside <{node.tag}> "
                            f"(line {node.line})")
    return child


def _int_content(node):
    txt = node.content()
    try:
        return int(float(txt))
    except (ValueError, OverflowError):
        raise VocParseError(f"non-numeric value {txt!r} in <{node.tag}> "
                            f"(line {node.line})") from None


def parse_voc_xml(data, classes):
    """Extract image size and boxes from a VOC-style annotation document.

    Pixel corners are 1-based inclusive; they normalize as
    ``(v - 1) / extent`` for the min corner and ``v / extent`` for the max.
    ``classes`` is the class-name table (index 0 = background); unknown
    object names are rejected.  Returns ``((width, height), boxes)``.
    """
    if isinstance(data, (bytes, bytearray)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as e:
            raise VocParseError(f"undecodable bytes at offset {e.start}") from None
    root = _parse_xml(data)
    size = _required(root, "size")
    width = _int_content(_required(size, "width"))
    height = _int_content(_required(size, "height"))
    if width < 1 or height < 1:
        raise VocValidationError(f"non-positive image size {width}x{height} "
                                 f"(line {size.line})")
    name_to_id = {name: i for i, name in enumerate(classes)}
    boxes = []
    for obj in root.find_all("object"):
        name = _required(obj, "name").content()
        if name not in name_to_id or name == "background":
            raise VocValidationError(f"unknown class {name!r} (line {obj.line}); "
                                     f"known: {list(classes[1:])}")
        difficult_node = obj.find("difficult")
        difficult = bool(_int_content(difficult_node)) if difficult_node else False
        bb = _required(obj, "bndbox")
        xmin = _int_content(_required(bb, "xmin"))
        ymin = _int_content(_required(bb, "ymin"))
        xmax = _int_content(_required(bb, "xmax"))
        ymax = _int_content(_required(bb, "ymax"))
        if xmin >= xmax or ymin >= ymax:
            raise VocValidationError(f"inverted box ({xmin},{ymin},{xmax},{ymax}) "
                                     f"(line {bb.line})")
        try:
            boxes.append(BoundingBox(name_to_id[name],
                                     (xmin - 1) / width, (ymin - 1) / height,
                                     xmax / width, ymax / height,
                                     difficult=difficult))
        except ValueError as e:
            raise VocValidationError(f"box outside image (line {bb.line}): {e}") from None
    return (width, height), boxes


# ---------------------------------------------------------------------------
# JSON annotations and manifests
# ---------------------------------------------------------------------------

def parse_json_annotation(data):
    """Read the JSON annotation equivalent: normalized corner boxes."""
    obj = json.loads(data) if isinstance(data, (str, bytes)) else data
    boxes = []
    for entry in obj.get("boxes", []):
        boxes.append(BoundingBox(int(entry["class"]),
                                 float(entry["xmin"]), float(entry["ymin"]),
                                 float(entry["xmax"]), float(entry["ymax"]),
                                 difficult=bool(entry.get("difficult", False))))
    return boxes


def boxes_to_json(boxes):
    return {"boxes": [{"class": b.class_id,
                       "xmin": b.xmin, "ymin": b.ymin,
                       "xmax": b.xmax, "ymax": b.ymax,
                       "difficult": b.difficult} for b in boxes]}


def load_manifest(path):
    path = Path(path)
    obj = json.loads(path.read_text())
    manifest = DatasetManifest(classes=list(obj["classes"]),
                               samples=[(s["image"], s["annotation"])
                                        for s in obj["samples"]],
                               base_dir=path.parent)
    for img, ann in manifest.samples:
        for rel in (img, ann):
            if not (manifest.base_dir / rel).exists():
                raise FileNotFoundError(f"manifest references missing file {rel!r}")
    return manifest


def load_dataset(manifest, grid_size=None):
    """Materialize manifest entries as samples; XML and JSON annotations
    are both accepted.  ``grid_size`` rasterizes the cached label grid."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    samples = []
    for img_rel, ann_rel in manifest.samples:
        image = read_ppm(manifest.base_dir / img_rel)
        ann_path = manifest.base_dir / ann_rel
        if ann_path.suffix.lower() == ".xml":
            _, boxes = parse_voc_xml(ann_path.read_text(), manifest.classes)
        else:
            boxes = parse_json_annotation(ann_path.read_text())
        grid = None
        if grid_size:
            grid = rasterize(boxes, grid_size, grid_size)
        samples.append(Sample(image, boxes, grid))
    return samples


def save_dataset(samples, out_dir, classes):
    """Write samples as PPM + JSON annotation pairs plus a manifest;
    returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        img_name, ann_name = f"img_{i:05d}.ppm", f"img_{i:05d}.json"
        write_ppm(s.image, out / img_name)
        (out / ann_name).write_text(json.dumps(boxes_to_json(s.boxes)) + "\n")
        entries.append({"image": img_name, "annotation": ann_name})
    manifest_file = out / "manifest.json"
    manifest_file.write_text(json.dumps(
        {"classes": list(classes), "samples": entries}, indent=2) + "\n")
    return manifest_file
