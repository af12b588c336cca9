"""File formats: PNG images, scene manifests, OCR results, and checkpoints.

Every on-disk format is versioned. Manifest paths are stored relative to the
manifest file itself so a dataset directory can be moved or read from any
working directory. Checkpoints are a single line of JSON (the header)
followed by a raw blob of little-endian float32 values; the header carries a
SHA-256 digest of the blob, verified on load.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import CheckpointError, DataError, ShapeError

MANIFEST_VERSION = 1
CHECKPOINT_VERSION = 1
OCR_VERSION = 1


# ---------------------------------------------------------------------------
# Images
# ---------------------------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    """Load an 8- or 16-bit PNG (gray or RGB) as float32 [H,W,C] in [0,1]."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.float32) / 255.0
            elif mode in ("I", "I;16"):
                arr = np.asarray(im, dtype=np.float32) / 65535.0
            else:
                raise DataError(f"{path}: unsupported image mode {mode!r} "
                                "(expected 8/16-bit gray or 8-bit RGB)")
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except UnidentifiedImageError:
        raise DataError(f"not a readable image: {path}") from None
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def save_image(img: np.ndarray, path: str | Path, bit_depth: int = 8) -> None:
    """Save an [H,W,C] float image in [0,1] as PNG.

    Values are clamped then quantized with round-half-even. 8-bit supports
    gray (C=1) and RGB (C=3); 16-bit supports gray only.
    """
    path = Path(path)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"expected [H,W,1] or [H,W,3] image, got {img.shape}")
    clipped = np.clip(img, 0.0, 1.0)
    if bit_depth == 8:
        q = np.rint(clipped.astype(np.float64) * 255.0).astype(np.uint8)
        if img.shape[2] == 1:
            Image.fromarray(q[:, :, 0], mode="L").save(path)
        else:
            Image.fromarray(q, mode="RGB").save(path)
    elif bit_depth == 16:
        if img.shape[2] != 1:
            raise DataError("16-bit save supports single-channel images only")
        q = np.rint(clipped[:, :, 0].astype(np.float64) * 65535.0).astype(np.uint16)
        Image.fromarray(q, mode="I;16").save(path)
    else:
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")


# ---------------------------------------------------------------------------
# Scene manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestEntry:
    """One dataset record; ``clean_path=None`` marks an unlabeled (real) frame."""

    scene_id: str
    degraded_path: str
    clean_path: str | None = None
    seed: int | None = None
    params: dict | None = None


@dataclass
class SceneManifest:
    """A versioned list of scene entries plus the directory they resolve against."""

    entries: list[ManifestEntry] = field(default_factory=list)
    version: int = MANIFEST_VERSION
    root: Path | None = None

    def resolve(self, rel: str) -> Path:
        if self.root is None:
            raise DataError("manifest has no root directory to resolve paths against")
        return self.root / rel


def save_manifest(manifest: SceneManifest, path: str | Path) -> None:
    path = Path(path)
    ids = [e.scene_id for e in manifest.entries]
    if len(set(ids)) != len(ids):
        raise DataError("manifest scene_ids must be unique")
    doc = {
        "version": manifest.version,
        "entries": [dataclasses.asdict(e) for e in manifest.entries],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path: str | Path) -> SceneManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
    version = doc.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(f"{path}: unsupported manifest version {version} "
                        f"(this build reads version {MANIFEST_VERSION})")
    entries = []
    seen = set()
    for i, rec in enumerate(doc.get("entries", [])):
        try:
            entry = ManifestEntry(**rec)
        except TypeError as e:
            raise DataError(f"{path}: entry {i}: {e}") from None
        if entry.scene_id in seen:
            raise DataError(f"{path}: duplicate scene_id {entry.scene_id!r}")
        seen.add(entry.scene_id)
        entries.append(entry)
    return SceneManifest(entries=entries, version=version, root=path.parent)


# ---------------------------------------------------------------------------
# OCR results
# ---------------------------------------------------------------------------

def load_ocr_results(path: str | Path) -> list:
    """Load and validate a JSON file of per-scene OCR outputs.

    Schema: a list of ``{scene_id, gt_words, detections, word_matches}``
    records, where each match is a ``[gt_index, detection_index]`` pair.
    Returns :class:`turbkit.metrics.OcrSceneResult` objects.
    """
    from .metrics import OcrSceneResult  # local import to avoid a cycle

    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"OCR results not found: {path}") from None
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON ({e})") from None
    if not isinstance(doc, list):
        raise DataError(f"{path}: expected a JSON list of scene records")

    scenes = []
    seen = set()
    for i, rec in enumerate(doc):
        where = f"{path}: scene {i} ({rec.get('scene_id', '?')!r})"
        for key in ("scene_id", "gt_words", "detections", "word_matches"):
            if key not in rec:
                raise DataError(f"{where}: missing field {key!r}")
        scene = OcrSceneResult(
            scene_id=rec["scene_id"],
            gt_words=list(rec["gt_words"]),
            detections=list(rec["detections"]),
            word_matches=[tuple(m) for m in rec["word_matches"]],
        )
        if scene.scene_id in seen:
            raise DataError(f"{where}: duplicate scene_id")
        seen.add(scene.scene_id)
        try:
            scene.validate()
        except ValueError as e:
            raise DataError(f"{where}: {e}") from None
        scenes.append(scene)
    return scenes


def save_ocr_results(scenes: list, path: str | Path) -> None:
    doc = [
        {
            "scene_id": s.scene_id,
            "gt_words": list(s.gt_words),
            "detections": list(s.detections),
            "word_matches": [list(m) for m in s.word_matches],
        }
        for s in scenes
    ]
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

@dataclass
class LoadedCheckpoint:
    model: object
    model_config: object
    train_config: dict | None
    step: int
    optimizer_state: dict | None


def _blob_entries(named_arrays) -> tuple[list[dict], bytes]:
    entries = []
    chunks = []
    offset = 0
    for name, arr in named_arrays:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "byte_offset": offset,
        })
        chunks.append(data)
        offset += len(data)
    return entries, b"".join(chunks)


def save_checkpoint(path: str | Path, model, step: int = 0,
                    train_config: dict | None = None,
                    optimizer_state: dict | None = None) -> None:
    """Serialize model parameters (and optional optimizer moments) to one file.

    Layout: a single line of JSON, a newline, then the raw parameter blob.
    All arrays are stored as little-endian float32 in header-declared order.
    """
    named = [(name, p.value) for name, p in model.named_parameters()]
    opt_header = None
    if optimizer_state is not None:
        opt_header = {"t": int(optimizer_state["t"])}
        for kind in ("m", "v"):
            for name, _ in model.named_parameters():
                named.append((f"optim.{kind}.{name}", optimizer_state[kind][name]))
    entries, blob = _blob_entries(named)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": model.config.to_dict(),
        "train_config": train_config,
        "step": int(step),
        "optimizer": opt_header,
        "entries": entries,
        "blob_size": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        f.write(blob)


def load_checkpoint(path: str | Path, dtype=np.float32) -> LoadedCheckpoint:
    """Rebuild a model from a checkpoint, verifying the blob digest."""
    from .model import ModelConfig, TurbNetModel  # local import to avoid a cycle
    from .tensor import Rng

    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable header ({e})") from None

    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} "
                              f"(this build reads version {CHECKPOINT_VERSION})")
    blob = raw[nl + 1:]
    if len(blob) != header["blob_size"]:
        raise CheckpointError(f"{path}: blob is {len(blob)} bytes, "
                              f"header declares {header['blob_size']} (truncated file?)")
    if hashlib.sha256(blob).hexdigest() != header["blob_sha256"]:
        raise CheckpointError(f"{path}: blob digest mismatch (corrupted file)")

    arrays = {}
    for ent in header["entries"]:
        n = int(np.prod(ent["shape"], dtype=np.int64)) if ent["shape"] else 1
        start = ent["byte_offset"]
        arr = np.frombuffer(blob, dtype=ent["dtype"], count=n, offset=start)
        arrays[ent["name"]] = arr.reshape(ent["shape"])

    config = ModelConfig.from_dict(header["model_config"])
    model = TurbNetModel(config, Rng(0), dtype=dtype)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(p.value.shape):
            raise CheckpointError(f"{path}: parameter {name!r} has shape "
                                  f"{tuple(arr.shape)}, model expects {tuple(p.value.shape)}")
        p.value[...] = arr.astype(dtype)

    opt_state = None
    if header.get("optimizer") is not None:
        opt_state = {"t": int(header["optimizer"]["t"]), "m": {}, "v": {}}
        for name, p in model.named_parameters():
            for kind in ("m", "v"):
                key = f"optim.{kind}.{name}"
                if key not in arrays:
                    raise CheckpointError(f"{path}: missing optimizer entry {key!r}")
                opt_state[kind][name] = arrays[key].astype(dtype).copy()

    return LoadedCheckpoint(
        model=model,
        model_config=config,
        train_config=header.get("train_config"),
        step=int(header.get("step", 0)),
        optimizer_state=opt_state,
    )
