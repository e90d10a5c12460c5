"""JSON-lines wire formats for detections, scenes and memory snapshots, plus checkpoints.

Floats are written with ``repr`` (shortest round-trip form, at most 17
significant digits) so parse -> serialize is lossless. Arrays are stored as
base64 of little-endian float64 bytes.
"""
from __future__ import annotations

import base64
import json
import math
from pathlib import Path

import numpy as np

from .geometry import OrientedBoxBEV, Pose2D
from .suppression import Detection
from .temporal import MemoryEntry, MemoryFrame, MemoryQueue

FORMAT_VERSION = 1


class ParseError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"].encode("ascii"), validate=True)
    a = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return a.reshape(d["shape"])


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


# ---------------------------------------------------------------------------
# detections


def detection_to_record(d: Detection) -> dict:
    b = d.box
    return {
        "cx": b.cx, "cy": b.cy, "z": b.z, "w": b.width, "l": b.length,
        "h": b.height, "yaw": b.yaw, "vx": b.vx, "vy": b.vy,
        "scores": list(d.class_scores), "confidence": d.confidence,
        "source_index": d.source_index,
    }


def record_to_detection(rec: dict, default_index: int = 0) -> Detection:
    box = OrientedBoxBEV(
        cx=float(rec["cx"]), cy=float(rec["cy"]), width=float(rec["w"]), length=float(rec["l"]),
        yaw=float(rec.get("yaw", 0.0)), z=float(rec.get("z", 0.0)),
        height=None if rec.get("h") is None else float(rec["h"]),
        vx=float(rec.get("vx", 0.0)), vy=float(rec.get("vy", 0.0)))
    scores = tuple(float(s) for s in rec["scores"])
    conf = rec.get("confidence")
    return Detection(box, scores, None if conf is None else float(conf),
                     int(rec.get("source_index", default_index)))


def detection_header(classes, grid: dict | None = None, **extra) -> dict:
    h = {"type": "header", "version": FORMAT_VERSION, "classes": list(classes)}
    if grid is not None:
        h["grid"] = grid
    h.update(extra)
    return h


def format_detections(dets, classes=None, grid=None, **extra) -> str:
    if classes is None:
        k = len(dets[0].class_scores) if dets else 0
        classes = [f"class{i}" for i in range(k)]
    lines = [dumps(detection_header(classes, grid, **extra))]
    lines += [dumps(detection_to_record(d)) for d in dets]
    return "\n".join(lines) + "\n"


def write_detections(path, dets, classes=None, grid=None, **extra):
    Path(path).write_text(format_detections(dets, classes, grid, **extra))


def parse_detections(text: str):
    """``(header, detections)``; a missing header yields ``None``."""
    header, dets = None, []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(n, f"invalid JSON: {e.msg}") from None
        if not isinstance(rec, dict):
            raise ParseError(n, "expected a JSON object")
        if rec.get("type") == "header":
            if header is not None or dets:
                raise ParseError(n, "header must be the first record")
            header = rec
            continue
        try:
            dets.append(record_to_detection(rec, len(dets)))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(n, f"bad detection record: {e}") from None
    if header is not None and dets:
        k = len(header.get("classes", []))
        for i, d in enumerate(dets):
            if k and len(d.class_scores) != k:
                raise ParseError(i + 2, f"expected {k} scores, got {len(d.class_scores)}")
    return header, dets


def read_detections(path):
    return parse_detections(Path(path).read_text())


# ---------------------------------------------------------------------------
# scenes


def scene_to_record(scene, sequence: int, frame: int) -> dict:
    gts = []
    for b, lab in zip(scene.gt_boxes, scene.gt_labels):
        gts.append({"cx": b.cx, "cy": b.cy, "z": b.z, "w": b.width, "l": b.length, "h": b.height,
                    "yaw": b.yaw, "vx": b.vx, "vy": b.vy, "label": int(lab)})
    return {
        "sequence": sequence, "frame": frame, "timestamp": scene.timestamp,
        "ego_pose": list(scene.ego_pose.as_tuple()), "gt": gts,
        "observation": encode_array(scene.observation),
    }


def record_to_scene(rec: dict):
    from .training.scenes import Scene

    boxes = [OrientedBoxBEV(g["cx"], g["cy"], g["w"], g["l"], g["yaw"], g.get("z", 0.0), g.get("h"),
                            g.get("vx", 0.0), g.get("vy", 0.0)) for g in rec["gt"]]
    labels = np.array([g["label"] for g in rec["gt"]], dtype=np.int64)
    return Scene(boxes, labels, decode_array(rec["observation"]), Pose2D(*rec["ego_pose"]),
                 float(rec["timestamp"]))


def format_scenes(sequences, header: dict | None = None) -> str:
    head = {"type": "header", "version": FORMAT_VERSION, "kind": "scenes"}
    head.update(header or {})
    lines = [dumps(head)]
    for s, seq in enumerate(sequences):
        for f, scene in enumerate(seq):
            lines.append(dumps(scene_to_record(scene, s, f)))
    return "\n".join(lines) + "\n"


def write_scenes(path, sequences, header: dict | None = None):
    Path(path).write_text(format_scenes(sequences, header))


def read_scenes(path):
    """``(header, sequences)`` with frames grouped by their sequence id."""
    header, seqs = None, {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(n, f"invalid JSON: {e.msg}") from None
        if rec.get("type") == "header":
            header = rec
            continue
        try:
            seqs.setdefault(int(rec["sequence"]), []).append((int(rec["frame"]), record_to_scene(rec)))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(n, f"bad scene record: {e}") from None
    return header, [[sc for _, sc in sorted(v, key=lambda t: t[0])] for _, v in sorted(seqs.items())]


# ---------------------------------------------------------------------------
# memory snapshots


def format_memory(queue: MemoryQueue, classes=None) -> str:
    k = 0
    for fr in queue.frames:
        for e in fr.entries:
            k = len(e.detection.class_scores)
            break
    classes = classes or [f"class{i}" for i in range(k)]
    lines = [dumps(detection_header(classes, kind="memory", capacity_frames=queue.capacity_frames,
                                    budget=queue.budget))]
    for fr in queue.frames:
        pose = list(fr.ego_pose.as_tuple())
        if not fr.entries:
            lines.append(dumps({"timestamp": fr.timestamp, "ego_pose": pose, "empty": True}))
        for e in fr.entries:
            rec = detection_to_record(e.detection)
            rec.update(timestamp=fr.timestamp, ego_pose=pose, features=encode_array(e.features))
            lines.append(dumps(rec))
    return "\n".join(lines) + "\n"


def parse_memory(text: str) -> MemoryQueue:
    header, frames = None, []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(n, f"invalid JSON: {e.msg}") from None
        if rec.get("type") == "header":
            header = rec
            continue
        ts = float(rec["timestamp"])
        if not frames or frames[-1][0] != ts:
            frames.append((ts, Pose2D(*rec["ego_pose"]), []))
        if not rec.get("empty"):
            frames[-1][2].append(MemoryEntry(record_to_detection(rec), decode_array(rec["features"])))
    if header is None:
        raise ParseError(1, "memory snapshot needs a header record")
    q = MemoryQueue(int(header["capacity_frames"]), int(header["budget"]))
    for ts, pose, entries in frames:
        q.frames.append(MemoryFrame(ts, pose, tuple(entries)))
    return q


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_dict(model) -> dict:
    return {
        "format": "densebev-checkpoint",
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "params": {k: encode_array(t.data) for k, t in sorted(model.params.items())},
    }


def save_checkpoint(path, model):
    Path(path).write_text(dumps(checkpoint_dict(model)) + "\n")


def load_checkpoint(path):
    from .model import DenseBEV, DenseBEVConfig
    from .tensor import Tensor

    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ParseError(e.lineno, f"invalid checkpoint JSON: {e.msg}") from None
    if d.get("format") != "densebev-checkpoint":
        raise ParseError(1, "not a checkpoint file")
    cfg = DenseBEVConfig.from_dict(d["config"])
    params = {k: Tensor(decode_array(v), requires_grad=True) for k, v in d["params"].items()}
    expected = set(DenseBEV.init_params(cfg))
    if set(params) != expected:
        missing, extra = expected - set(params), set(params) - expected
        raise ParseError(1, f"checkpoint parameters mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
    return DenseBEV(cfg, params)


def finite_or_none(x: float):
    return x if math.isfinite(x) else None
