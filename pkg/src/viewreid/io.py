"""On-disk formats.

Embedding dump
    ``<stem>.json`` manifest, ``<stem>.labels.csv`` with one row per image
    (``image_id,vehicle_id,camera_id,view_id``; empty camera when absent) and
    either ``<stem>.f32`` (row-major little-endian float32) or, in CSV mode,
    ``f0..f{dim-1}`` columns appended to the label rows.

Distance dump
    ``<stem>.json`` manifest, ``<stem>.f64`` (row-major little-endian
    float64) and two label CSVs for the query and gallery sides.

Scaling (delta) file
    ``#``-prefixed ``key: value`` header lines followed by ``V`` rows of
    comma-separated decimals with four places. An optional ``<file>.f64``
    sidecar keeps full precision.
"""

from __future__ import annotations

import csv
import json
from importlib import resources
from pathlib import Path

import numpy as np

from .embedding import DistanceMatrix, EmbeddingSet, LabelMeta
from .exceptions import FormatError
from .vabpp import CenterMatrix, ScalingMatrix

EMBEDDING_FORMAT = "viewreid-embeddings"
DISTANCE_FORMAT = "viewreid-distances"
DELTA_MAGIC = "viewreid-delta 1"
FORMAT_VERSION = 1
BUNDLED = ("veri776", "vehicleid", "veriwild")
LABEL_COLUMNS = ["image_id", "vehicle_id", "camera_id", "view_id"]


def _stem(path):
    path = Path(path)
    return path.with_suffix("") if path.suffix == ".json" else path


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _read_manifest(path, expected_format):
    try:
        manifest = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise FormatError("file not found", field=str(path)) from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON ({exc.msg})", field="manifest") from None
    if not isinstance(manifest, dict):
        raise FormatError("manifest must be a JSON object", field="manifest")
    if manifest.get("format") != expected_format:
        raise FormatError(f"expected {expected_format!r}, got {manifest.get('format')!r}", field="format")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"unsupported version {manifest.get('format_version')!r}", field="format_version")
    return manifest


def _require_int(manifest, key, minimum=0):
    value = manifest.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise FormatError(f"must be an integer >= {minimum}, got {value!r}", field=key)
    return value


def _label_rows(meta: LabelMeta):
    for i in range(len(meta)):
        cam = "" if meta.camera_ids is None else str(int(meta.camera_ids[i]))
        yield [str(int(meta.image_ids[i])), str(int(meta.vehicle_ids[i])), cam, str(int(meta.view_ids[i]))]


def write_labels(path, meta: LabelMeta):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABEL_COLUMNS)
        w.writerows(_label_rows(meta))


def _parse_label_rows(rows, has_cameras, where):
    image_ids, vehicle_ids, camera_ids, view_ids = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        try:
            image_ids.append(int(row[0]))
            vehicle_ids.append(int(row[1]))
            if has_cameras:
                camera_ids.append(int(row[2]))
            elif row[2] != "":
                raise FormatError(f"{where} line {lineno}: camera id given but has_cameras is false",
                                  field="camera_id")
            view_ids.append(int(row[3]))
        except (ValueError, IndexError):
            raise FormatError(f"{where} line {lineno}: malformed label row", field="labels") from None
    return (np.array(image_ids, dtype=np.int64), np.array(vehicle_ids, dtype=np.int64),
            np.array(camera_ids, dtype=np.int64) if has_cameras else None,
            np.array(view_ids, dtype=np.int64))


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise FormatError("file not found", field=str(path)) from None
    if not rows:
        raise FormatError(f"{path} is empty", field="labels")
    return rows[0], rows[1:]


def read_labels(path, has_cameras):
    header, rows = _read_csv(path)
    if header[:4] != LABEL_COLUMNS:
        raise FormatError(f"expected columns {LABEL_COLUMNS}", field="labels")
    ids, vids, cams, views = _parse_label_rows(rows, has_cameras, Path(path).name)
    return LabelMeta(ids, vids, views, cams)


# ---------------------------------------------------------------------------
# embedding dumps


def write_embeddings(path, emb: EmbeddingSet, payload="binary"):
    """Write an embedding dump; ``path`` is the manifest (``.json``) path."""
    if payload not in ("binary", "csv"):
        raise ValueError("payload must be 'binary' or 'csv'")
    stem = _stem(path)
    manifest_path = stem.with_name(stem.name + ".json")
    labels_name = stem.name + ".labels.csv"
    feats32 = np.ascontiguousarray(emb.features, dtype="<f4")
    manifest = {
        "format": EMBEDDING_FORMAT,
        "format_version": FORMAT_VERSION,
        "count": len(emb),
        "dim": emb.dim,
        "num_views": emb.num_views,
        "has_cameras": emb.has_cameras,
        "normalized": bool(emb.normalized),
        "dtype": "float32-le",
        "payload": payload,
        "labels_file": labels_name,
    }
    if payload == "binary":
        manifest["features_file"] = stem.name + ".f32"
        stem.with_name(manifest["features_file"]).write_bytes(feats32.tobytes())
        write_labels(stem.with_name(labels_name), emb.meta)
    else:
        with open(stem.with_name(labels_name), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LABEL_COLUMNS + [f"f{k}" for k in range(emb.dim)])
            for labels, row in zip(_label_rows(emb.meta), feats32):
                w.writerow(labels + [f"{float(x):.9g}" for x in row])
    _write_json(manifest_path, manifest)
    return manifest_path


def read_embeddings(path) -> EmbeddingSet:
    path = Path(path)
    manifest = _read_manifest(path, EMBEDDING_FORMAT)
    count = _require_int(manifest, "count")
    dim = _require_int(manifest, "dim", 1)
    num_views = _require_int(manifest, "num_views", 1)
    has_cameras = manifest.get("has_cameras")
    if not isinstance(has_cameras, bool):
        raise FormatError("must be true or false", field="has_cameras")
    if manifest.get("dtype") != "float32-le":
        raise FormatError(f"unsupported dtype {manifest.get('dtype')!r}", field="dtype")
    payload = manifest.get("payload")
    if payload not in ("binary", "csv"):
        raise FormatError(f"unknown payload {payload!r}", field="payload")
    labels_file = manifest.get("labels_file")
    if not isinstance(labels_file, str):
        raise FormatError("missing", field="labels_file")
    base = path.parent

    if payload == "binary":
        features_file = manifest.get("features_file")
        if not isinstance(features_file, str):
            raise FormatError("missing", field="features_file")
        meta = read_labels(base / labels_file, has_cameras)
        try:
            raw = (base / features_file).read_bytes()
        except FileNotFoundError:
            raise FormatError("file not found", field="features_file") from None
        if len(raw) != count * dim * 4:
            raise FormatError(f"payload has {len(raw)} bytes, expected {count * dim * 4}", field="features_file")
        feats = np.frombuffer(raw, dtype="<f4").reshape(count, dim)
    else:
        header, rows = _read_csv(base / labels_file)
        if header != LABEL_COLUMNS + [f"f{k}" for k in range(dim)]:
            raise FormatError("CSV header does not match dim", field="labels_file")
        ids, vids, cams, views = _parse_label_rows(rows, has_cameras, labels_file)
        meta = LabelMeta(ids, vids, views, cams)
        try:
            feats = np.array([[np.float32(x) for x in r[4:]] for r in rows], dtype="<f4").reshape(-1, dim)
        except ValueError:
            raise FormatError("non-numeric feature value", field="labels_file") from None
    if len(meta) != count:
        raise FormatError(f"{len(meta)} label rows, manifest says {count}", field="count")
    try:
        return EmbeddingSet(
            features=feats.astype(np.float64),
            image_ids=meta.image_ids,
            vehicle_ids=meta.vehicle_ids,
            view_ids=meta.view_ids,
            num_views=num_views,
            camera_ids=meta.camera_ids,
            normalized=bool(manifest.get("normalized", False)),
        )
    except ValueError as exc:
        raise FormatError(str(exc), field="labels") from None


# ---------------------------------------------------------------------------
# distance dumps


def write_distances(path, dist: DistanceMatrix):
    stem = _stem(path)
    manifest = {
        "format": DISTANCE_FORMAT,
        "format_version": FORMAT_VERSION,
        "kind": dist.kind,
        "rows": dist.shape[0],
        "cols": dist.shape[1],
        "gamma": dist.gamma,
        "dtype": "float64-le",
        "has_cameras": bool(dist.query_meta.has_cameras and dist.gallery_meta.has_cameras),
        "values_file": stem.name + ".f64",
        "query_labels": stem.name + ".query.csv",
        "gallery_labels": stem.name + ".gallery.csv",
    }
    stem.with_name(manifest["values_file"]).write_bytes(np.ascontiguousarray(dist.values, dtype="<f8").tobytes())
    write_labels(stem.with_name(manifest["query_labels"]), dist.query_meta)
    write_labels(stem.with_name(manifest["gallery_labels"]), dist.gallery_meta)
    manifest_path = stem.with_name(stem.name + ".json")
    _write_json(manifest_path, manifest)
    return manifest_path


def read_distances(path) -> DistanceMatrix:
    path = Path(path)
    manifest = _read_manifest(path, DISTANCE_FORMAT)
    rows = _require_int(manifest, "rows")
    cols = _require_int(manifest, "cols")
    has_cameras = manifest.get("has_cameras")
    if not isinstance(has_cameras, bool):
        raise FormatError("must be true or false", field="has_cameras")
    if manifest.get("dtype") != "float64-le":
        raise FormatError(f"unsupported dtype {manifest.get('dtype')!r}", field="dtype")
    for key in ("values_file", "query_labels", "gallery_labels"):
        if not isinstance(manifest.get(key), str):
            raise FormatError("missing", field=key)
    base = path.parent
    try:
        raw = (base / manifest["values_file"]).read_bytes()
    except FileNotFoundError:
        raise FormatError("file not found", field="values_file") from None
    if len(raw) != rows * cols * 8:
        raise FormatError(f"payload has {len(raw)} bytes, expected {rows * cols * 8}", field="values_file")
    values = np.frombuffer(raw, dtype="<f8").reshape(rows, cols)
    qm = read_labels(base / manifest["query_labels"], has_cameras)
    gm = read_labels(base / manifest["gallery_labels"], has_cameras)
    try:
        return DistanceMatrix(values.astype(np.float64), qm, gm, manifest.get("kind", "raw"),
                              gamma=manifest.get("gamma"))
    except ValueError as exc:
        raise FormatError(str(exc), field="values_file") from None


def write_ranking(path, dist: DistanceMatrix, top_k=10):
    """Top-k gallery list per query: ``query_image_id,rank,gallery_image_id,distance``."""
    gm = dist.gallery_meta
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_image_id", "rank", "gallery_image_id", "distance"])
        for q in range(dist.shape[0]):
            order = np.lexsort((gm.image_ids, dist.values[q]))[:top_k]
            for r, g in enumerate(order, start=1):
                w.writerow([int(dist.query_meta.image_ids[q]), r, int(gm.image_ids[g]), repr(float(dist.values[q, g]))])


# ---------------------------------------------------------------------------
# scaling matrices


def format_delta(delta: ScalingMatrix, binary_name=None):
    lines = [f"# {DELTA_MAGIC}", f"# num_views: {delta.num_views}"]
    if delta.dataset:
        lines.append(f"# dataset: {delta.dataset}")
    if delta.view_names:
        lines.append(f"# views: {','.join(delta.view_names)}")
    if delta.gamma_used is not None:
        lines.append(f"# gamma_used: {delta.gamma_used:g}")
    lines.append("# precision: 4")
    if binary_name:
        lines.append(f"# binary: {binary_name}")
    lines.extend(",".join(f"{x:.4f}" for x in row) for row in delta.delta)
    return "\n".join(lines) + "\n"


def write_delta(path, delta: ScalingMatrix, binary=False):
    """Write a scaling file; with ``binary=True`` also a full-precision ``.f64`` sidecar."""
    path = Path(path)
    binary_name = None
    if binary:
        binary_name = path.name + ".f64"
        path.with_name(binary_name).write_bytes(np.ascontiguousarray(delta.delta, dtype="<f8").tobytes())
    path.write_text(format_delta(delta, binary_name))
    return path


def parse_delta(text, base=None) -> ScalingMatrix:
    header = {}
    body = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            content = line[1:].strip()
            if ":" in content:
                key, value = content.split(":", 1)
                header[key.strip()] = value.strip()
            continue
        try:
            body.append([float(x) for x in line.split(",")])
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric entry", field="body") from None
    if "num_views" not in header:
        raise FormatError("missing header line", field="num_views")
    try:
        v = int(header["num_views"])
    except ValueError:
        raise FormatError(f"not an integer: {header['num_views']!r}", field="num_views") from None
    if len(body) != v or any(len(r) != v for r in body):
        raise FormatError(f"expected {v}x{v} body", field="body")
    values = np.array(body)
    if "binary" in header and base is not None:
        sidecar = Path(base) / header["binary"]
        try:
            raw = sidecar.read_bytes()
        except FileNotFoundError:
            raise FormatError("file not found", field="binary") from None
        if len(raw) != v * v * 8:
            raise FormatError("sidecar size mismatch", field="binary")
        exact = np.frombuffer(raw, dtype="<f8").reshape(v, v).copy()
        if np.max(np.abs(exact - values)) > 5.000001e-5:
            raise FormatError("sidecar disagrees with text body", field="binary")
        values = exact
    names = header["views"].split(",") if "views" in header else None
    gamma = float(header["gamma_used"]) if "gamma_used" in header else None
    try:
        return ScalingMatrix(values, dataset=header.get("dataset"), view_names=names, gamma_used=gamma)
    except ValueError as exc:
        raise FormatError(str(exc), field="body") from None


def read_delta(path) -> ScalingMatrix:
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise FormatError("file not found", field=str(path)) from None
    return parse_delta(text, base=path.parent)


def load_bundled_delta(dataset) -> ScalingMatrix:
    """One of the published scaling tables: ``veri776``, ``vehicleid`` or ``veriwild``."""
    if dataset not in BUNDLED:
        raise ValueError(f"unknown dataset {dataset!r}; choose from {BUNDLED}")
    text = resources.files("viewreid").joinpath("data", f"{dataset}.delta").read_text()
    return parse_delta(text)


def write_centers_report(path, centers: CenterMatrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["query_view", "gallery_view", "center", "count"])
        v = centers.num_views
        for i in range(v):
            for j in range(v):
                c = centers.centers[i, j]
                w.writerow([i, j, "" if centers.counts[i, j] == 0 else repr(float(c)), int(centers.counts[i, j])])


def write_curve(path, curve):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "value"])
        for r, v in enumerate(curve, start=1):
            w.writerow([r, repr(float(v))])
