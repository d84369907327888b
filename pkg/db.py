# db.py
# Data layer: checkpoint archives, fingerprints, JSON/CSV/JSONL records.
#
# Checkpoint archive layout (one zip file, members sorted, fixed timestamps):
#   manifest.json              canonical JSON (kind, config, step, fingerprints, arrays index)
#   params/<name>.f32          raw little-endian float32, C order, shape in manifest["arrays"][name]
#   <extra files>              e.g. loss_history.csv
# Parameter names are "<network>.<torch state_dict key>", e.g. "mapping.layers.0.weight".
import csv
import hashlib
import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np
import torch

from errors import ConfigurationError

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)
_F32_LE = np.dtype("<f4")


# ----------------------------
# Utility Functions
# ----------------------------

def canonical_json(obj: Any) -> str:
    # Deterministic representation: same object => same bytes
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, indent=2)


def sha256_hex(*chunks: bytes) -> str:
    h = hashlib.sha256()
    for chunk in chunks:
        h.update(chunk)
    return h.hexdigest()


def file_fingerprint(path: str | Path) -> str:
    return sha256_hex(Path(path).read_bytes())


def arrays_checksum(arrays: Dict[str, np.ndarray]) -> str:
    """sha256 over sorted names, shapes and little-endian float32 bytes."""
    h = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_F32_LE)
        h.update(name.encode("utf-8"))
        h.update(json.dumps(list(arr.shape)).encode("utf-8"))
        h.update(arr.tobytes())
    return h.hexdigest()


# ----------------------------
# Parameters <-> arrays
# ----------------------------

def module_arrays(modules: Dict[str, torch.nn.Module]) -> Dict[str, np.ndarray]:
    out: Dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            out[f"{prefix}.{key}"] = value.detach().cpu().numpy().astype(_F32_LE)
    return out


def load_module_arrays(module: torch.nn.Module, prefix: str, arrays: Dict[str, np.ndarray]) -> None:
    state = {}
    lead = prefix + "."
    for name, arr in arrays.items():
        if name.startswith(lead):
            state[name[len(lead):]] = torch.from_numpy(np.array(arr, dtype=np.float32))
    module.load_state_dict(state, strict=True)


def modules_checksum(modules: Dict[str, torch.nn.Module]) -> str:
    return arrays_checksum(module_arrays(modules))


# ----------------------------
# Archives
# ----------------------------

@dataclass
class Archive:
    manifest: Dict[str, Any]
    arrays: Dict[str, np.ndarray]
    extras: Dict[str, bytes] = field(default_factory=dict)


def _zip_member(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def write_archive(path: str | Path, manifest: Dict[str, Any], arrays: Dict[str, np.ndarray],
                  extras: Optional[Dict[str, bytes]] = None) -> Path:
    """Write a checkpoint archive. Identical inputs produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = dict(manifest)
    manifest["format_version"] = ARCHIVE_FORMAT_VERSION
    manifest["byte_order"] = "little"
    manifest["dtype"] = "float32"
    manifest["arrays"] = {
        name: {"shape": list(np.shape(arr)), "file": f"params/{name}.f32"}
        for name, arr in sorted(arrays.items())
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _zip_member(zf, MANIFEST_NAME, canonical_json(manifest).encode("utf-8"))
        for name in sorted(arrays):
            data = np.ascontiguousarray(arrays[name], dtype=_F32_LE).tobytes()
            _zip_member(zf, f"params/{name}.f32", data)
        for name in sorted(extras or {}):
            _zip_member(zf, name, extras[name])
    path.write_bytes(buf.getvalue())
    logger.info(f"Wrote archive {path} ({len(arrays)} arrays)")
    return path


def read_archive(path: str | Path) -> Archive:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"archive not found: {path}")
    with zipfile.ZipFile(path, "r") as zf:
        manifest = json.loads(zf.read(MANIFEST_NAME).decode("utf-8"))
        arrays = {}
        for name, meta in manifest.get("arrays", {}).items():
            raw = zf.read(meta["file"])
            arrays[name] = np.frombuffer(raw, dtype=_F32_LE).reshape(meta["shape"]).copy()
        listed = {MANIFEST_NAME, *(m["file"] for m in manifest.get("arrays", {}).values())}
        extras = {n: zf.read(n) for n in zf.namelist() if n not in listed}
    return Archive(manifest=manifest, arrays=arrays, extras=extras)


def save_checkpoint(path: str | Path, kind: str, modules: Dict[str, torch.nn.Module],
                    manifest: Dict[str, Any], history: List[Dict[str, Any]],
                    history_columns: List[str]) -> Path:
    """Write a network checkpoint: parameters, manifest and loss_history.csv."""
    arrays = module_arrays(modules)
    body = dict(manifest)
    body["kind"] = kind
    body["params_checksum"] = arrays_checksum(arrays)
    extras = {"loss_history.csv": history_to_csv(history, history_columns)}
    return write_archive(path, body, arrays, extras)


def load_checkpoint(path: str | Path, kind: str) -> Archive:
    """Read a checkpoint archive and check its kind and parameter checksum."""
    archive = read_archive(path)
    found = archive.manifest.get("kind")
    if found != kind:
        raise ConfigurationError(f"{path} is a {found!r} checkpoint, expected {kind!r}")
    if arrays_checksum(archive.arrays) != archive.manifest.get("params_checksum"):
        raise ConfigurationError(f"{path}: parameter checksum does not match its manifest")
    return archive


def archive_history(archive: Archive) -> List[Dict[str, Any]]:
    data = archive.extras.get("loss_history.csv")
    return history_from_csv(data) if data else []


# ----------------------------
# JSON / CSV / JSONL
# ----------------------------

def write_json(path: str | Path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")
    return path


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def history_to_csv(rows: List[Dict[str, Any]], columns: List[str]) -> bytes:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if k != "step" else int(v)) for k, v in row.items() if k in columns})
    return buf.getvalue().encode("utf-8")


def history_from_csv(data: bytes) -> List[Dict[str, Any]]:
    rows = []
    for row in csv.DictReader(io.StringIO(data.decode("utf-8"))):
        rows.append({k: (int(v) if k == "step" else float(v)) for k, v in row.items()})
    return rows


def write_csv(path: str | Path, rows: Iterable[Dict[str, Any]], columns: List[str]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return path


def read_csv(path: str | Path) -> List[Dict[str, str]]:
    with Path(path).open("r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_jsonl(path: str | Path, rows: Iterable[Dict[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    return path


def read_jsonl(path: str | Path) -> List[Dict[str, Any]]:
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
