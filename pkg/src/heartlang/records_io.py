"""Record ingestion (waveform header/.dat pairs, CSV) and the binary record container."""

from __future__ import annotations

import csv
import json
import re
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .signal_core import EcgRecord

RECORD_SUFFIX = ".ecgr"
_WFDB_NAN_16 = -32768


# -- container: one JSON metadata line, then little-endian float32 C x T ----

def save_record(record: EcgRecord, path) -> Path:
    path = Path(path)
    meta = {
        "record_id": record.record_id,
        "sampling_rate": record.sampling_rate,
        "lead_names": list(record.lead_names),
        "shape": list(record.samples.shape),
        "dtype": "<f4",
    }
    annotations = {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                   for k, v in record.annotations.items()}
    if annotations:
        meta["annotations"] = annotations
    with open(path, "wb") as fh:
        fh.write(json.dumps(meta, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(record.samples, dtype="<f4").tobytes())
    return path


def load_record(path) -> EcgRecord:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline()
        payload = fh.read()
    try:
        meta = json.loads(header)
        shape = tuple(meta["shape"])
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: bad record header") from exc
    data = np.frombuffer(payload, dtype="<f4")
    if data.size != shape[0] * shape[1]:
        raise DataError(f"{path}: expected {shape[0] * shape[1]} samples, found {data.size}")
    annotations = meta.get("annotations", {})
    if "qrs_samples" in annotations:
        annotations["qrs_samples"] = np.asarray(annotations["qrs_samples"], dtype=np.int64)
    return EcgRecord(data.reshape(shape).astype(np.float64), meta["sampling_rate"],
                     tuple(meta["lead_names"]), meta.get("record_id", path.stem), annotations)


# -- CSV: one row per lead, optional leading lead name, optional "# key=value" header

def read_csv_record(path, sampling_rate: float | None = None, record_id: str | None = None) -> EcgRecord:
    path = Path(path)
    names, rows, meta = [], [], {}
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            if row[0].lstrip().startswith("#"):
                for item in re.findall(r"(\w+)\s*=\s*([^\s,]+)", ",".join(row)):
                    meta[item[0]] = item[1]
                continue
            try:
                values = [float(v) for v in row]
                names.append(None)
            except ValueError:
                try:
                    values = [float(v) for v in row[1:]]
                except ValueError as exc:
                    raise DataError(f"{path}:{line_no + 1}: non-numeric sample") from exc
                names.append(row[0].strip())
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no samples")
    if len({len(r) for r in rows}) != 1:
        raise DataError(f"{path}: leads have unequal lengths")
    fs = sampling_rate if sampling_rate is not None else float(meta.get("sampling_rate", meta.get("fs", 0)))
    if not fs:
        raise ConfigError(f"{path}: sampling rate unknown (pass it or add '# sampling_rate=...')")
    lead_names = tuple(n if n else f"lead{i}" for i, n in enumerate(names))
    return EcgRecord(np.asarray(rows, dtype=np.float64), fs, lead_names,
                     record_id or meta.get("record_id", path.stem))


def write_csv_record(record: EcgRecord, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(f"# sampling_rate={record.sampling_rate:g}\n")
        w = csv.writer(fh)
        for name, lead in zip(record.lead_names, record.samples):
            w.writerow([name] + [repr(float(v)) for v in lead])
    return path


# -- physiological waveform format: text header + signed 16-bit samples ----

def _parse_gain(field: str):
    # "200(0)/mV" -> gain 200, baseline 0, units mV
    m = re.match(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/(\S+))?$", field)
    if not m:
        raise DataError(f"bad gain field {field!r}")
    gain = float(m.group(1)) or 200.0
    baseline = int(m.group(2)) if m.group(2) is not None else None
    return gain, baseline, m.group(3) or "mV"


def read_wfdb_header(path) -> dict:
    path = Path(path)
    lines = [ln.strip() for ln in path.read_text().splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DataError(f"{path}: empty header")
    head = lines[0].split()
    name = head[0].split("/")[0]
    n_sig = int(head[1])
    fs = float(head[2].split("/")[0]) if len(head) > 2 else 250.0
    n_samples = int(head[3]) if len(head) > 3 else None
    signals = []
    for ln in lines[1:1 + n_sig]:
        parts = ln.split()
        fmt = parts[1].split("x")[0].split(":")[0].split("+")[0]
        gain, baseline, units = _parse_gain(parts[2]) if len(parts) > 2 else (200.0, None, "mV")
        adc_zero = int(parts[4]) if len(parts) > 4 else 0
        signals.append({
            "file": parts[0], "fmt": fmt, "gain": gain,
            "baseline": adc_zero if baseline is None else baseline,
            "units": units, "description": " ".join(parts[8:]) if len(parts) > 8 else f"sig{len(signals)}",
        })
    if len(signals) != n_sig:
        raise DataError(f"{path}: header lists {n_sig} signals, found {len(signals)}")
    return {"record_name": name, "n_sig": n_sig, "fs": fs, "n_samples": n_samples, "signals": signals}


def _decode_212(raw: bytes) -> np.ndarray:
    b = np.frombuffer(raw[: len(raw) // 3 * 3], dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    first = b[:, 0] | ((b[:, 1] & 0x0F) << 8)
    second = b[:, 2] | ((b[:, 1] & 0xF0) << 4)
    out = np.empty(2 * len(b), dtype=np.int32)
    out[0::2], out[1::2] = first, second
    out[out > 2047] -= 4096
    return out


def read_wfdb(header_path) -> EcgRecord:
    """Read a record whose header lists format-16 (or 212/80) signals sharing one .dat file."""
    header_path = Path(header_path)
    hdr = read_wfdb_header(header_path)
    files = {s["file"] for s in hdr["signals"]}
    fmts = {s["fmt"] for s in hdr["signals"]}
    if len(files) != 1 or len(fmts) != 1:
        raise DataError(f"{header_path}: multi-file or mixed-format records are not supported")
    fmt = fmts.pop()
    raw = (header_path.parent / files.pop()).read_bytes()
    n_sig = hdr["n_sig"]
    if fmt == "16":
        digital = np.frombuffer(raw[: len(raw) // 2 * 2], dtype="<i2").astype(np.int32)
        invalid = -32768
    elif fmt == "212":
        digital = _decode_212(raw)
        invalid = -2048
    elif fmt == "80":
        digital = np.frombuffer(raw, dtype=np.uint8).astype(np.int32) - 128
        invalid = -128
    else:
        raise DataError(f"{header_path}: unsupported sample format {fmt}")
    n = hdr["n_samples"] or len(digital) // n_sig
    if len(digital) < n * n_sig:
        raise DataError(f"{header_path}: data file holds {len(digital)} values, header needs {n * n_sig}")
    digital = digital[: n * n_sig].reshape(n, n_sig).T
    samples = np.empty(digital.shape, dtype=np.float64)
    for c, sig in enumerate(hdr["signals"]):
        lead = (digital[c] - sig["baseline"]) / sig["gain"]
        if sig["units"].lower() in ("uv", "µv"):
            lead = lead / 1000.0
        lead[digital[c] == invalid] = np.nan
        samples[c] = lead
    names = tuple(s["description"] for s in hdr["signals"])
    return EcgRecord(samples, hdr["fs"], names, hdr["record_name"])


def write_wfdb(record: EcgRecord, directory, gain: float = 1000.0) -> Path:
    """Write a format-16 header/.dat pair; non-finite samples become the invalid marker."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    name = record.record_id or "record"
    digital = np.round(record.samples * gain)
    bad = ~np.isfinite(digital)
    digital = np.clip(np.where(bad, 0, digital), -32767, 32767).astype("<i2")
    digital[bad] = _WFDB_NAN_16
    (directory / f"{name}.dat").write_bytes(np.ascontiguousarray(digital.T).tobytes())
    lines = [f"{name} {record.n_leads} {record.sampling_rate:g} {record.n_samples}"]
    for lead_name in record.lead_names:
        lines.append(f"{name}.dat 16 {gain:g}(0)/mV 16 0 0 0 0 {lead_name}")
    header = directory / f"{name}.hea"
    header.write_text("\n".join(lines) + "\n")
    return header


def load_any(path, sampling_rate: float | None = None) -> EcgRecord:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == RECORD_SUFFIX:
        return load_record(path)
    if suffix == ".hea":
        return read_wfdb(path)
    if suffix == ".csv":
        return read_csv_record(path, sampling_rate)
    raise DataError(f"unrecognised record file {path}")


def list_record_files(directory) -> list:
    """Record files in a directory, sorted by name so corpus order is deterministic."""
    directory = Path(directory)
    if directory.is_file():
        return [directory]
    if not directory.is_dir():
        raise DataError(f"{directory} does not exist")
    files = [p for p in directory.iterdir()
             if p.suffix.lower() in (RECORD_SUFFIX, ".hea") or
             (p.suffix.lower() == ".csv" and p.name != "labels.csv")]
    return sorted(files, key=lambda p: p.name)
