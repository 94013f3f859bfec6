"""Versioned, checksummed JSON checkpoints for every trained model type,
plus canonical report documents."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from ..attention import TransformerConfig, TransformerParams
from ..cox import CoxParams
from ..errors import CorruptCheckpoint, VersionMismatch
from ..fusion import FusionConfig, MultimodalModel
from ..neural import DenseConfig, DenseNetParams
from ..preprocessing import Standardizer

FORMAT_VERSION = 1


def canonical_json(obj) -> str:
    """Sorted keys, fixed separators, no NaN; identical objects give identical text."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def _num(x):
    x = float(x)
    return x if math.isfinite(x) else None


def _array(a) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel()]}


def _unarray(d) -> np.ndarray:
    a = np.array(d["data"], dtype=float).reshape(d["shape"])
    a.setflags(write=False)
    return a


def _weights(w: dict) -> dict:
    return {k: _array(v) for k, v in w.items()}


def _unweights(d: dict) -> dict:
    return {k: _unarray(v) for k, v in d.items()}


def _config_dict(conf) -> dict:
    d = asdict(conf)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# per-type encoders


def _enc_cox(m: CoxParams) -> dict:
    return {
        "beta": _array(m.beta),
        "l1": m.l1,
        "l2": m.l2,
        "standardizer": m.standardizer.to_dict(),
        "n_iter": m.n_iter,
        "converged": m.converged,
        "seed": m.seed,
        "objective": _num(m.objective),
    }


def _dec_cox(d: dict) -> CoxParams:
    return CoxParams(
        beta=_unarray(d["beta"]), l1=float(d["l1"]), l2=float(d["l2"]),
        standardizer=Standardizer.from_dict(d["standardizer"]), n_iter=int(d["n_iter"]),
        converged=bool(d["converged"]), seed=int(d["seed"]),
        objective=float("nan") if d["objective"] is None else float(d["objective"]),
    )


def _enc_dense(m: DenseNetParams) -> dict:
    return {
        "weights": _weights(m.weights),
        "config": _config_dict(m.config),
        "standardizer": m.standardizer.to_dict(),
        "seed": m.seed,
        "epochs_run": m.epochs_run,
        "best_epoch": m.best_epoch,
        "selu_lambda": m.selu_lambda,
        "selu_alpha": m.selu_alpha,
    }


def _dense_config(d: dict) -> DenseConfig:
    return DenseConfig(**{**d, "hidden": tuple(d["hidden"])})


def _dec_dense(d: dict) -> DenseNetParams:
    return DenseNetParams(
        weights=_unweights(d["weights"]), config=_dense_config(d["config"]),
        standardizer=Standardizer.from_dict(d["standardizer"]), seed=int(d["seed"]),
        epochs_run=int(d["epochs_run"]), best_epoch=d["best_epoch"],
        selu_lambda=float(d["selu_lambda"]), selu_alpha=float(d["selu_alpha"]),
    )


def _enc_transformer(m: TransformerParams) -> dict:
    return {
        "weights": _weights(m.weights),
        "config": _config_dict(m.config),
        "seed": m.seed,
        "steps_run": m.steps_run,
        "best_step": m.best_step,
    }


def _dec_transformer(d: dict) -> TransformerParams:
    return TransformerParams(
        weights=_unweights(d["weights"]), config=TransformerConfig(**d["config"]),
        seed=int(d["seed"]), steps_run=int(d["steps_run"]), best_step=d["best_step"],
    )


def _enc_fusion_config(c: FusionConfig) -> dict:
    d = {f.name: getattr(c, f.name) for f in fields(c) if f.name not in ("dense", "transformer")}
    d["dense"] = None if c.dense is None else _config_dict(c.dense)
    d["transformer"] = None if c.transformer is None else _config_dict(c.transformer)
    return d


def _dec_fusion_config(d: dict) -> FusionConfig:
    d = dict(d)
    d["dense"] = None if d["dense"] is None else _dense_config(d["dense"])
    d["transformer"] = None if d["transformer"] is None else TransformerConfig(**d["transformer"])
    return FusionConfig(**d)


def _enc_multimodal(m: MultimodalModel) -> dict:
    return {
        "nonimage": encode_model(m.nonimage),
        "image": encode_model(m.image),
        "fusion": encode_model(m.fusion),
        "config": _enc_fusion_config(m.config),
        "fusion_names": list(m.fusion_names),
    }


def _dec_multimodal(d: dict) -> MultimodalModel:
    return MultimodalModel(
        nonimage=decode_model(d["nonimage"]), image=decode_model(d["image"]),
        fusion=decode_model(d["fusion"]), config=_dec_fusion_config(d["config"]),
        fusion_names=tuple(d["fusion_names"]),
    )


_CODECS = {
    "cox": (CoxParams, _enc_cox, _dec_cox),
    "dense": (DenseNetParams, _enc_dense, _dec_dense),
    "transformer": (TransformerParams, _enc_transformer, _dec_transformer),
    "multimodal": (MultimodalModel, _enc_multimodal, _dec_multimodal),
}


def model_kind(model) -> str:
    for kind, (cls, _, _) in _CODECS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"cannot checkpoint objects of type {type(model).__name__}")


def encode_model(model) -> dict:
    kind = model_kind(model)
    return {"kind": kind, "params": _CODECS[kind][1](model)}


def decode_model(doc: dict):
    try:
        kind = doc["kind"]
        return _CODECS[kind][2](doc["params"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptCheckpoint(f"malformed model section: {exc!r}") from None


# ---------------------------------------------------------------------------
# documents


def _checksum(body: dict) -> str:
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def dumps_document(body: dict) -> str:
    """Canonical text of ``body`` with ``format_version`` and a sha256 checksum."""
    body = dict(body, format_version=FORMAT_VERSION)
    return canonical_json(dict(body, checksum=_checksum(body))) + "\n"


def loads_document(text: str, source: str = "<string>") -> dict:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptCheckpoint(f"{source}: not valid JSON ({exc.msg})") from None
    if not isinstance(doc, dict) or "checksum" not in doc or "format_version" not in doc:
        raise CorruptCheckpoint(f"{source}: missing format_version or checksum")
    if doc["format_version"] != FORMAT_VERSION:
        raise VersionMismatch(f"{source}: format version {doc['format_version']}, this build reads {FORMAT_VERSION}")
    claimed = doc.pop("checksum")
    if claimed != _checksum(doc):
        raise CorruptCheckpoint(f"{source}: checksum mismatch")
    return doc


def save_model(path, model, metadata: dict | None = None) -> Path:
    path = Path(path)
    body = {"model": encode_model(model), "metadata": metadata or {}}
    path.write_text(dumps_document(body), encoding="utf-8")
    return path


def load_model(path):
    """Inverse of :func:`save_model`; returns the model object."""
    return load_checkpoint(path)[0]


def load_checkpoint(path) -> tuple:
    """``(model, metadata)`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    doc = loads_document(path.read_text(encoding="utf-8"), str(path))
    if "model" not in doc:
        raise CorruptCheckpoint(f"{path}: no model section")
    return decode_model(doc["model"]), doc.get("metadata", {})


def save_report(path, report: dict) -> Path:
    path = Path(path)
    path.write_text(dumps_document({"report": report}), encoding="utf-8")
    return path


def load_report(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"report not found: {path}")
    doc = loads_document(path.read_text(encoding="utf-8"), str(path))
    if "report" not in doc:
        raise CorruptCheckpoint(f"{path}: no report section")
    return doc["report"]
