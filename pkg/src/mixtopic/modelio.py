"""Versioned textual container for trained models and topic estimates.

Layout: one header line ``MIXTOPIC <version> <kind> <sha256> <nbytes>``
followed by a JSON payload of exactly ``nbytes`` bytes.  Floats are written
with ``repr`` so a load reproduces every array bit for bit.  Per-iteration
timings are not stored; a loaded trace reports them as NaN.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .corpus import Schema
from .errors import ModelFormatError
from .estimates import TopicEstimates
from .inference import GlobalStats, Hyperparams, Posteriors, TraceRow, TrainConfig, TrainedModel

MAGIC = "MIXTOPIC"
VERSION = 1


def _enc(x):
    if isinstance(x, np.ndarray):
        return {"__nd__": str(x.dtype), "shape": list(x.shape), "data": x.ravel().tolist()}
    return x


def _dec(x):
    if isinstance(x, dict) and "__nd__" in x:
        return np.array(x["data"], dtype=x["__nd__"]).reshape(x["shape"])
    return x


def _hyper_dict(hp):
    return {
        "alpha": _enc(hp.alpha), "beta": _enc(hp.beta), "zeta": _enc(hp.zeta),
        "a": _enc(hp.a), "b": _enc(hp.b),
        "hyperprior": {k: list(v) for k, v in hp.hyperprior.items()},
    }


def _hyper_from(d):
    return Hyperparams(
        _dec(d["alpha"]), _dec(d["beta"]), _dec(d["zeta"]), _dec(d["a"]), _dec(d["b"]),
        {k: tuple(v) for k, v in d["hyperprior"].items()},
    )


def _payload(obj):
    if isinstance(obj, TrainedModel):
        post = obj.posteriors
        return "model", {
            "schema": obj.schema.to_dict(),
            "schema_hash": obj.schema.hash,
            "config": obj.config.to_dict(),
            "hyper": _hyper_dict(obj.hyper),
            "stats": {n: _enc(getattr(obj.stats, n)) for n in GlobalStats.NAMES},
            # wall-clock timings stay out so reruns give identical files
            "trace": [[r.iter, r.loglik, r.delta] for r in obj.trace],
            "iteration": obj.iteration,
            "initial_loglik": obj.initial_loglik,
            "patient_ids": None if obj.patient_ids is None else _enc(obj.patient_ids),
            "posteriors": None if post is None else {
                n: _enc(getattr(post, n)) for n in ("gamma", "lam", "pi", "njk", "mjk")
            },
        }
    if isinstance(obj, TopicEstimates):
        return "estimates", {
            "schema": obj.schema.to_dict(),
            "schema_hash": obj.schema.hash,
            **{n: _enc(getattr(obj, n)) for n in
               ("phi_hat", "eta_hat", "psi_hat", "alpha", "beta", "zeta", "a", "b")},
            "nmar": obj.nmar,
            "mixview": obj.mixview,
        }
    raise TypeError(f"cannot save {type(obj).__name__}")


def save_model(obj, path):
    """Write a :class:`TrainedModel` or :class:`TopicEstimates` atomically."""
    kind, payload = _payload(obj)
    body = json.dumps(payload, separators=(",", ":")).encode("utf-8")
    digest = hashlib.sha256(body).hexdigest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(f"{MAGIC} {VERSION} {kind} {digest} {len(body)}\n".encode("ascii"))
        fh.write(body)
    os.replace(tmp, path)


def load_model(path):
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        body = fh.read()
    if len(header) != 5 or header[0] != MAGIC:
        raise ModelFormatError(f"{path}: not a model file")
    _, version, kind, digest, nbytes = header
    if int(version) != VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    if len(body) != int(nbytes):
        raise ModelFormatError(f"{path}: truncated ({len(body)} of {nbytes} bytes)")
    if hashlib.sha256(body).hexdigest() != digest:
        raise ModelFormatError(f"{path}: checksum mismatch")
    try:
        d = json.loads(body)
        schema = Schema.from_dict(d["schema"])
        if schema.hash != d["schema_hash"]:
            raise ModelFormatError(f"{path}: schema hash mismatch")
        if kind == "estimates":
            return TopicEstimates(
                schema, *(_dec(d[n]) for n in
                          ("phi_hat", "eta_hat", "psi_hat", "alpha", "beta", "zeta", "a", "b")),
                nmar=bool(d["nmar"]), mixview=bool(d["mixview"]),
            )
        if kind != "model":
            raise ModelFormatError(f"{path}: unknown kind {kind!r}")
        post = d["posteriors"]
        return TrainedModel(
            schema=schema,
            config=TrainConfig.from_dict(d["config"]),
            hyper=_hyper_from(d["hyper"]),
            stats=GlobalStats(*(_dec(d["stats"][n]) for n in GlobalStats.NAMES)),
            trace=[TraceRow(int(i), float(ll), float(dl), float("nan")) for i, ll, dl in d["trace"]],
            iteration=int(d["iteration"]),
            initial_loglik=float(d["initial_loglik"]),
            patient_ids=None if d["patient_ids"] is None else _dec(d["patient_ids"]),
            posteriors=None if post is None else Posteriors(
                *(_dec(post[n]) for n in ("gamma", "lam", "pi", "njk", "mjk"))
            ),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"{path}: malformed payload ({exc})") from None


def _eq(a, b):
    if isinstance(a, np.ndarray) or isinstance(b, np.ndarray):
        return (
            isinstance(a, np.ndarray) and isinstance(b, np.ndarray)
            and a.dtype == b.dtype and a.shape == b.shape
            and np.array_equal(a, b, equal_nan=a.dtype.kind == "f")
        )
    if isinstance(a, float) and isinstance(b, float) and np.isnan(a) and np.isnan(b):
        return True
    return a == b


def models_equal(x, y):
    """Bit-exact equality of two models or two estimate sets."""
    if type(x) is not type(y):
        return False
    kx, px = _payload(x)
    ky, py = _payload(y)
    if isinstance(x, TrainedModel):
        for name in ("alpha", "beta", "zeta", "a", "b"):
            if not _eq(getattr(x.hyper, name), getattr(y.hyper, name)):
                return False
        for name in GlobalStats.NAMES:
            if not _eq(getattr(x.stats, name), getattr(y.stats, name)):
                return False
        if (x.posteriors is None) != (y.posteriors is None):
            return False
        if x.posteriors is not None:
            for name in ("gamma", "lam", "pi", "njk", "mjk"):
                if not _eq(getattr(x.posteriors, name), getattr(y.posteriors, name)):
                    return False
    return json.dumps(px, sort_keys=True) == json.dumps(py, sort_keys=True)
