"""Versioned JSON documents for fitted models.

Envelope: format, version, kind, architecture, parameters, standardizer, metadata, checksum.
The checksum is the SHA-256 of the canonical JSON of everything else.
"""
from __future__ import annotations
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import torch

from utils.artifacts import hash_payload, load_json, save_json
from utils.errors import DataError, ModelFormatError
from .schemas import BlendSpec
from .data_core import Standardizer
from .dynamics import LinearDynamics, MlpDynamics
from .behavior_clone import PolicyNet
from .policy_opt import BlendedPolicy

logger = logging.getLogger(__name__)

FORMAT = "mbrl-sepsis-model"
VERSION = 1

Model = Union[LinearDynamics, MlpDynamics, PolicyNet, BlendedPolicy]


def _state_dict_payload(module: torch.nn.Module) -> Dict[str, Any]:
    return {name: value.tolist() for name, value in module.state_dict().items()}


def _load_state_dict(module: torch.nn.Module, parameters: Dict[str, Any]) -> None:
    reference = module.state_dict()
    if set(parameters) != set(reference):
        raise ModelFormatError(f"parameter names {sorted(parameters)} do not match the architecture")
    state = {}
    for name, value in parameters.items():
        tensor = torch.as_tensor(value, dtype=reference[name].dtype)
        if tensor.shape != reference[name].shape:
            raise ModelFormatError(f"parameter {name} has shape {tuple(tensor.shape)}, "
                                   f"expected {tuple(reference[name].shape)}")
        state[name] = tensor
    module.load_state_dict(state)


def _standardizer_payload(standardizer: Optional[Standardizer]) -> Optional[Dict[str, Any]]:
    return None if standardizer is None else standardizer.to_dict()


def _body(model: Model) -> Dict[str, Any]:
    if isinstance(model, LinearDynamics):
        return {
            "kind": "linear_dynamics",
            "architecture": {"d_raw": model.weights.shape[0], "history_dim": model.weights.shape[1],
                             "ridge_lambda": model.ridge_lambda},
            "parameters": {"weights": model.weights.tolist(), "bias": model.bias.tolist()},
            "standardizer": _standardizer_payload(model.standardizer),
        }
    if isinstance(model, MlpDynamics):
        return {
            "kind": "mlp_dynamics",
            "architecture": {"d_raw": model.d_raw, "history_dim": model.history_dim, "hidden": list(model.hidden)},
            "parameters": _state_dict_payload(model),
            "standardizer": _standardizer_payload(model.standardizer),
        }
    if isinstance(model, PolicyNet):
        return {
            "kind": "policy_net",
            "architecture": {"history_dim": model.history_dim, "hidden": list(model.hidden), "l2": model.l2},
            "parameters": _state_dict_payload(model),
            "standardizer": _standardizer_payload(model.standardizer),
        }
    if isinstance(model, BlendedPolicy):
        if not isinstance(model.clinician, PolicyNet) or not isinstance(model.learned, PolicyNet):
            raise ModelFormatError("only blends of network policies can be serialized")
        return {
            "kind": "blended_policy",
            "architecture": {"spec": model.spec.model_dump(), "sofa_index": model.sofa_index},
            "parameters": {"clinician": to_document(model.clinician), "learned": to_document(model.learned)},
            "standardizer": None,
        }
    raise ModelFormatError(f"cannot serialize {type(model).__name__}")


def to_document(model: Model, metadata: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
    document = {"format": FORMAT, "version": VERSION, **_body(model), "metadata": metadata or {}}
    document["checksum"] = hash_payload(document)
    return document


def _check_envelope(document: Dict[str, Any]) -> None:
    if not isinstance(document, dict) or document.get("format") != FORMAT:
        raise ModelFormatError("not a model document")
    if document.get("version") != VERSION:
        raise ModelFormatError(f"unsupported model version {document.get('version')!r}, expected {VERSION}")
    body = {key: value for key, value in document.items() if key != "checksum"}
    if document.get("checksum") != hash_payload(body):
        raise ModelFormatError("model checksum mismatch")


def from_document(document: Dict[str, Any]) -> Model:
    _check_envelope(document)
    kind = document.get("kind")
    arch, params = document["architecture"], document["parameters"]
    standardizer = None if document.get("standardizer") is None else Standardizer.from_dict(document["standardizer"])
    try:
        if kind == "linear_dynamics":
            return LinearDynamics(
                weights=np.asarray(params["weights"], dtype=float).reshape(arch["d_raw"], arch["history_dim"]),
                bias=np.asarray(params["bias"], dtype=float),
                ridge_lambda=float(arch["ridge_lambda"]),
                standardizer=standardizer or Standardizer.identity(arch["d_raw"]),
            )
        if kind == "mlp_dynamics":
            model = MlpDynamics(arch["history_dim"], arch["d_raw"], tuple(arch["hidden"]), standardizer)
            _load_state_dict(model, params)
            model.eval()
            return model
        if kind == "policy_net":
            model = PolicyNet(arch["history_dim"], tuple(arch["hidden"]), arch["l2"], standardizer)
            _load_state_dict(model, params)
            model.eval()
            return model
        if kind == "blended_policy":
            return BlendedPolicy(
                from_document(params["clinician"]), from_document(params["learned"]),
                BlendSpec(**arch["spec"]), arch["sofa_index"],
            )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ModelFormatError):
            raise
        raise ModelFormatError(f"malformed {kind} document: {e}")
    raise ModelFormatError(f"unknown model kind {kind!r}")


def save_model(model: Model, path: str | Path, metadata: Optional[Dict[str, Any]] = None) -> Path:
    return save_json(to_document(model, metadata), path)


def load_model(path: str | Path, expected_kind: Optional[str | tuple] = None) -> Model:
    try:
        document = load_json(path)
    except DataError as e:
        raise ModelFormatError(e.detail)
    if expected_kind is not None:
        kinds = (expected_kind,) if isinstance(expected_kind, str) else expected_kind
        if isinstance(document, dict) and document.get("kind") not in kinds:
            raise ModelFormatError(f"{path} holds a {document.get('kind')!r} model, expected {' or '.join(kinds)}")
    model = from_document(document)
    logger.info(f"Loaded {document['kind']} model from: {path}")
    return model
