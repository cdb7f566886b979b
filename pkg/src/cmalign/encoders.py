"""Per-modality encoders and the shared classifier head.

Each modality gets a two-layer MLP (input -> hidden -> embedding, ReLU in
between) whose output rows are L2-normalized, so every downstream similarity
is a cosine. A single affine classifier head over the shared embedding space
is used for all modalities.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .autodiff import NumericError, Tensor, affine, l2_normalize_rows, relu, softmax_rows

__all__ = [
    "EncoderConfig",
    "param_manifest",
    "init_params",
    "embed",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
EMBED_EPS = 1e-12


@dataclass(frozen=True)
class EncoderConfig:
    input_dims: tuple[int, ...]
    n_classes: int
    hidden_dim: int = 64
    emb_dim: int = 32

    @property
    def n_modalities(self) -> int:
        return len(self.input_dims)


def param_manifest(config: EncoderConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Named shapes for encoder + classifier + class-center parameters, in a fixed order."""
    manifest: list[tuple[str, tuple[int, ...]]] = []
    for j, d in enumerate(config.input_dims):
        manifest.append((f"encoder{j}.w1", (d, config.hidden_dim)))
        manifest.append((f"encoder{j}.b1", (config.hidden_dim,)))
        manifest.append((f"encoder{j}.w2", (config.hidden_dim, config.emb_dim)))
        manifest.append((f"encoder{j}.b2", (config.emb_dim,)))
    manifest.append(("classifier.w", (config.emb_dim, config.n_classes)))
    manifest.append(("classifier.b", (config.n_classes,)))
    manifest.append(("centers", (config.n_classes, config.emb_dim)))
    return manifest


def init_params(config: EncoderConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """He-style init for the ReLU layer, smaller scales downstream; centers start unit-norm."""
    params: dict[str, np.ndarray] = {}
    for j, d in enumerate(config.input_dims):
        params[f"encoder{j}.w1"] = rng.normal(0.0, np.sqrt(2.0 / d), size=(d, config.hidden_dim))
        params[f"encoder{j}.b1"] = np.zeros(config.hidden_dim)
        params[f"encoder{j}.w2"] = rng.normal(0.0, np.sqrt(1.0 / config.hidden_dim),
                                              size=(config.hidden_dim, config.emb_dim))
        params[f"encoder{j}.b2"] = np.zeros(config.emb_dim)
    params["classifier.w"] = rng.normal(0.0, np.sqrt(1.0 / config.emb_dim),
                                        size=(config.emb_dim, config.n_classes))
    params["classifier.b"] = np.zeros(config.n_classes)
    centers = rng.normal(0.0, 1.0, size=(config.n_classes, config.emb_dim))
    centers /= np.maximum(np.linalg.norm(centers, axis=1, keepdims=True), EMBED_EPS)
    params["centers"] = centers
    return params


def _check_layer(t: Tensor, modality: int, layer: int) -> Tensor:
    if not np.all(np.isfinite(t.value)):
        raise NumericError(f"encoder {modality}: non-finite activation after layer {layer}")
    return t


def embed(params: Mapping[str, Tensor], modality: int, batch: Tensor) -> Tensor:
    """Map raw modality features [B, d_j] to unit-norm embeddings [B, emb_dim]."""
    h = _check_layer(relu(affine(batch, params[f"encoder{modality}.w1"],
                                 params[f"encoder{modality}.b1"])), modality, 1)
    e = _check_layer(affine(h, params[f"encoder{modality}.w2"],
                            params[f"encoder{modality}.b2"]), modality, 2)
    return l2_normalize_rows(e, EMBED_EPS)


def predict(params: Mapping[str, Tensor], embeddings: Tensor) -> Tensor:
    """Class probability rows [B, K] from the shared classifier head."""
    return softmax_rows(affine(embeddings, params["classifier.w"], params["classifier.b"]))


def save_checkpoint(params: Mapping[str, np.ndarray], config: EncoderConfig, path: str) -> None:
    """npz blob with a JSON manifest (version, config, shapes) alongside the arrays."""
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": {"input_dims": list(config.input_dims), "n_classes": config.n_classes,
                   "hidden_dim": config.hidden_dim, "emb_dim": config.emb_dim},
        "shapes": {k: list(v.shape) for k, v in params.items()},
    }
    arrays = {k.replace(".", "__"): np.asarray(v) for k, v in params.items()}
    np.savez(path, __manifest__=np.frombuffer(json.dumps(manifest).encode(), dtype=np.uint8),
             **arrays)


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], EncoderConfig]:
    with np.load(path) as blob:
        manifest = json.loads(bytes(blob["__manifest__"]).decode())
        if manifest.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {manifest.get('version')!r}")
        cfg = manifest["config"]
        config = EncoderConfig(input_dims=tuple(cfg["input_dims"]), n_classes=cfg["n_classes"],
                               hidden_dim=cfg["hidden_dim"], emb_dim=cfg["emb_dim"])
        params = {}
        for name, shape in manifest["shapes"].items():
            arr = blob[name.replace(".", "__")]
            if list(arr.shape) != shape:
                raise ValueError(f"checkpoint shape mismatch for '{name}': {arr.shape} vs {shape}")
            params[name] = arr.astype(np.float64)
    return params, config
