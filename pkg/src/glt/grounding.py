"""Scenes, object featurization, and token-to-object grounding.

A Scene is a small set of attributed objects on the unit square. Objects
are turned into fixed (non-learned) feature rows by a seeded random
projection of their attribute one-hots plus position, with a little
Gaussian noise so that grounding has to be learned rather than read off.
The learned side embeds those rows together with bounding-box position
and runs one self-attention layer over the objects of a scene, giving the
contextualized matrix V the chart model grounds against.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

COLORS = ("blue", "brown", "cyan", "gray", "green", "purple", "red", "yellow")
SHAPES = ("cube", "cylinder", "sphere")
SIZES = ("large", "small")
MATERIALS = ("metal", "rubber")

MAX_OBJECTS = 10
ATTR_DIM = len(COLORS) + len(SHAPES) + len(SIZES) + len(MATERIALS) + 2  # one-hots + (x, y)
DEFAULT_FEAT_DIM = 32
FEATURE_NOISE_SIGMA = 0.05

# radius of the rendered square footprint, by size
_HALF_EXTENT = {"large": 0.07, "small": 0.035}


@dataclass(frozen=True)
class SceneObject:
    color: str
    shape: str
    size: str
    material: str
    x: float
    y: float


@dataclass(frozen=True)
class Scene:
    objects: tuple[SceneObject, ...]

    def __post_init__(self):
        if len(self.objects) > MAX_OBJECTS:
            raise ValueError(f"scene has {len(self.objects)} objects; max is {MAX_OBJECTS}")

    def __len__(self) -> int:
        return len(self.objects)

    def to_json(self) -> list[dict]:
        return [{"color": o.color, "shape": o.shape, "size": o.size,
                 "material": o.material, "x": o.x, "y": o.y} for o in self.objects]

    @classmethod
    def from_json(cls, objs: Sequence[dict]) -> "Scene":
        return cls(tuple(SceneObject(o["color"], o["shape"], o["size"],
                                     o["material"], float(o["x"]), float(o["y"]))
                         for o in objs))


def attribute_vector(obj: SceneObject) -> np.ndarray:
    """One-hot attribute blocks plus raw position; linearly decodable by design."""
    v = np.zeros(ATTR_DIM, dtype=np.float64)
    off = 0
    for value, domain in ((obj.color, COLORS), (obj.shape, SHAPES),
                          (obj.size, SIZES), (obj.material, MATERIALS)):
        v[off + domain.index(value)] = 1.0
        off += len(domain)
    v[off] = obj.x
    v[off + 1] = obj.y
    return v


def bounding_box(obj: SceneObject) -> np.ndarray:
    r = _HALF_EXTENT[obj.size]
    box = np.array([obj.x - r, obj.y - r, obj.x + r, obj.y + r], dtype=np.float64)
    return np.clip(box, 0.0, 1.0)


@lru_cache(maxsize=8)
def _feature_projection(dataset_seed: int, feat_dim: int) -> np.ndarray:
    rng = np.random.default_rng([dataset_seed, 0x5CE11E])
    return rng.standard_normal((ATTR_DIM, feat_dim)) / np.sqrt(ATTR_DIM)


def _scene_noise_rng(dataset_seed: int, scene: Scene) -> np.random.Generator:
    digest = hashlib.blake2b(json.dumps(scene.to_json(), sort_keys=True).encode(),
                             digest_size=8).digest()
    return np.random.default_rng([dataset_seed, int.from_bytes(digest, "little")])


def scene_features(scene: Scene, dataset_seed: int, feat_dim: int = DEFAULT_FEAT_DIM,
                   noise_sigma: float = FEATURE_NOISE_SIGMA) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-object feature rows and bounding boxes: (n_obj, feat_dim), (n_obj, 4).

    Deterministic given (scene, dataset_seed): both the projection and the
    noise are derived from the seed (noise additionally from the scene
    content, so shuffled datasets reproduce identical rows).
    """
    attrs = np.stack([attribute_vector(o) for o in scene.objects])
    feats = attrs @ _feature_projection(dataset_seed, feat_dim)
    if noise_sigma > 0:
        feats = feats + noise_sigma * _scene_noise_rng(dataset_seed, scene).standard_normal(feats.shape)
    boxes = np.stack([bounding_box(o) for o in scene.objects])
    return feats, boxes


def contextualize_objects(params: Dict[str, Tensor], v_pred: np.ndarray, boxes: np.ndarray,
                          mask: Optional[np.ndarray] = None) -> Tensor:
    """One self-attention layer over (v_pred W_feat + boxes W_pos).

    v_pred is (B, N, feat), boxes (B, N, 4), mask (B, N) with False marking
    padded object slots; padded slots are excluded from attention and their
    output rows zeroed, so they contribute nothing downstream.
    """
    b, n, _ = v_pred.shape
    dtype = params["w_feat"].dtype
    x = T.add(T.linear(Tensor(v_pred.astype(dtype)), params["w_feat"]),
              T.linear(Tensor(boxes.astype(dtype)), params["w_pos"]))
    q = T.linear(x, params["attn_q"])
    k = T.linear(x, params["attn_k"])
    v = T.linear(x, params["attn_v"])
    h = q.shape[-1]
    scores = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(h))
    if mask is not None:
        bias = np.where(mask[:, None, :], 0.0, -1e9).astype(dtype)
        scores = T.add(scores, Tensor(np.broadcast_to(bias, (b, n, n)).copy()))
    attn = T.softmax(scores, axis=-1)
    out = T.matmul(attn, v)
    if mask is not None:
        row = np.repeat(mask.astype(dtype)[:, :, None], h, axis=2)
        out = T.mul(out, Tensor(row))
    return out


def ground_token(h_i: Tensor, v_mat: Tensor) -> Tensor:
    """Per-object probabilities for one token: sigmoid of the dot with each row of V."""
    return T.sigmoid(T.contract("nh,h->n", v_mat, h_i))


def coref_mix(params: Dict[str, Tensor], h_tokens: Tensor, v_mat: Tensor,
              d_first: Tensor) -> Tensor:
    """Leaf denotations for a second sentence, gated against the first one.

    h_tokens is (n2, B, h), v_mat (B, N, h), d_first (B, N). Each token
    either grounds directly or inherits the first sentence's denotation,
    by a learned two-way gate on the token representation.
    """
    d_hat = T.sigmoid(T.contract("sbh,bnh->sbn", h_tokens, v_mat))
    gates = T.softmax(T.linear(h_tokens, params["coref_w"], params["coref_b"]), axis=-1)
    r1 = T.take(gates, 0, -1)  # (n2, B)
    r2 = T.take(gates, 1, -1)
    return T.add(T.contract("sb,bn->sbn", r1, d_first),
                 T.contract("sb,sbn->sbn", r2, d_hat))


SENTENCE_SEP = ";"


def sentence_break(tokens: Sequence[str]) -> int:
    """Index of the sentence separator; raises if the input is one sentence."""
    try:
        return list(tokens).index(SENTENCE_SEP)
    except ValueError:
        raise ValueError(f"expected a two-sentence input delimited by {SENTENCE_SEP!r}") from None
