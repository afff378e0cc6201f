"""Toy-scale unimodal encoders with exact manual reverse-mode gradients.

Shape branch: per-point MLP -> global max pool -> concat(local, global)
-> fusion MLP (ReLU) -> per-point features, a linear segmentation head,
and average pooling of per-point features by part label.

Text branch: word-embedding lookup -> bidirectional gated recurrent cells
(hidden D/2 per direction), word feature = [h_forward; h_backward].

Every forward caches its intermediates; the matching backward functions
consume the cache and return parameter gradients plus input gradients.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np


class EncoderError(ValueError):
    pass


PAD_ID = 0
UNK_ID = 1
_PAD_TOKEN = "<pad>"
_UNK_TOKEN = "<unk>"

_NORMALIZE = re.compile(r"[^a-z0-9]+")


def normalize_text(text: str) -> list[str]:
    return [t for t in _NORMALIZE.sub(" ", text.lower()).split() if t]


@dataclass
class Vocab:
    token_to_id: dict[str, int]

    @classmethod
    def build(cls, texts) -> "Vocab":
        tokens = sorted({tok for text in texts for tok in normalize_text(text)})
        table = {_PAD_TOKEN: PAD_ID, _UNK_TOKEN: UNK_ID}
        for tok in tokens:
            table[tok] = len(table)
        return cls(table)

    def __len__(self) -> int:
        return len(self.token_to_id)

    def save(self, path) -> None:
        ordered = sorted(self.token_to_id, key=self.token_to_id.get)
        Path(path).write_text("\n".join(ordered) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls({tok: i for i, tok in enumerate(tokens)})


def tokenize(text: str, vocab: Vocab) -> list[int]:
    """Lowercase, strip punctuation, split, look up with unknown fallback.

    Empty text maps to a single unknown token.
    """
    ids = [vocab.token_to_id.get(tok, UNK_ID) for tok in normalize_text(text)]
    return ids or [UNK_ID]


@dataclass
class EncoderConfig:
    dim: int = 64  # feature dimension D (paper scale: 1024)
    pp_hidden: int = 64  # per-point MLP hidden width
    embed_dim: int = 32
    vocab_size: int = 64
    n_classes: int = 5

    def __post_init__(self):
        if self.dim % 2:
            raise EncoderError("feature dimension must be even (bi-directional concat)")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, config: EncoderConfig, rng: np.random.Generator) -> "ModelParams":
        d, h, e, v, k = (config.dim, config.pp_hidden, config.embed_dim,
                         config.vocab_size, config.n_classes)
        dh = d // 2
        t = {
            "pp_w1": _uniform(rng, 3, (3, h)),
            "pp_b1": np.zeros(h),
            "pp_w2": _uniform(rng, h, (h, d)),
            "pp_b2": np.zeros(d),
            "fuse_w1": _uniform(rng, 2 * d, (2 * d, d)),
            "fuse_b1": np.zeros(d),
            "fuse_w2": _uniform(rng, d, (d, d)),
            "fuse_b2": np.zeros(d),
            "seg_w": _uniform(rng, d, (d, k)),
            "seg_b": np.zeros(k),
            "embed": _uniform(rng, e, (v, e)),
        }
        for direction in ("f", "b"):
            for gate in ("z", "r", "h"):
                t[f"gru_{direction}_w{gate}"] = _uniform(rng, e, (e, dh))
                t[f"gru_{direction}_u{gate}"] = _uniform(rng, dh, (dh, dh))
                t[f"gru_{direction}_b{gate}"] = np.zeros(dh)
        return cls(config, t)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {name: np.zeros_like(arr) for name, arr in self.tensors.items()}

    def check_finite(self) -> None:
        for name, arr in self.tensors.items():
            if not np.all(np.isfinite(arr)):
                raise EncoderError(f"non-finite parameter tensor {name}")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


# ---------------------------------------------------------------------------
# shape encoder

def encode_shape(points: np.ndarray, labels: Optional[np.ndarray], params: ModelParams):
    """Forward pass; returns (outputs, cache).

    outputs: part_features (N, D) ordered by ascending group label,
    seg_logits (N_p, K), global (D). Grouping uses the given labels, or the
    segmentation argmax when labels are None.
    """
    t = params.tensors
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if pts.shape[0] < 1:
        raise EncoderError("encode_shape: empty point set")
    a1 = pts @ t["pp_w1"] + t["pp_b1"]
    z1 = np.maximum(a1, 0.0)
    a2 = z1 @ t["pp_w2"] + t["pp_b2"]
    z2 = np.maximum(a2, 0.0)  # per-point local features
    gmax_idx = np.argmax(z2, axis=0)  # ties: lowest point index
    s_g = z2[gmax_idx, np.arange(z2.shape[1])]
    u = np.concatenate([z2, np.broadcast_to(s_g, z2.shape)], axis=1)
    a3 = u @ t["fuse_w1"] + t["fuse_b1"]
    z3 = np.maximum(a3, 0.0)
    p = z3 @ t["fuse_w2"] + t["fuse_b2"]  # per-point D-dim features
    seg_logits = p @ t["seg_w"] + t["seg_b"]
    k = t["seg_w"].shape[1]
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if labels.shape[0] != pts.shape[0]:
            raise EncoderError("encode_shape: label/point count mismatch")
        if labels.min() < 0 or labels.max() >= k:
            raise EncoderError(f"encode_shape: label out of range [0, {k})")
        groups = labels
    else:
        groups = np.argmax(seg_logits, axis=1)  # ties: lowest class id
    group_ids = np.unique(groups)
    part_features = np.stack([p[groups == g].mean(axis=0) for g in group_ids])
    cache = {
        "points": pts, "a1": a1, "z1": z1, "a2": a2, "z2": z2,
        "gmax_idx": gmax_idx, "u": u, "a3": a3, "z3": z3, "p": p,
        "groups": groups, "group_ids": group_ids,
    }
    outputs = {"part_features": part_features, "seg_logits": seg_logits, "global": s_g}
    return outputs, cache


def backward_shape(
    params: ModelParams,
    cache: dict,
    d_part_features: Optional[np.ndarray],
    d_seg_logits: Optional[np.ndarray],
    grads: dict[str, np.ndarray],
) -> None:
    """Accumulate shape-encoder parameter gradients into grads."""
    t = params.tensors
    p = cache["p"]
    dp = np.zeros_like(p)
    if d_seg_logits is not None:
        grads["seg_w"] += p.T @ d_seg_logits
        grads["seg_b"] += d_seg_logits.sum(axis=0)
        dp += d_seg_logits @ t["seg_w"].T
    if d_part_features is not None:
        for row, g in enumerate(cache["group_ids"]):
            mask = cache["groups"] == g
            dp[mask] += d_part_features[row] / mask.sum()
    dz3 = dp @ t["fuse_w2"].T
    grads["fuse_w2"] += cache["z3"].T @ dp
    grads["fuse_b2"] += dp.sum(axis=0)
    da3 = dz3 * (cache["a3"] > 0)
    grads["fuse_w1"] += cache["u"].T @ da3
    grads["fuse_b1"] += da3.sum(axis=0)
    du = da3 @ t["fuse_w1"].T
    d = cache["z2"].shape[1]
    dz2 = du[:, :d].copy()
    ds_g = du[:, d:].sum(axis=0)
    # max pool routes each channel's gradient to its (single) argmax point
    dz2[cache["gmax_idx"], np.arange(d)] += ds_g
    da2 = dz2 * (cache["a2"] > 0)
    grads["pp_w2"] += cache["z1"].T @ da2
    grads["pp_b2"] += da2.sum(axis=0)
    dz1 = da2 @ t["pp_w2"].T
    da1 = dz1 * (cache["a1"] > 0)
    grads["pp_w1"] += cache["points"].T @ da1
    grads["pp_b1"] += da1.sum(axis=0)


# ---------------------------------------------------------------------------
# text encoder

def _gru_forward(t: dict, direction: str, xs: np.ndarray):
    """Run one direction over the sequence; returns (hiddens, step caches)."""
    wz, uz, bz = t[f"gru_{direction}_wz"], t[f"gru_{direction}_uz"], t[f"gru_{direction}_bz"]
    wr, ur, br = t[f"gru_{direction}_wr"], t[f"gru_{direction}_ur"], t[f"gru_{direction}_br"]
    wh, uh, bh = t[f"gru_{direction}_wh"], t[f"gru_{direction}_uh"], t[f"gru_{direction}_bh"]
    dh = bz.shape[0]
    h = np.zeros(dh)
    hs = np.empty((xs.shape[0], dh))
    steps = []
    for i in range(xs.shape[0]):
        x = xs[i]
        z = _sigmoid(x @ wz + h @ uz + bz)
        r = _sigmoid(x @ wr + h @ ur + br)
        hc = np.tanh(x @ wh + (r * h) @ uh + bh)
        h_new = (1.0 - z) * h + z * hc
        steps.append({"x": x, "h_prev": h, "z": z, "r": r, "hc": hc})
        h = h_new
        hs[i] = h
    return hs, steps


def _gru_backward(t: dict, direction: str, steps: list, dhs: np.ndarray,
                  grads: dict) -> np.ndarray:
    """BPTT over one direction; dhs[i] is the upstream gradient on h_i.

    Returns gradients w.r.t. the inputs xs.
    """
    wz, uz = t[f"gru_{direction}_wz"], t[f"gru_{direction}_uz"]
    wr, ur = t[f"gru_{direction}_wr"], t[f"gru_{direction}_ur"]
    wh, uh = t[f"gru_{direction}_wh"], t[f"gru_{direction}_uh"]
    dxs = np.zeros((len(steps), wz.shape[0]))
    dh = np.zeros(uz.shape[0])
    for i in range(len(steps) - 1, -1, -1):
        s = steps[i]
        dh = dh + dhs[i]
        x, h_prev, z, r, hc = s["x"], s["h_prev"], s["z"], s["r"], s["hc"]
        dz = dh * (hc - h_prev)
        dhc = dh * z
        dh_prev = dh * (1.0 - z)
        da_hc = dhc * (1.0 - hc * hc)
        grads[f"gru_{direction}_wh"] += np.outer(x, da_hc)
        grads[f"gru_{direction}_uh"] += np.outer(r * h_prev, da_hc)
        grads[f"gru_{direction}_bh"] += da_hc
        drh = uh @ da_hc
        dr = drh * h_prev
        dh_prev += drh * r
        dxs[i] += wh @ da_hc
        da_z = dz * z * (1.0 - z)
        grads[f"gru_{direction}_wz"] += np.outer(x, da_z)
        grads[f"gru_{direction}_uz"] += np.outer(h_prev, da_z)
        grads[f"gru_{direction}_bz"] += da_z
        dxs[i] += wz @ da_z
        dh_prev += uz @ da_z
        da_r = dr * r * (1.0 - r)
        grads[f"gru_{direction}_wr"] += np.outer(x, da_r)
        grads[f"gru_{direction}_ur"] += np.outer(h_prev, da_r)
        grads[f"gru_{direction}_br"] += da_r
        dxs[i] += wr @ da_r
        dh_prev += ur @ da_r
        dh = dh_prev
    return dxs


def encode_text(token_ids, params: ModelParams):
    """Forward pass; returns (word_features (M, D), cache)."""
    t = params.tensors
    ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
    if ids.shape[0] < 1:
        raise EncoderError("encode_text: empty token sequence")
    v = t["embed"].shape[0]
    if ids.min() < 0 or ids.max() >= v:
        raise EncoderError(f"encode_text: token id out of range [0, {v})")
    xs = t["embed"][ids]
    hf, steps_f = _gru_forward(t, "f", xs)
    hb_rev, steps_b = _gru_forward(t, "b", xs[::-1])
    hb = hb_rev[::-1]
    w = np.concatenate([hf, hb], axis=1)
    cache = {"ids": ids, "xs": xs, "steps_f": steps_f, "steps_b": steps_b}
    return w, cache


def backward_text(params: ModelParams, cache: dict, d_w: np.ndarray,
                  grads: dict[str, np.ndarray]) -> None:
    """Accumulate text-encoder parameter gradients into grads."""
    dh = params.config.dim // 2
    d_hf = d_w[:, :dh]
    d_hb = d_w[:, dh:]
    dxs = _gru_backward(params.tensors, "f", cache["steps_f"], d_hf, grads)
    dxs_b = _gru_backward(params.tensors, "b", cache["steps_b"], d_hb[::-1], grads)
    dxs = dxs + dxs_b[::-1]
    np.add.at(grads["embed"], cache["ids"], dxs)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    """Versioned binary: magic, version, JSON header, little-endian float32 data."""
    import json
    import struct

    names = sorted(tensors)
    header = {
        "tensors": [{"name": n, "shape": list(tensors[n].shape)} for n in names],
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.asarray(tensors[n], dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (tensors as float64, meta)."""
    import json
    import struct

    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise EncoderError(f"{path}: not a partforge checkpoint")
        version = struct.unpack("<I", fh.read(4))[0]
        if version != CHECKPOINT_VERSION:
            raise EncoderError(f"{path}: unsupported checkpoint version {version}")
        blob_len = struct.unpack("<I", fh.read(4))[0]
        header = json.loads(fh.read(blob_len).decode("utf-8"))
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").astype(np.float64)
            tensors[entry["name"]] = data.reshape(shape)
    return tensors, header["meta"]


def save_params(path, params: ModelParams, extra_meta: Optional[dict] = None) -> None:
    meta = {
        "config": {
            "dim": params.config.dim,
            "pp_hidden": params.config.pp_hidden,
            "embed_dim": params.config.embed_dim,
            "vocab_size": params.config.vocab_size,
            "n_classes": params.config.n_classes,
        }
    }
    meta.update(extra_meta or {})
    save_checkpoint(path, params.tensors, meta)


def load_params(path):
    """Returns (ModelParams, meta)."""
    tensors, meta = load_checkpoint(path)
    cfg = EncoderConfig(**meta["config"])
    return ModelParams(cfg, tensors), meta
