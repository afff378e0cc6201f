"""Training objective: InfoNCE / triplet contrastive losses, segmentation
cross-entropy, Adam with global-norm clipping, the online-augmentation
training loop, and a finite-difference gradient audit.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import matching
from .augment import CaptionTemplate, derive_seed, generate_pair
from .encoders import (
    EncoderConfig,
    ModelParams,
    Vocab,
    backward_shape,
    backward_text,
    encode_shape,
    encode_text,
    save_params,
    tokenize,
)
from .library import AssemblySchema, ComponentLibrary


class ObjectiveError(ValueError):
    pass


# ---------------------------------------------------------------------------
# losses

def _require_square(sim: np.ndarray) -> np.ndarray:
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ObjectiveError(f"similarity matrix must be square, got {sim.shape}")
    return sim


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def infonce_s2t(sim: np.ndarray, tau: float) -> float:
    """Row-wise softmax cross-entropy with diagonal targets, mean over B."""
    sim = _require_square(sim)
    if tau <= 0:
        raise ObjectiveError("temperature must be positive")
    z = sim / tau
    m = z.max(axis=1)
    lse = m + np.log(np.exp(z - m[:, None]).sum(axis=1))
    return float((lse - np.diag(z)).mean())


def infonce_t2s(sim: np.ndarray, tau: float) -> float:
    """Column-wise counterpart: softmax over shapes for each text."""
    return infonce_s2t(_require_square(sim).T, tau)


def infonce_s2t_grad(sim: np.ndarray, tau: float) -> np.ndarray:
    sim = _require_square(sim)
    b = sim.shape[0]
    g = _softmax_rows(sim / tau)
    g[np.arange(b), np.arange(b)] -= 1.0
    return g / (tau * b)


def infonce_t2s_grad(sim: np.ndarray, tau: float) -> np.ndarray:
    return infonce_s2t_grad(_require_square(sim).T, tau).T


def seg_cross_entropy(seg_logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over points."""
    logits = np.asarray(seg_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ObjectiveError(f"label out of range [0, {logits.shape[1]})")
    m = logits.max(axis=1)
    lse = m + np.log(np.exp(logits - m[:, None]).sum(axis=1))
    return float((lse - logits[np.arange(len(labels)), labels]).mean())


def seg_cross_entropy_grad(seg_logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    logits = np.asarray(seg_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    g = _softmax_rows(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


def semi_hard_triplet(sim: np.ndarray, margin: float = 0.2):
    """Semi-hard triplet loss over both retrieval directions.

    Per anchor, the hardest negative below sim(pos) + margin is chosen when
    one exists, otherwise the hardest overall; returns (loss, grad).
    """
    sim = _require_square(sim)
    b = sim.shape[0]
    if b < 2:
        raise ObjectiveError("triplet loss needs batch size >= 2")
    grad = np.zeros_like(sim)
    total = 0.0
    n_anchors = 2 * b
    for direction in (0, 1):
        s = sim if direction == 0 else sim.T
        g = grad if direction == 0 else grad.T
        for i in range(b):
            pos = s[i, i]
            negs = [(s[i, j], j) for j in range(b) if j != i]
            semi = [(v, j) for v, j in negs if v < pos + margin]
            v_neg, j_neg = max(semi) if semi else max(negs)
            hinge = v_neg - pos + margin
            if hinge > 0:
                total += hinge
                g[i, j_neg] += 1.0 / n_anchors
                g[i, i] -= 1.0 / n_anchors
    return total / n_anchors, grad


def total_loss(components: dict[str, float]) -> float:
    """Unweighted sum; raises naming any non-finite component."""
    for name, value in components.items():
        if not np.isfinite(value):
            raise ObjectiveError(f"non-finite loss component {name!r}: {value}")
    return float(sum(components.values()))


# ---------------------------------------------------------------------------
# optimizer

def clip_by_global_norm(grads: dict[str, np.ndarray], clip: float) -> float:
    """Scale all gradients so their joint L2 norm is at most clip."""
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if clip > 0 and norm > clip:
        scale = clip / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_init(params: ModelParams) -> dict:
    return {
        "step": 0,
        "m": {n: np.zeros_like(a) for n, a in params.tensors.items()},
        "v": {n: np.zeros_like(a) for n, a in params.tensors.items()},
    }


def adam_step(
    params: ModelParams,
    grads: dict[str, np.ndarray],
    state: dict,
    lr: float,
    clip: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Global-norm clipping, then bias-corrected moment update, in place."""
    for name, g in grads.items():
        if g.shape != params.tensors[name].shape:
            raise ObjectiveError(f"gradient shape mismatch for {name}")
    clip_by_global_norm(grads, clip)
    state["step"] += 1
    t = state["step"]
    for name, g in grads.items():
        m = state["m"][name]
        v = state["v"][name]
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        params.tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ---------------------------------------------------------------------------
# batch forward/backward

@dataclass
class TrainConfig:
    batch_size: int = 16
    temperature: float = 0.1
    epochs: int = 20
    steps_per_epoch: int = 8
    learning_rate: float = 4e-4
    clip_norm: float = 2.0
    seed: int = 0
    inter: bool = True
    intra: bool = True
    similarity: str = "emd"  # emd | cosine
    loss: str = "infonce"  # infonce | triplet
    use_seg: bool = True
    use_s2t: bool = True
    use_t2s: bool = True
    triplet_margin: float = 0.2
    n_points: int = 256
    theta: float = 0.95
    dim: int = 32
    pp_hidden: int = 64
    embed_dim: int = 32
    epsilon: float = 0.05
    sinkhorn_max_iter: int = 100
    sinkhorn_tol: float = 1e-6
    augment: bool = True  # False: train on a fixed pregenerated set
    eval_every: int = 0  # epochs between held-out metric reports (0: off)
    eval_size: int = 64

    def __post_init__(self):
        if self.batch_size < 2:
            raise ObjectiveError("contrastive training needs batch size >= 2")
        if self.temperature <= 0:
            raise ObjectiveError("temperature must be positive")
        if self.similarity not in ("emd", "cosine"):
            raise ObjectiveError(f"unknown similarity mode {self.similarity!r}")
        if self.loss not in ("infonce", "triplet"):
            raise ObjectiveError(f"unknown loss mode {self.loss!r}")


@dataclass
class BatchItem:
    points: np.ndarray
    labels: np.ndarray
    token_ids: list[int]


def batch_loss_and_grads(params: ModelParams, batch: list[BatchItem], cfg: TrainConfig):
    """Full forward/backward over one batch.

    Returns (component losses, total, parameter gradients, similarity
    matrix). The similarity matrix entry (i, j) scores shape i against
    text j with the configured similarity mode.
    """
    b = len(batch)
    shape_feats, shape_caches, seg_logits_list = [], [], []
    text_feats, text_caches = [], []
    for item in batch:
        out, cache = encode_shape(item.points, item.labels, params)
        shape_feats.append(out["part_features"])
        seg_logits_list.append(out["seg_logits"])
        shape_caches.append(cache)
        w, tcache = encode_text(item.token_ids, params)
        text_feats.append(w)
        text_caches.append(tcache)

    sim = np.empty((b, b))
    pair_caches: dict[tuple[int, int], dict] = {}
    for i in range(b):
        for j in range(b):
            if cfg.similarity == "emd":
                sim[i, j], pair_caches[i, j] = matching.pair_similarity_with_cache(
                    shape_feats[i], text_feats[j],
                    cfg.epsilon, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol,
                )
            else:
                sim[i, j], pair_caches[i, j] = matching.cosine_global_with_cache(
                    shape_feats[i], text_feats[j]
                )

    components: dict[str, float] = {}
    dsim = np.zeros((b, b))
    if cfg.loss == "infonce":
        if cfg.use_s2t:
            components["L_S2T"] = infonce_s2t(sim, cfg.temperature)
            dsim += infonce_s2t_grad(sim, cfg.temperature)
        if cfg.use_t2s:
            components["L_T2S"] = infonce_t2s(sim, cfg.temperature)
            dsim += infonce_t2s_grad(sim, cfg.temperature)
    else:
        trip, trip_grad = semi_hard_triplet(sim, cfg.triplet_margin)
        components["L_TRIPLET"] = trip
        dsim += trip_grad
    if cfg.use_seg:
        components["L_SEG"] = float(
            np.mean([seg_cross_entropy(seg_logits_list[i], batch[i].labels) for i in range(b)])
        )
    total = total_loss(components)

    grads = params.zero_grads()
    d_shape = [np.zeros_like(f) for f in shape_feats]
    d_text = [np.zeros_like(f) for f in text_feats]
    for i in range(b):
        for j in range(b):
            if dsim[i, j] == 0.0:
                continue
            if cfg.similarity == "emd":
                ds, dw = matching.pair_similarity_backward(pair_caches[i, j], dsim[i, j])
            else:
                ds, dw = matching.cosine_global_backward(pair_caches[i, j], dsim[i, j])
            d_shape[i] += ds
            d_text[j] += dw
    for i in range(b):
        d_seg = None
        if cfg.use_seg:
            d_seg = seg_cross_entropy_grad(seg_logits_list[i], batch[i].labels) / b
        backward_shape(params, shape_caches[i], d_shape[i], d_seg, grads)
        backward_text(params, text_caches[i], d_text[i], grads)
    return components, total, grads, sim


# ---------------------------------------------------------------------------
# training loop

def build_vocab(lib: ComponentLibrary, schemas: list[AssemblySchema],
                tmpl: CaptionTemplate) -> Vocab:
    texts = [rec.caption for rec in lib.all_records()]
    texts += [s.category for s in schemas]
    texts.append(tmpl.pattern + " " + tmpl.separator + " " + tmpl.conjunction)
    return Vocab.build(texts)


def pair_to_item(pair, vocab: Vocab) -> BatchItem:
    return BatchItem(pair.shape.points, pair.shape.labels,
                     tokenize(pair.caption, vocab))


def make_batch(
    lib: ComponentLibrary,
    schemas: list[AssemblySchema],
    tmpl: CaptionTemplate,
    vocab: Vocab,
    cfg: TrainConfig,
    seed_base: int,
    size: int,
) -> list[BatchItem]:
    """One freshly augmented batch; item k is seeded from seed_base + k."""
    items = []
    for k in range(size):
        schema = schemas[k % len(schemas)]
        pair = generate_pair(
            lib, schema, tmpl, cfg.n_points, cfg.theta,
            derive_seed(seed_base, k), cfg.inter, cfg.intra,
        )
        items.append(pair_to_item(pair, vocab))
    return items


# disjoint seed spaces for training batches vs the held-out gallery
_TRAIN_SEED_STRIDE = 1_000_003
_EVAL_SEED_OFFSET = 1 << 40


@dataclass
class TrainResult:
    params: ModelParams
    vocab: Vocab
    loss_curve: list[dict] = field(default_factory=list)
    eval_history: list[dict] = field(default_factory=list)
    aborted: bool = False


def linear_decay_lr(lr0: float, step: int, total_steps: int) -> float:
    return lr0 * max(0.0, 1.0 - step / max(1, total_steps))


def train(
    cfg: TrainConfig,
    lib: ComponentLibrary,
    schemas: list[AssemblySchema],
    tmpl: Optional[CaptionTemplate] = None,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Online-augmented contrastive training.

    Each step draws a fresh generated batch (or cycles a fixed pregenerated
    set when cfg.augment is False), runs the configured losses, and applies
    a clipped Adam step with linear learning-rate decay. Non-finite loss
    aborts, keeping the last good parameters.
    """
    from .evalharness import quick_t2s_rr1  # local import: avoids a cycle

    tmpl = tmpl or CaptionTemplate()
    vocab = build_vocab(lib, schemas, tmpl)
    n_classes = max(len(s.slots) for s in schemas)
    enc_cfg = EncoderConfig(
        dim=cfg.dim, pp_hidden=cfg.pp_hidden, embed_dim=cfg.embed_dim,
        vocab_size=len(vocab), n_classes=n_classes,
    )
    rng = np.random.default_rng(cfg.seed)
    params = ModelParams.init(enc_cfg, rng)
    state = adam_init(params)
    start_step = 0
    if resume_from is not None:
        params, meta = _load_train_checkpoint(resume_from)
        state = meta["opt_state"]
        start_step = meta["step"]

    total_steps = cfg.epochs * cfg.steps_per_epoch
    train_base = cfg.seed * _TRAIN_SEED_STRIDE + 1

    fixed_items: Optional[list[BatchItem]] = None
    if not cfg.augment:
        fixed_items = make_batch(
            lib, schemas, tmpl, vocab, cfg, train_base,
            cfg.batch_size * cfg.steps_per_epoch,
        )

    result = TrainResult(params=params, vocab=vocab)
    last_good = {n: a.copy() for n, a in params.tensors.items()}
    step = start_step
    for epoch in range(start_step // cfg.steps_per_epoch, cfg.epochs):
        sums: dict[str, float] = {}
        totals = 0.0
        for s in range(cfg.steps_per_epoch):
            if fixed_items is None:
                batch = make_batch(
                    lib, schemas, tmpl, vocab, cfg,
                    train_base + (step + 1) * cfg.batch_size, cfg.batch_size,
                )
            else:
                ofs = (step % cfg.steps_per_epoch) * cfg.batch_size
                batch = fixed_items[ofs:ofs + cfg.batch_size]
            try:
                components, total, grads, _ = batch_loss_and_grads(params, batch, cfg)
            except ObjectiveError:
                params.tensors = last_good
                result.aborted = True
                _finish(result, params, vocab, cfg, state, step, out_dir)
                return result
            lr = linear_decay_lr(cfg.learning_rate, step, total_steps)
            adam_step(params, grads, state, lr, cfg.clip_norm)
            step += 1
            for k, v in components.items():
                sums[k] = sums.get(k, 0.0) + v
            totals += total
        last_good = {n: a.copy() for n, a in params.tensors.items()}
        row = {"epoch": epoch}
        for k in ("L_SEG", "L_S2T", "L_T2S", "L_TRIPLET"):
            if k in sums:
                row[k] = sums[k] / cfg.steps_per_epoch
        row["total"] = totals / cfg.steps_per_epoch
        result.loss_curve.append(row)
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            rr1 = quick_t2s_rr1(params, vocab, lib, schemas, tmpl, cfg,
                                eval_gallery_seed(cfg))
            result.eval_history.append({"epoch": epoch, "t2s_rr1": rr1})
    _finish(result, params, vocab, cfg, state, step, out_dir)
    return result


def eval_gallery_seed(cfg: TrainConfig) -> int:
    return cfg.seed * _TRAIN_SEED_STRIDE + _EVAL_SEED_OFFSET


def _finish(result, params, vocab, cfg, state, step, out_dir):
    if out_dir is None:
        return
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "vocab.txt")
    _save_train_checkpoint(out / "checkpoint.pf", params, state, step, cfg)
    if result.loss_curve:
        cols = list(result.loss_curve[-1].keys())
        with open(out / "loss_curve.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols)
            writer.writeheader()
            for row in result.loss_curve:
                writer.writerow(row)


def _save_train_checkpoint(path, params: ModelParams, state: dict, step: int,
                           cfg: TrainConfig) -> None:
    tensors = dict(params.tensors)
    for name, arr in state["m"].items():
        tensors[f"opt.m.{name}"] = arr
    for name, arr in state["v"].items():
        tensors[f"opt.v.{name}"] = arr
    meta = {
        "config": {
            "dim": params.config.dim,
            "pp_hidden": params.config.pp_hidden,
            "embed_dim": params.config.embed_dim,
            "vocab_size": params.config.vocab_size,
            "n_classes": params.config.n_classes,
        },
        "step": step,
        "opt_step": state["step"],
        "train_config": asdict(cfg),
    }
    from .encoders import save_checkpoint

    save_checkpoint(path, tensors, meta)


def _load_train_checkpoint(path):
    from .encoders import load_checkpoint

    tensors, meta = load_checkpoint(path)
    cfg = EncoderConfig(**meta["config"])
    params_t, m, v = {}, {}, {}
    for name, arr in tensors.items():
        if name.startswith("opt.m."):
            m[name[6:]] = arr
        elif name.startswith("opt.v."):
            v[name[6:]] = arr
        else:
            params_t[name] = arr
    params = ModelParams(cfg, params_t)
    meta["opt_state"] = {"step": meta["opt_step"], "m": m, "v": v}
    return params, meta


# ---------------------------------------------------------------------------
# gradient audit

def finite_difference_check(
    params: ModelParams,
    batch: list[BatchItem],
    cfg: Optional[TrainConfig] = None,
    step: float = 1e-5,
    n_coords: int = 200,
    seed: int = 0,
) -> dict:
    """Central-difference audit of the analytic batch gradient.

    Samples coordinates spanning every parameter tensor. The Sinkhorn
    iteration count is pinned (tol=0) so base and perturbed runs unroll
    identically. Returns a report with the worst coordinate per tensor.
    """
    import dataclasses

    cfg = cfg or TrainConfig(batch_size=max(2, len(batch)), sinkhorn_max_iter=60)
    cfg = dataclasses.replace(cfg, sinkhorn_tol=0.0)
    _, _, grads, _ = batch_loss_and_grads(params, batch, cfg)
    rng = np.random.default_rng(seed)
    names = sorted(params.tensors)
    per_tensor = max(1, -(-n_coords // len(names)))
    report: dict = {"max_rel_err": 0.0, "tensors": {}}
    for name in names:
        arr = params.tensors[name]
        size = arr.size
        idxs = rng.choice(size, size=min(per_tensor, size), replace=False)
        worst = {"index": None, "analytic": 0.0, "fd": 0.0, "rel_err": 0.0}
        for flat in idxs:
            idx = np.unravel_index(int(flat), arr.shape)
            orig = arr[idx]
            arr[idx] = orig + step
            _, lp, _, _ = _loss_only(params, batch, cfg)
            arr[idx] = orig - step
            _, lm, _, _ = _loss_only(params, batch, cfg)
            arr[idx] = orig
            fd = (lp - lm) / (2 * step)
            an = grads[name][idx]
            rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
            if rel >= worst["rel_err"]:
                worst = {"index": [int(i) for i in idx], "analytic": float(an),
                         "fd": float(fd), "rel_err": float(rel)}
        report["tensors"][name] = worst
        report["max_rel_err"] = max(report["max_rel_err"], worst["rel_err"])
    return report


def _loss_only(params, batch, cfg):
    components, total, _, sim = _forward_only(params, batch, cfg)
    return components, total, None, sim


def _forward_only(params, batch, cfg):
    b = len(batch)
    shape_feats, seg_list = [], []
    text_feats = []
    for item in batch:
        out, _ = encode_shape(item.points, item.labels, params)
        shape_feats.append(out["part_features"])
        seg_list.append(out["seg_logits"])
        w, _ = encode_text(item.token_ids, params)
        text_feats.append(w)
    sim = np.empty((b, b))
    for i in range(b):
        for j in range(b):
            if cfg.similarity == "emd":
                sim[i, j] = matching.pair_similarity(
                    shape_feats[i], text_feats[j],
                    cfg.epsilon, cfg.sinkhorn_max_iter, cfg.sinkhorn_tol,
                )
            else:
                sim[i, j] = matching.cosine_global_similarity(shape_feats[i], text_feats[j])
    components = {}
    if cfg.loss == "infonce":
        if cfg.use_s2t:
            components["L_S2T"] = infonce_s2t(sim, cfg.temperature)
        if cfg.use_t2s:
            components["L_T2S"] = infonce_t2s(sim, cfg.temperature)
    else:
        components["L_TRIPLET"] = semi_hard_triplet(sim, cfg.triplet_margin)[0]
    if cfg.use_seg:
        components["L_SEG"] = float(
            np.mean([seg_cross_entropy(seg_list[i], batch[i].labels) for i in range(b)])
        )
    return components, total_loss(components), None, sim
