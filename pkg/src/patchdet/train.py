"""Training loops: patch-localization pretraining, detection fine-tuning,
the optimizer, and the ablation matrix.

One flat config drives everything; runs are bitwise deterministic per
(config, seed) on one machine. Curve records are (epoch, split, metric,
value) tuples, written as CSV by the evaluation module.
"""

import json
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import evaluation as E
from . import losses as L
from . import tensor as T
from .matcher import Assignment, build_cost, hungarian
from .model import Model, ModelConfig, load_checkpoint, load_into_model, save_checkpoint
from .pretext import (SynthSpec, make_pretext_sample, resize_bilinear,
                      sample_seed, synth_image)
from .tensor import Tensor


@dataclass
class TrainConfig:
    """Flat run configuration: loop, model shape, and data pipeline knobs."""

    # loop
    mode: str = "pretrain"
    epochs: int = 30
    batch_size: int = 8
    lr_transformer: float = 1e-4
    lr_backbone: float = 5e-5
    weight_decay: float = 1e-4
    lr_drop_epoch: int = 20
    grad_clip: float = 0.1
    seed: int = 0
    init_checkpoint: str = None
    # model shape
    d_model: int = 64
    n_heads: int = 4
    enc_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 256
    num_queries: int = 16
    max_patches: int = 4
    c_backbone: int = 64
    k_classes: int = 3
    # behavior flags
    freeze_backbone: bool = True
    use_attention_mask: bool = True
    use_query_shuffle: bool = False
    use_reconstruction: bool = True
    aux_losses: bool = True
    # dropout-zeroed patches keep their box/class targets by default; off
    # excludes them from matching so their whole group trains as negatives
    dropped_targets: bool = True
    # data pipeline
    canvas: int = 64
    patch_side: int = 16
    short_lo: int = 48
    short_hi: int = 64
    long_max: int = 80
    num_patches: int = 4
    crop_min_frac: float = 0.125
    jitter: float = 0.4
    gray_p: float = 0.2
    dropout_rate: float = 0.1
    train_size: int = 128
    val_size: int = 50
    warmup_steps: int = 600

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not (0 <= self.lr_drop_epoch < self.epochs):
            raise ValueError("lr_drop_epoch must be inside [0, epochs)")
        if min(self.lr_transformer, self.lr_backbone) <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.num_patches > self.max_patches:
            raise ValueError("num_patches exceeds max_patches")

    def model_config(self, **overrides):
        kwargs = dict(
            d_model=self.d_model, n_heads=self.n_heads,
            enc_layers=self.enc_layers, dec_layers=self.dec_layers,
            ffn_dim=self.ffn_dim, num_queries=self.num_queries,
            max_patches=self.max_patches, c_backbone=self.c_backbone,
            k_classes=self.k_classes, freeze_backbone=self.freeze_backbone,
            use_attention_mask=self.use_attention_mask,
            use_query_shuffle=self.use_query_shuffle,
            use_reconstruction=self.use_reconstruction,
            aux_losses=self.aux_losses)
        kwargs.update(overrides)
        return ModelConfig(**kwargs)


_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}

# Matching-cost weight on |anchor - patch center|. Large enough to decide
# the within-group assignment while predictions are still noise, small
# enough that a genuinely better prediction wins once training moves.
ANCHOR_MATCH_WEIGHT = 2.0


def config_from_dict(values):
    unknown = sorted(set(values) - _CONFIG_FIELDS)
    if unknown:
        raise ValueError(f"unknown config key(s): {', '.join(unknown)}")
    return TrainConfig(**values)


def load_config(path):
    with open(path) as f:
        values = json.load(f)
    if not isinstance(values, dict):
        raise ValueError(f"{path}: config must be a flat JSON object")
    return config_from_dict(values)


def save_config(path, cfg):
    with open(path, "w") as f:
        json.dump(asdict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def lr_schedule(epoch, lr_drop_epoch):
    """1.0 strictly before the drop epoch, 0.1 at and after it.

    Epochs count from 0 here, so lr_drop_epoch is also the number of
    full-rate epochs. Training loops that count display epochs from 1
    pass epoch - 1.
    """
    return 1.0 if epoch < lr_drop_epoch else 0.1


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def init_optimizer(params):
    """Moment buffers for exactly the given parameters, nothing else."""
    state = OptimizerState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def adamw_step(params, state, lrs, weight_decay,
               betas=(0.9, 0.999), eps=1e-8):
    """Adam with decoupled weight decay; parameters without grads are skipped."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        lr = lrs[name] if isinstance(lrs, dict) else lrs
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps)
                                + weight_decay * p.data)


def clip_gradients(params, max_norm):
    """Global-norm gradient clipping; returns the pre-clip norm."""
    total = 0.0
    grads = [p.grad for p in params.values() if p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g *= scale
    return norm


def _group_lrs(params, cfg, epoch):
    mult = lr_schedule(epoch - 1, cfg.lr_drop_epoch)
    return {name: (cfg.lr_backbone if name.startswith("backbone.")
                   else cfg.lr_transformer) * mult
            for name in params}


# ---------------------------------------------------------------------------
# backbone warm-up: stands in for an externally pretrained CNN


def _warmup_crop(scene, rng, canvas):
    """A shape-centered crop at a random scale, for warm-up classification."""
    cls, (cx, cy, bw, bh) = scene.objects[rng.integers(len(scene.objects))]
    h, w = scene.image.shape[:2]
    # pad the tight box by a random background margin on each side
    mx = bw * rng.uniform(0.0, 0.5)
    my = bh * rng.uniform(0.0, 0.5)
    x0 = int(np.clip(np.floor((cx - bw / 2 - mx) * w), 0, w - 2))
    x1 = int(np.clip(np.ceil((cx + bw / 2 + mx) * w), x0 + 2, w))
    y0 = int(np.clip(np.floor((cy - bh / 2 - my) * h), 0, h - 2))
    y1 = int(np.clip(np.ceil((cy + bh / 2 + my) * h), y0 + 2, h))
    side = int(rng.integers(12, 41))
    return resize_bilinear(scene.image[y0:y1, x0:x1], side, side), cls


def _dominant_channel(crop, bg):
    """Index of the strongest color channel among non-background pixels."""
    img = crop.astype(np.int64)
    mask = np.abs(img - bg.astype(np.int64)).sum(axis=2) > 30
    fg = img[mask] if mask.any() else img.reshape(-1, 3)
    return int(np.argmax(fg.mean(axis=0)))


def warmup_backbone(model, cfg, log=None):
    """Briefly train the backbone to classify shape crops across scales.

    The localization pretraining assumes a backbone with discriminative
    features (normally inherited from a large pretrained CNN); a few hundred
    supervised steps on synthetic shape crops provide that at desk scale.
    Crops are taken around shapes in full scenes and re-rendered at random
    resolutions, and the label is the shape class crossed with the dominant
    color channel. The scale variation and the color factor both matter:
    they keep the learned channels broad enough that a crop's pooled feature
    still lines up with the feature-map cells at its source location, which
    is what the localization task bootstraps from. The classifier head is
    discarded and the freeze flag restored afterwards.
    """
    if cfg.warmup_steps <= 0:
        return
    spec = SynthSpec(canvas=cfg.canvas)
    n_classes = 3 * len(spec.shapes)
    rng = np.random.default_rng(sample_seed(cfg.seed, 0xBACB0E))
    was_frozen = model.backbone_frozen
    model.set_backbone_frozen(False)
    bound = 1.0 / np.sqrt(cfg.c_backbone)
    head_w = Tensor(rng.uniform(-bound, bound, (cfg.c_backbone, n_classes)),
                    requires_grad=True)
    head_b = Tensor(np.zeros(n_classes), requires_grad=True)
    params = {name: p for name, p in model.params.items()
              if name.startswith("backbone.")}
    params["head.w"] = head_w
    params["head.b"] = head_b
    state = init_optimizer(params)
    batch = 16
    for step in range(cfg.warmup_steps):
        for p in params.values():
            p.grad = None
        feats, labels = [], []
        for k in range(batch):
            scene = synth_image(sample_seed(cfg.seed, 0xBACB0E, step, k), spec)
            crop, cls = _warmup_crop(scene, rng, cfg.canvas)
            feats.append(T.reshape(model.patch_feature(crop),
                                   (1, cfg.c_backbone)))
            labels.append(cls * 3 + _dominant_channel(crop, scene.image[0, 0]))
        logits = T.linear(T.concat(feats, axis=0), head_w, head_b)
        loss = T.neg(T.mean(T.take_per_row(T.log_softmax(logits), labels)))
        loss.backward()
        # The backbone starts from a small init, so it needs a hotter rate
        # than the main loop to move at all within a few hundred steps.
        adamw_step(params, state, 3e-3, cfg.weight_decay)
        if log and (step + 1) % 100 == 0:
            log(f"warmup step {step + 1}: loss {loss.item():.4f}")
    model.set_backbone_frozen(was_frozen)


# ---------------------------------------------------------------------------
# pretraining


def _pretext_sample(cfg, image, seed):
    return make_pretext_sample(
        image, cfg.num_patches, seed,
        short_range=(cfg.short_lo, cfg.short_hi), long_max=cfg.long_max,
        patch_side=cfg.patch_side, min_frac=cfg.crop_min_frac,
        jitter=cfg.jitter, gray_p=cfg.gray_p, dropout_rate=cfg.dropout_rate,
        max_queries=cfg.num_queries)


def _grouped_assignment(cost, num_queries):
    """Match each patch to a query within its own group.

    Patch k's queries are the k-th contiguous block, so the assignment
    decomposes into one tiny matching per group; queries in other groups
    never compete for patch k (they are conditioned on a different patch).
    """
    m = cost.shape[0]
    group_size = num_queries // m
    pairs = []
    total = 0.0
    for k in range(m):
        lo = k * group_size
        sub = hungarian(cost[k:k + 1, lo:lo + group_size])
        q = lo + sub.pairs[0][1]
        pairs.append((k, q))
        total += float(cost[k, q])
    return Assignment(pairs=tuple(pairs), total_cost=total)


def pretext_loss(model, sample, dropped_targets=True):
    """Forward, per-group matching, and the combined localization loss.

    With dropped_targets off, zeroed patches leave the matching entirely:
    their queries become plain negatives and the balance weight uses the
    effective patch count.
    """
    cfg = model.config
    out = model.forward_pretrain(sample)
    preds = out.preds if cfg.aux_losses else out.preds[-1:]
    # Steer each patch toward the query whose spotlight anchor sits nearest
    # to it. Early in training the prediction costs are pure noise, so
    # without this tiebreak the per-group assignment rotates and every
    # query's class target flips batch to batch; with it the same query owns
    # the same region from the start and the heads see consistent targets.
    ax = model.params["anchor.x"].data
    ay = model.params["anchor.y"].data
    anchor_cost = ANCHOR_MATCH_WEIGHT * (
        np.abs(sample.gt_boxes[:, 0:1] - ax[None, :])
        + np.abs(sample.gt_boxes[:, 1:2] - ay[None, :]))
    pieces = []
    for pred in preds:
        cost = build_cost(pred.class_logits.data, pred.boxes.data,
                          sample.gt_boxes)
        assignment = _grouped_assignment(cost + anchor_cost, cfg.num_queries)
        if not dropped_targets:
            pairs = tuple((g, q) for g, q in assignment.pairs
                          if not sample.dropped[g])
            assignment = Assignment(
                pairs=pairs,
                total_cost=sum(float(cost[g, q]) for g, q in pairs))
        pieces.append(L.hungarian_loss(
            pred, sample.gt_boxes, out.patch_features, assignment,
            num_patches=len(assignment.pairs), num_queries=cfg.num_queries,
            use_reconstruction=cfg.use_reconstruction))
    return L.stack_breakdowns(pieces)


def pretrain(cfg, images, out_dir=None, start_epoch=1, log=None):
    """Patch-localization pretraining over raw images.

    Returns (model, records). With out_dir set, writes checkpoint.ckpt,
    curves.csv and config.json.
    """
    model = Model(cfg.model_config(), seed=cfg.seed)
    if cfg.init_checkpoint:
        load_into_model(model, load_checkpoint(cfg.init_checkpoint))
    else:
        warmup_backbone(model, cfg, log=log)
    params = model.trainable_parameters()
    state = init_optimizer(params)
    records = []
    for epoch in range(start_epoch, cfg.epochs + 1):
        order = np.random.default_rng(
            sample_seed(cfg.seed, epoch)).permutation(len(images))
        sums = {"total": 0.0, "cls": 0.0, "box": 0.0, "rec": 0.0}
        seen = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for p in params.values():
                p.grad = None
            per_sample = []
            for di in batch:
                sample = _pretext_sample(cfg, images[di],
                                         sample_seed(cfg.seed, epoch, int(di)))
                per_sample.append(pretext_loss(model, sample,
                                               cfg.dropped_targets))
            batch_loss = L.scale_breakdown(
                L.stack_breakdowns(per_sample), 1.0 / len(batch))
            batch_loss.total.backward()
            clip_gradients(params, cfg.grad_clip)
            adamw_step(params, state, _group_lrs(params, cfg, epoch),
                       cfg.weight_decay)
            for key in sums:
                sums[key] += getattr(batch_loss, key).item() * len(batch)
            seen += len(batch)
        for key, value in sums.items():
            records.append((epoch, "train", f"loss_{key}", value / seen))
        if log:
            log(f"epoch {epoch}: loss {sums['total'] / seen:.4f}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), model.params)
        E.write_curves(os.path.join(out_dir, "curves.csv"), records)
        save_config(os.path.join(out_dir, "config.json"), cfg)
    return model, records


# ---------------------------------------------------------------------------
# fine-tuning


def detection_loss_for_sample(model, sample):
    cfg = model.config
    gt_boxes = np.array([box for _, box in sample.objects], dtype=np.float64)
    gt_classes = [cls for cls, _ in sample.objects]
    outs = model.forward_detect(sample.image)
    preds = outs if cfg.aux_losses else outs[-1:]
    pieces = []
    for pred in preds:
        if len(gt_boxes):
            cost = build_cost(pred.class_logits.data, pred.boxes.data,
                              gt_boxes, gt_classes)
            assignment = hungarian(cost)
        else:
            assignment = hungarian(np.zeros((0, cfg.num_queries)))
        pieces.append(L.detection_loss(pred, gt_boxes, gt_classes, assignment,
                                       no_object_class=cfg.k_classes))
    return L.stack_breakdowns(pieces)


def finetune(cfg, train_samples, val_samples, out_dir=None, log=None):
    """Detection fine-tuning; all parameters train, two learning-rate groups.

    Starts from cfg.init_checkpoint when set (detection class head freshly
    initialized), otherwise from scratch. Returns (model, records).
    """
    model = Model(cfg.model_config(freeze_backbone=False), seed=cfg.seed)
    if cfg.init_checkpoint:
        load_into_model(model, load_checkpoint(cfg.init_checkpoint))
        head_rng = np.random.default_rng(sample_seed(cfg.seed, 0xC1A55))
        bound = 1.0 / np.sqrt(cfg.d_model)
        model.params["head.cls_detect.w"].data = head_rng.uniform(
            -bound, bound, (cfg.d_model, cfg.k_classes + 1))
        model.params["head.cls_detect.b"].data = np.zeros(cfg.k_classes + 1)
    else:
        # the scratch baseline still starts from a warmed-up backbone
        warmup_backbone(model, cfg, log=log)
    params = model.trainable_parameters()
    state = init_optimizer(params)
    records = []
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(
            sample_seed(cfg.seed, epoch)).permutation(len(train_samples))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            for p in params.values():
                p.grad = None
            per_sample = [detection_loss_for_sample(model, train_samples[di])
                          for di in batch]
            batch_loss = L.scale_breakdown(
                L.stack_breakdowns(per_sample), 1.0 / len(batch))
            batch_loss.total.backward()
            clip_gradients(params, cfg.grad_clip)
            adamw_step(params, state, _group_lrs(params, cfg, epoch),
                       cfg.weight_decay)
            total += batch_loss.total.item() * len(batch)
        records.append((epoch, "train", "loss_total", total / len(order)))
        report = E.evaluate_detector(model, val_samples)
        records.append((epoch, "val", "ap", report.ap))
        records.append((epoch, "val", "ap50", report.ap50))
        records.append((epoch, "val", "ap75", report.ap75))
        if log:
            log(f"epoch {epoch}: loss {total / len(order):.4f} "
                f"ap50 {report.ap50:.3f}")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(os.path.join(out_dir, "checkpoint.ckpt"), model.params)
        E.write_curves(os.path.join(out_dir, "curves.csv"), records)
        save_config(os.path.join(out_dir, "config.json"), cfg)
    return model, records


# ---------------------------------------------------------------------------
# ablations


ABLATION_CASES = (
    ("case_a", False, False),
    ("case_b", True, False),
    ("case_c", False, True),
    ("case_d", True, True),
)

APPENDIX_PAIRS = (
    ("mask_on", "mask_off", "mask_ablation"),
    ("shuffle_off", "shuffle_on", "shuffle_ablation"),
    ("multi_query", "single_query", "group_count_ablation"),
)


def _with(cfg, **changes):
    values = asdict(cfg)
    values.update(changes)
    return TrainConfig(**values)


def ablation_matrix(cfg, images, train_samples, val_samples, out_dir, log=None):
    """Pretrain the 2x2 {frozen, reconstruction} grid, fine-tune each, and
    compare against scratch; also emit the mask / shuffle / group-count
    pretraining comparisons.

    Returns the rows of the final table: (name, frozen, reconstruction, ap50,
    ap). Paper-scale reference points for this grid put the frozen rows ahead
    of both unfrozen rows and the scratch baseline; at desk scale the numbers
    are reported, not asserted.
    """
    os.makedirs(out_dir, exist_ok=True)
    runs = {}
    table = []
    for name, frozen, rec in ABLATION_CASES:
        pre_cfg = _with(cfg, mode="pretrain", freeze_backbone=frozen,
                        use_reconstruction=rec)
        pre_dir = os.path.join(out_dir, f"pretrain_{name}")
        _, pre_records = pretrain(pre_cfg, images, out_dir=pre_dir, log=log)
        runs[f"pretrain_{name}"] = pre_records
        ft_cfg = _with(cfg, mode="finetune",
                       init_checkpoint=os.path.join(pre_dir, "checkpoint.ckpt"))
        _, ft_records = finetune(ft_cfg, train_samples, val_samples,
                                 out_dir=os.path.join(out_dir, f"finetune_{name}"),
                                 log=log)
        runs[f"finetune_{name}"] = ft_records
        final = {m: v for e, s, m, v in ft_records if s == "val"
                 and e == max(r[0] for r in ft_records)}
        table.append((name, frozen, rec, final.get("ap50", 0.0),
                      final.get("ap", 0.0)))
    scratch_cfg = _with(cfg, mode="finetune", init_checkpoint=None)
    _, scratch_records = finetune(scratch_cfg, train_samples, val_samples,
                                  out_dir=os.path.join(out_dir, "finetune_scratch"),
                                  log=log)
    runs["finetune_scratch"] = scratch_records
    final = {m: v for e, s, m, v in scratch_records if s == "val"
             and e == max(r[0] for r in scratch_records)}
    table.append(("scratch", None, None, final.get("ap50", 0.0),
                  final.get("ap", 0.0)))

    # appendix comparisons: pretraining loss curves under flag flips
    base_pre = _with(cfg, mode="pretrain")
    flips = {
        "mask_on": {},
        "mask_off": {"use_attention_mask": False},
        "shuffle_off": {},
        "shuffle_on": {"use_query_shuffle": True},
        "multi_query": {},
        "single_query": {"num_patches": 1},
    }
    for name, changes in flips.items():
        if name in ("mask_on", "shuffle_off", "multi_query"):
            runs.setdefault(name, runs["pretrain_case_d"])
            continue
        _, recs = pretrain(_with(base_pre, **changes), images,
                           out_dir=os.path.join(out_dir, f"pretrain_{name}"),
                           log=log)
        runs[name] = recs

    E.emit_curves(runs, os.path.join(out_dir, "curves"), pairs=APPENDIX_PAIRS)
    with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
        f.write("case,frozen_backbone,reconstruction,ap50,ap\n")
        for name, frozen, rec, ap50, ap in table:
            fr = "" if frozen is None else str(bool(frozen)).lower()
            rc = "" if rec is None else str(bool(rec)).lower()
            f.write(f"{name},{fr},{rc},{ap50:.6f},{ap:.6f}\n")
    return table
