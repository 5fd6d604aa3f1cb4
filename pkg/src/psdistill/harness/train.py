"""Training loop for detector, joint OIM, and distilled students."""
from __future__ import annotations

import csv
import io
import logging
import zlib
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch

from .. import numerics as nx
from ..evaluation import MetricsReport, evaluate_model
from ..kd import (AdaptationLayer, bounded_reg_loss, combined_cls_loss, combined_reg_loss,
                  hint_loss, kd_reid_attach, soft_cls_loss, teacher_outputs, total_objective)
from ..oim import LookupTable, OimConfig, UnlabeledQueue, init_lut, oim_forward, oim_update
from ..psmodel import (BackboneSpec, PersonSearchModel, assign_targets, detector_gt_losses,
                       restrict_to_sampled)
from ..synthscene import DatasetSplit, generate_dataset, read_dataset
from .checkpoint import Checkpoint, load_checkpoint, model_params, params_checksum
from .config import ExperimentConfig

logger = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "lr", "total", "rpn_cls", "rpn_reg", "rcn_cls", "rcn_reg", "hint", "oim")


class TrainingDiverged(RuntimeError):
    pass


class InvariantViolation(AssertionError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: MetricsReport
    losses: list[dict] = field(default_factory=list)
    lut_checksum_start: str = ""
    lut_checksum_end: str = ""
    labeled_seen: int = 0

    def losses_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, LOSS_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in self.losses:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.checkpoint.save(out / "checkpoint.psck")
        (out / "lut.olut").write_bytes(self.checkpoint.lut.to_bytes())
        (out / "metrics.csv").write_text(self.metrics.to_csv())
        (out / "per_query.csv").write_text(self.metrics.per_query_csv())
        (out / "losses.csv").write_text(self.losses_csv())


def substream(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@lru_cache(maxsize=4)
def _cached_dataset(data_seed: int, cfg_key: tuple) -> DatasetSplit:
    from ..synthscene import SceneConfig
    return generate_dataset(data_seed, SceneConfig(**dict(cfg_key)))


def load_split(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.dataset_path:
        return read_dataset(cfg.dataset_path)
    key = tuple(sorted((k, v) for k, v in cfg.data.__dict__.items()))
    return _cached_dataset(cfg.data_seed, key)


def _batch(split: DatasetSplit, idx, flips):
    images, gts, labels = [], [], []
    size = split.config.image_size
    for i, flip in zip(idx, flips):
        scene = split.train[i]
        img, boxes = scene.image, scene.boxes()
        if flip:
            img = img[:, ::-1]
            boxes = np.stack([size - boxes[:, 2], boxes[:, 1], size - boxes[:, 0], boxes[:, 3]], axis=1)
        images.append(img)
        gts.append(boxes)
        labels.append(np.array([p.id_label for p in scene.persons], dtype=np.int64))
    return np.stack(images), gts, labels


def _resolve_teacher(teacher) -> PersonSearchModel | None:
    if teacher is None or isinstance(teacher, PersonSearchModel):
        return teacher
    if isinstance(teacher, Checkpoint):
        return teacher.build_model()
    return load_checkpoint(teacher).build_model()


def _resolve_lut(lut) -> LookupTable | str | None:
    if lut is None or isinstance(lut, LookupTable):
        return lut
    if isinstance(lut, Checkpoint):
        return lut.lut
    return str(lut)


def train(cfg: ExperimentConfig, teacher=None, teacher_lut=None, split: DatasetSplit | None = None,
          out_dir=None, evaluate: bool = True) -> TrainResult:
    """Train one model from ``cfg``.

    ``teacher`` / ``teacher_lut`` override the config's file paths and may be a
    model, a Checkpoint, or a path.
    """
    teacher = _resolve_teacher(teacher if teacher is not None else cfg.teacher_checkpoint
                               if cfg.kd_mode.uses_det else None)
    lut_src = _resolve_lut(teacher_lut if teacher_lut is not None else cfg.teacher_lut
                           if cfg.kd_mode.uses_reid else None)
    cfg.validate(need_files=False)
    if cfg.kd_mode.uses_det and teacher is None:
        raise ValueError(f"kd_mode={cfg.kd_mode.value} needs a teacher detector")
    if cfg.kd_mode.uses_reid and lut_src is None:
        raise ValueError(f"kd_mode={cfg.kd_mode.value} needs a teacher LUT")
    split = split or load_split(cfg)
    tc = cfg.train

    init_seed = int(substream(cfg.seed, "init").integers(2 ** 31))
    model = PersonSearchModel(BackboneSpec.of(cfg.backbone), cfg.model, seed=init_seed)
    if cfg.kd_mode.uses_reid:
        lut, oim_cfg = kd_reid_attach(cfg.oim, lut_src, lambda_oim=cfg.oim.lambda_oim)
    else:
        lam = 1.0 if cfg.oim.lambda_oim is None else cfg.oim.lambda_oim
        oim_cfg = OimConfig(**{**cfg.oim.__dict__, "lambda_oim": lam})
        lut = init_lut(oim_cfg.embed_dim, oim_cfg.num_labeled, "random", seed=init_seed)
    queue = UnlabeledQueue(oim_cfg.embed_dim, oim_cfg.queue_size)

    params = list(model.parameters())
    adapter = None
    teacher_sum = None
    if cfg.kd_mode.uses_det:
        if teacher.spec.stride != model.spec.stride:
            raise ValueError("teacher and student feature maps must share a stride for the hint loss")
        adapter = AdaptationLayer(model.spec.out_channels, teacher.spec.out_channels, seed=init_seed)
        params += list(adapter.parameters())
        teacher.eval()
        for p in teacher.parameters():
            p.requires_grad_(False)
        teacher_sum = params_checksum(teacher)
    opt = nx.SGD(params, lr=tc.lr, momentum=tc.momentum, weight_decay=tc.weight_decay)

    data_rng = substream(cfg.seed, "data")
    sample_rng = substream(cfg.seed, "sampling")
    lut_start = lut.checksum()
    order: list[int] = []
    losses: list[dict] = []
    labeled_seen = 0
    kd = cfg.kd
    mu_rpn = kd.mu if kd.mu_rpn is None else kd.mu_rpn

    for step in range(tc.steps):
        lr = tc.lr * (tc.lr_decay if step >= int(tc.lr_decay_at * tc.steps) else 1.0)
        if step < tc.warmup_steps:
            lr *= (step + 1) / tc.warmup_steps
        opt.lr = lr
        while len(order) < tc.batch_size:
            order += list(data_rng.permutation(len(split.train)))
        idx, order = order[:tc.batch_size], order[tc.batch_size:]
        flips = data_rng.random(tc.batch_size) < 0.5 if tc.flip else np.zeros(tc.batch_size, bool)
        images, gts, gt_labels = _batch(split, idx, flips)

        x = model.prepare(images)
        feats = model.backbone_forward(x)
        rpn_logits, rpn_deltas = model.rpn_forward(feats)
        proposals = model.propose(rpn_logits, rpn_deltas)
        rpn_t = assign_targets([model.anchors] * len(gts), gts, sample_rng, tc.rpn_batch)
        rois = [np.concatenate([p, g]) for p, g in zip(proposals, gts)]
        rcn_t = assign_targets(rois, gts, sample_rng, tc.rcn_batch)
        rois, rcn_t = restrict_to_sampled(rois, rcn_t)
        rcn_logits, rcn_deltas, hidden = model.rcn_forward(feats, rois)
        rpn_logits = rpn_logits.reshape(-1, 2)
        rpn_deltas = rpn_deltas.reshape(-1, 4)
        det = list(detector_gt_losses(rpn_logits, rpn_deltas, rpn_t, rcn_logits, rcn_deltas, rcn_t))

        hint = None
        if cfg.kd_mode.uses_det:
            t_out = teacher_outputs(teacher, x, rois)
            hint = hint_loss(adapter(feats), t_out.features, kd.hint_reduction)
            det = _distill_heads(det, kd, mu_rpn, rpn_logits, rpn_deltas, rpn_t, rcn_logits, rcn_deltas,
                                 rcn_t, t_out)

        pos = torch.as_tensor(rcn_t.pos_index)
        emb = model.idnet_forward(hidden[pos]) if len(pos) else None
        id_labels = np.array([gt_labels[i][j] for i, j in zip(rcn_t.pos_image, rcn_t.pos_gt)], dtype=np.int64)
        l_oim = None
        if emb is not None and (id_labels >= 0).any() and oim_cfg.lambda_oim > 0:
            l_oim, _ = oim_forward(emb, id_labels, lut, queue, oim_cfg.temperature)

        total = total_objective(det, hint, l_oim, kd.lambda_hint, oim_cfg.lambda_oim)
        if not torch.isfinite(total):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        opt.zero_grad()
        nx.backward(total)
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(params, tc.grad_clip)
        try:
            opt.step()
        except nx.NonFiniteGradient as exc:
            raise TrainingDiverged(f"step {step}: {exc}") from None
        if emb is not None:
            labeled_seen += int((id_labels >= 0).sum())
            oim_update(emb.detach(), id_labels, lut, queue, oim_cfg.lut_momentum, oim_cfg.freeze_queue)

        losses.append({"step": step, "lr": lr, "total": _f(total),
                       "rpn_cls": _f(det[0]), "rpn_reg": _f(det[1]),
                       "rcn_cls": _f(det[2]), "rcn_reg": _f(det[3]),
                       "hint": _f(hint), "oim": _f(l_oim)})

    lut_end = lut.checksum()
    if cfg.kd_mode.uses_reid and lut_end != lut_start:
        raise InvariantViolation("frozen LUT changed during training")
    if teacher_sum is not None and params_checksum(teacher) != teacher_sum:
        raise InvariantViolation("teacher parameters changed during student training")

    ckpt_params = model_params(model)
    if adapter is not None:
        ckpt_params.update(model_params(adapter, "adapter."))
    ckpt = Checkpoint(model.spec, model.cfg, oim_cfg, ckpt_params, lut, queue, tc.steps,
                      {"kd_mode": cfg.kd_mode.value, "seed": cfg.seed, "config_digest": cfg.digest()})
    model.eval()
    metrics = evaluate_model(model, split) if evaluate else None
    result = TrainResult(ckpt, metrics, losses, lut_start, lut_end, labeled_seen)
    if out_dir is not None:
        result.write(out_dir)
    return result


def _f(x) -> float:
    return 0.0 if x is None else float(x.detach())


def _distill_heads(det, kd, mu_rpn, rpn_logits, rpn_deltas, rpn_t, rcn_logits, rcn_deltas, rcn_t, t_out):
    """Swap the four ground-truth detector losses for their teacher-combined versions."""
    def reg_target(targets, like):
        return torch.as_tensor(targets.reg_targets, dtype=like.dtype)

    ri = torch.as_tensor(rpn_t.index)
    rp = torch.as_tensor(rpn_t.pos_index)
    soft_rpn = soft_cls_loss(rpn_logits[ri], t_out.rpn_logits[ri], kd.temperature)
    bound_rpn = bounded_reg_loss(rpn_deltas[rp], t_out.rpn_deltas[rp], reg_target(rpn_t, rpn_deltas), kd.margin)
    ci = torch.as_tensor(rcn_t.index)
    cp = torch.as_tensor(rcn_t.pos_index)
    soft_rcn = soft_cls_loss(rcn_logits[ci], t_out.rcn_logits[ci], kd.temperature)
    bound_rcn = bounded_reg_loss(rcn_deltas[cp], t_out.rcn_deltas[cp], reg_target(rcn_t, rcn_deltas), kd.margin)
    return [combined_cls_loss(det[0], soft_rpn, mu_rpn), combined_reg_loss(det[1], bound_rpn, kd.gamma),
            combined_cls_loss(det[2], soft_rcn, kd.mu), combined_reg_loss(det[3], bound_rcn, kd.gamma)]
