"""End-to-end training orchestration: epoch loop with the combined objective,
per-epoch pseudo-label refresh, EMA teacher updates, evaluation, the alpha
ablation sweep, and embedding export."""

from __future__ import annotations

import csv
import dataclasses
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .augment import AugmentRanges, apply_transform, sample_transform
from .autodiff import Tensor, concat, eval_with_gradients, no_grad
from .data import read_split, read_subject
from .ema import ema_update
from .losses import (RampUpSchedule, combined_objective, consistency_mse,
                     info_nce, rampup_lambda, softmax_probs, supervised_loss)
from .metrics import MetricTable, evaluate_segmentation
from .model import (ArchConfig, ModelParams, decoder_forward, encoder_forward,
                    init_params, load_checkpoint, projector_forward,
                    save_checkpoint, segment, teacher_from_student)
from .optim import AdamState, adam_step
from .sampling import (AacsConfig, DegeneratePseudoLabelsError, RacsConfig,
                       aacs_batch, racs_batch)

MODES = ("supervised-only", "mean-teacher-consistency", "secl-racs", "secl-aacs")


@dataclass
class RunConfig:
    mode: str = "secl-aacs"
    epochs: int = 300
    seed: int = 0
    # optimizer
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # objective
    alpha: float = 0.9
    tau: float = 0.1
    lambda_peak: float = 0.1
    rampup_epochs: int = 0  # 0: ramp over the whole run; else hold peak after
    # batching
    batch_labeled: int = 2
    batch_unlabeled: int = 1
    # sampling
    aacs_cubes: int = 8
    cube_edge: int = 12
    racs_partitions: int = 4
    pseudo_refresh: int = 1
    # architecture
    extents: tuple = (32, 32, 32)
    levels: int = 4
    base_channels: int = 8
    emb_dim: int = 64
    proj_hidden: int = 128
    classes: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode '{self.mode}'; choose from {MODES}")

    def arch(self):
        return ArchConfig(extents=tuple(self.extents), levels=self.levels,
                          base_channels=self.base_channels,
                          emb_dim=self.emb_dim, proj_hidden=self.proj_hidden,
                          classes=self.classes)

    def schedule(self):
        t_max = self.rampup_epochs if self.rampup_epochs > 0 \
            else max(self.epochs - 1, 1)
        return RampUpSchedule(t_max=t_max, peak=self.lambda_peak)

    def save(self, path):
        with open(path, "w") as f:
            for fld in dataclasses.fields(self):
                value = getattr(self, fld.name)
                if isinstance(value, tuple):
                    value = ",".join(str(v) for v in value)
                f.write(f"{fld.name}={value}\n")

    @classmethod
    def load(cls, path, overrides=None):
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        with open(path) as f:
            for line in f:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ValueError(f"bad config line: '{line}'")
                key, value = line.split("=", 1)
                key, value = key.strip(), value.strip()
                if key not in types:
                    raise ValueError(f"unknown config key '{key}'")
                kwargs[key] = _coerce(cls, key, value)
        if overrides:
            kwargs.update(overrides)
        return cls(**kwargs)


def _coerce(cls, key, value):
    default = getattr(cls(), key)
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(","))
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    wall_clock: float = 0.0

    COLUMNS = ("epoch", "sup_loss", "con_loss", "lambda", "val_dice")

    def add(self, epoch, sup_loss, con_loss, lam, val_dice):
        self.records.append({"epoch": epoch, "sup_loss": sup_loss,
                             "con_loss": con_loss, "lambda": lam,
                             "val_dice": val_dice})

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r["epoch"], repr(float(r["sup_loss"])),
                                 repr(float(r["con_loss"])),
                                 repr(float(r["lambda"])),
                                 repr(float(r["val_dice"]))])

    @staticmethod
    def read_csv(path):
        log = TrainLog()
        with open(path, newline="") as f:
            reader = csv.DictReader(f)
            for row in reader:
                log.add(int(row["epoch"]), float(row["sup_loss"]),
                        float(row["con_loss"]), float(row["lambda"]),
                        float(row["val_dice"]))
        return log


def _load_corpus(data_dir, split):
    labeled = [read_subject(data_dir, sid) for sid in split.labeled]
    unlabeled = [read_subject(data_dir, sid, with_label=False)[0]
                 for sid in split.unlabeled]
    return labeled, unlabeled


def _stack_views(views, dtype):
    arr = np.stack([np.asarray(v, dtype=dtype) for v in views])
    return Tensor(arr[..., None])


def _embed_batch(batch, student, teacher, dtype):
    n_student = len(batch.student_idx)
    xs = _stack_views(batch.views[:n_student], dtype)
    xt = _stack_views(batch.views[n_student:], dtype)
    zs = projector_forward(student, encoder_forward(student, xs)[0])
    zt = projector_forward(teacher, encoder_forward(teacher, xt)[0])
    batch.embeddings = concat([zs, zt.detach()], axis=0)
    return batch


def _train_dice(student, labeled):
    # one batched forward over all labeled volumes; argmax is unaffected by
    # the batching, so this matches per-volume segmentation
    x = _stack_views([vol for vol, _ in labeled], np.float32)
    with no_grad():
        logits = decoder_forward(student, *encoder_forward(student, x))
    preds = logits.data.argmax(axis=-1).astype(np.uint8)
    table = MetricTable()
    for idx, (_, lab) in enumerate(labeled):
        evaluate_segmentation(preds[idx], lab, f"train{idx}",
                              student.arch.classes, table, with_hd=False)
    return table.aggregate()["dice"]


def train(cfg, split, data_dir, progress=None):
    """Run one training job; returns (student, teacher, TrainLog).

    Single-threaded and fully deterministic given (cfg, data_dir).
    """
    t0 = time.time()
    labeled, unlabeled = _load_corpus(data_dir, split)
    if not labeled:
        raise ValueError("labeled split is empty")
    dtype = np.float32
    arch = cfg.arch()
    student = init_params(arch, cfg.seed, dtype=dtype)
    teacher = teacher_from_student(student)
    adam = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     eps=cfg.adam_eps)
    schedule = cfg.schedule()
    ranges = AugmentRanges()
    param_names = list(student.params)
    leaves = [student.params[n] for n in param_names]
    log = TrainLog()

    needs_contrastive = cfg.mode in ("secl-racs", "secl-aacs")
    pseudo = [None] * len(unlabeled)
    steps = max(1, -(-len(labeled) // cfg.batch_labeled))
    best_dice = -1.0
    best_student = {n: p.data.copy() for n, p in student.params.items()}
    best_teacher = {n: p.data.copy() for n, p in teacher.params.items()}

    for epoch in range(cfg.epochs):
        lam = rampup_lambda(min(epoch, schedule.t_max), schedule)
        unsup_active = cfg.mode != "supervised-only" and lam > 0.0 and unlabeled

        if cfg.mode == "secl-aacs" and unsup_active and \
                epoch % cfg.pseudo_refresh == 0:
            # refresh lazily: the per-step volume picks are deterministic, so
            # only volumes drawn before the next refresh need new labels
            needed = set()
            for e in range(epoch, min(epoch + cfg.pseudo_refresh, cfg.epochs)):
                for step in range(steps):
                    pick = np.random.default_rng([cfg.seed, e, step, 2]).choice(
                        len(unlabeled), size=min(cfg.batch_unlabeled,
                                                 len(unlabeled)), replace=False)
                    needed.update(int(i) for i in pick)
            for i in sorted(needed):
                pseudo[i] = segment(student, unlabeled[i])

        order_rng = np.random.default_rng([cfg.seed, epoch, 0])
        order = order_rng.permutation(len(labeled))
        sup_losses, con_losses = [], []
        for step in range(steps):
            ids = order[step * cfg.batch_labeled:(step + 1) * cfg.batch_labeled]
            if len(ids) == 0:
                ids = order[:cfg.batch_labeled]
            x = _stack_views([labeled[i][0] for i in ids], dtype)
            labels = np.stack([labeled[i][1] for i in ids])
            bottleneck, skips = encoder_forward(student, x)
            logits = decoder_forward(student, bottleneck, skips)
            l_sup = supervised_loss(logits, labels)

            l_con = None
            if unsup_active:
                unsup_seed = np.random.default_rng(
                    [cfg.seed, epoch, step, 1]).integers(0, 2 ** 63)
                if cfg.mode == "secl-aacs":
                    pick = np.random.default_rng(
                        [cfg.seed, epoch, step, 2]).choice(
                        len(unlabeled), size=min(cfg.batch_unlabeled,
                                                 len(unlabeled)), replace=False)
                    try:
                        batch = aacs_batch([unlabeled[i] for i in pick],
                                           [pseudo[i] for i in pick],
                                           AacsConfig(cubes=cfg.aacs_cubes,
                                                      cube_edge=cfg.cube_edge,
                                                      classes=cfg.classes),
                                           unsup_seed, ranges, cfg.tau)
                    except DegeneratePseudoLabelsError:
                        # the student cannot locate any anatomy yet; skip the
                        # contrastive term this step rather than abort the run
                        batch = None
                    if batch is not None:
                        l_con = info_nce(_embed_batch(batch, student, teacher,
                                                      dtype))
                elif cfg.mode == "secl-racs":
                    pick = np.random.default_rng(
                        [cfg.seed, epoch, step, 2]).choice(
                        len(unlabeled), size=2, replace=False)
                    batch = racs_batch([unlabeled[i] for i in pick],
                                       RacsConfig(partitions=cfg.racs_partitions),
                                       unsup_seed, ranges, cfg.tau)
                    l_con = info_nce(_embed_batch(batch, student, teacher, dtype))
                else:  # mean-teacher-consistency
                    vi = int(np.random.default_rng(
                        [cfg.seed, epoch, step, 2]).integers(0, len(unlabeled)))
                    rng = np.random.default_rng(unsup_seed)
                    v1, _ = apply_transform(unlabeled[vi], None,
                                            sample_transform(
                                                rng.integers(0, 2 ** 63), ranges))
                    v2, _ = apply_transform(unlabeled[vi], None,
                                            sample_transform(
                                                rng.integers(0, 2 ** 63), ranges))
                    sp = softmax_probs(decoder_forward(
                        student, *encoder_forward(student, _stack_views([v1], dtype))))
                    # the teacher has no decoder: pair its encoder with a
                    # frozen copy of the student decoder for prediction
                    proxy = ModelParams(arch, dict(teacher.params), has_decoder=True)
                    for name, p in student.params.items():
                        if name.startswith(("dec", "out")):
                            proxy.params[name] = p.detach()
                    tp = softmax_probs(decoder_forward(
                        proxy, *encoder_forward(proxy, _stack_views([v2], dtype))))
                    l_con = consistency_mse(sp, tp.detach())

            loss = combined_objective([l_sup], [l_con] if l_con is not None else [],
                                      lam)
            _, grads = eval_with_gradients(loss, leaves)
            adam_step(student.params, dict(zip(param_names, grads)), adam)
            ema_update(teacher, student, cfg.alpha)
            sup_losses.append(l_sup.item())
            con_losses.append(l_con.item() if l_con is not None else 0.0)

        val_dice = _train_dice(student, labeled)
        log.add(epoch, float(np.mean(sup_losses)), float(np.mean(con_losses)),
                lam, val_dice)
        if val_dice > best_dice:
            best_dice = val_dice
            best_student = {n: p.data.copy() for n, p in student.params.items()}
            best_teacher = {n: p.data.copy() for n, p in teacher.params.items()}
        if progress:
            progress(epoch, log.records[-1])

    # return the best-validation-Dice epoch, not the last one: the ramp-up
    # weight peaks at the end of the run, so the final weights can sit
    # mid-perturbation rather than at the best joint-objective state
    for n, arr in best_student.items():
        student.params[n].data = arr
    for n, arr in best_teacher.items():
        teacher.params[n].data = arr
    log.wall_clock = time.time() - t0
    return student, teacher, log


def evaluate(student, subject_ids, data_dir):
    """Segment each subject with the student network and tabulate metrics."""
    table = MetricTable()
    for sid in subject_ids:
        vol, lab = read_subject(data_dir, sid)
        if tuple(vol.shape) != tuple(student.arch.extents):
            raise ValueError(f"subject {sid} extents {vol.shape} do not match "
                             f"architecture {student.arch.extents}")
        evaluate_segmentation(segment(student, vol), lab, sid,
                              student.arch.classes, table)
    return table


def evaluate_checkpoint(checkpoint_path, split, data_dir):
    student, _ = load_checkpoint(checkpoint_path)
    return evaluate(student, split.test, data_dir)


def ablation_run(base_cfg, alphas, split, data_dir, progress=None):
    """Full train + evaluate per alpha, all other settings and seeds shared."""
    rows = []
    for alpha in alphas:
        cfg = dataclasses.replace(base_cfg, alpha=float(alpha))
        student, teacher, log = train(cfg, split, data_dir, progress=progress)
        agg = evaluate(student, split.test, data_dir).aggregate()
        rows.append({"alpha": float(alpha), "dice": agg["dice"],
                     "jaccard": agg["jaccard"], "hd": agg["hd"],
                     "final_val_dice": log.records[-1]["val_dice"]})
    return rows


def write_ablation_csv(path, rows):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["alpha", "dice", "jaccard", "hd", "final_val_dice"])
        for r in rows:
            writer.writerow([r["alpha"], repr(float(r["dice"])),
                             repr(float(r["jaccard"])),
                             "" if r["hd"] is None else repr(float(r["hd"])),
                             repr(float(r["final_val_dice"]))])


def export_embeddings(student, data_dir, subject_ids, k, seed, cube_edge=12):
    """Embed class-centered cubes; returns (class ids, embeddings, silhouette).

    Cubes are cropped around jittered ground-truth class centers, cycling
    through foreground classes and subjects so classes stay balanced.
    """
    from sklearn.metrics import silhouette_score

    from .sampling import _clamp_center, _crop, anatomical_centers

    rng = np.random.default_rng(seed)
    subjects = [read_subject(data_dir, sid) for sid in subject_ids]
    centers = [anatomical_centers(lab, student.arch.classes)
               for _, lab in subjects]
    classes = [c for c in range(1, student.arch.classes)]
    cubes, cube_classes = [], []
    tries = 0
    while len(cubes) < k and tries < 100 * k:
        tries += 1
        cls = classes[len(cubes) % len(classes)]
        si = int(rng.integers(0, len(subjects)))
        if cls not in centers[si]:
            continue
        jitter = rng.integers(-2, 3, size=3)
        center = tuple(int(c + j) for c, j in zip(centers[si][cls], jitter))
        center = _clamp_center(center, cube_edge, subjects[si][0].shape)
        cubes.append(_crop(subjects[si][0], center, cube_edge))
        cube_classes.append(cls)
    if len(cubes) < k:
        raise RuntimeError("could not collect enough class-centered cubes")
    x = _stack_views(cubes, np.float32)
    with no_grad():
        z = projector_forward(student, encoder_forward(student, x)[0]).data
    score = float(silhouette_score(z, np.asarray(cube_classes)))
    return np.asarray(cube_classes), z, score


def write_embeddings_csv(path, cube_classes, embeddings, silhouette):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["class"] + [f"e{i}" for i in range(embeddings.shape[1])])
        for cls, vec in zip(cube_classes, embeddings):
            writer.writerow([int(cls)] + [repr(float(v)) for v in vec])
        f.write(f"# silhouette={silhouette!r}\n")


def load_split_for(data_dir, split_path=None):
    path = split_path or os.path.join(data_dir, "split.txt")
    return read_split(path)
