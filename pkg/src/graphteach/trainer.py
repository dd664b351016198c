"""Optimization loop and experiment driver.

Training runs full-batch over the episode's support images: per image the
zero-shot, cache and teacher logits are combined into the mixture loss, one
backward pass flows gradients into the adapter and the teacher, and AdamW
with cosine-annealed learning rate updates both. The teacher is dropped at
export; evaluation touches only the CacheModel.
"""

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .bank import grid_mode_view_indices, validation_ids
from .errors import ConfigError, ContractError, DivergenceError, SamplingError
from .losses import LossWeights, cross_entropy, focal_loss, train_logits
from .numcore import Param, constant, tape, zero_grads
from .numcore.tape import backward
from .student import (
    DEFAULT_BETA,
    CacheModel,
    build_cache,
    test_logits_batch,
)
from .teacher import (encode_unimodal, init_teacher,
                      modality_gap_direction, teacher_forward)

ALPHA_GRID = (1.0, 1.6, 2.5, 4.0, 6.3, 10.0)  # search range [1, 10]
BETA_GRID = (1.0, 3.0, 5.5, 8.0, 11.0)


def cosine_lr(t, total, lr0):
    """Cosine annealing from lr0 at t=0 to 0 at t=total."""
    if not 0 <= t <= total:
        raise ContractError(f"step {t} outside [0, {total}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total))


def adamw_step(values, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=0.01):
    """One decoupled-weight-decay Adam update with bias correction.

    values/grads are lists of arrays; state holds m, v, t and is threaded
    through calls. Returns (new_values, new_state).
    """
    if state is None:
        state = {"t": 0, "m": [np.zeros_like(v) for v in values],
                 "v": [np.zeros_like(v) for v in values]}
    t = state["t"] + 1
    new_vals, new_m, new_v = [], [], []
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for x, g, m, v in zip(values, grads, state["m"], state["v"]):
        if g.shape != x.shape:
            raise ConfigError("gradient shape mismatch")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_vals.append(x - step - lr * weight_decay * x)
        new_m.append(m)
        new_v.append(v)
    return new_vals, {"t": t, "m": new_m, "v": new_v}


class AdamW:
    """In-place AdamW over tape Params."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8,
                 weight_decay=0.01):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state = None

    def step(self, lr):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value)
                 for p in self.params]
        new_vals, self.state = adamw_step(
            [p.value for p in self.params], grads, self.state, lr,
            self.beta1, self.beta2, self.eps, self.weight_decay)
        for p, v in zip(self.params, new_vals):
            p.value = v


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; covers every ablation arm by toggles alone."""

    lr: float = 1e-3
    epochs: int = 100
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossWeights = field(default_factory=LossWeights)
    cache_beta: float = DEFAULT_BETA
    keep_frac: float = 0.5
    hidden: int = 0          # teacher width d_h; 0 means "use the bank dim"
    enc_layers: int = 3
    enc_heads: int = 16
    mgt_layers: int = 3
    mgt_heads: int = 16
    seed: int = 0
    jitter: float = 0.0
    use_mgt: bool = True
    use_text_edges: bool = True
    use_filter: bool = True
    grid_mode: str = "multiscale"
    select_on_validation: bool = True
    select_teacher_on_validation: bool = False
    diagnostics: bool = True

    @classmethod
    def desk(cls, **overrides):
        """Small-architecture profile for laptop-scale experiments.

        The logit temperature is matched to synthetic-bank cosine gaps
        (roughly ten times wider than real joint-embedding gaps, so a tenth
        of the usual temperature gives the same softmax sharpness), and the
        teacher-vs-reduction choice joins the validation grid search per the
        tuning protocol.
        """
        base = dict(hidden=32, enc_layers=1, enc_heads=2, mgt_layers=1,
                    mgt_heads=2, epochs=60, lr=1e-3,
                    loss=LossWeights(tau=10.0, alpha=3.0),
                    select_teacher_on_validation=True)
        base.update(overrides)
        return cls(**base)

    def student_only(self):
        return self.loss.delta == 0.0 and self.loss.lam == 0.0

    def validate(self):
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("lr must be positive and epochs >= 1")
        if self.cache_beta <= 0:
            raise ConfigError("cache beta must be positive")
        if not 0.0 < self.keep_frac <= 1.0:
            raise ConfigError("keep_frac must be in (0, 1]")
        self.loss.validate()

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "loss" in data and isinstance(data["loss"], dict):
            data["loss"] = LossWeights(**data["loss"])
        return cls(**data)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    ce: float
    focal: float
    lr: float


@dataclass
class Metrics:
    epochs: list
    query_accuracy: float
    teacher_accuracy: float
    filter_precision: float
    mode: str
    seed: int
    config: dict
    alpha: float
    beta: float
    variant: str = "graph"
    query_logits: np.ndarray = field(repr=False, default=None)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "ce", "focal", "lr"])
            for r in self.epochs:
                writer.writerow([r.epoch, repr(r.loss), repr(r.ce),
                                 repr(r.focal), repr(r.lr)])

    def summary(self):
        return {
            "mode": self.mode,
            "seed": self.seed,
            "query_accuracy": self.query_accuracy,
            "teacher_accuracy": self.teacher_accuracy,
            "filter_precision": self.filter_precision,
            "alpha": self.alpha,
            "beta": self.beta,
            "variant": self.variant,
            "final_loss": self.epochs[-1].loss if self.epochs else None,
            "config": self.config,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _view_indices(bank, config):
    if config.grid_mode == "multiscale":
        return None
    if bank.patches_per_image != 18:
        raise ConfigError("grid modes other than multiscale need 18-view banks")
    return grid_mode_view_indices(config.grid_mode)


def _mean_node(nodes):
    total = nodes[0]
    for n in nodes[1:]:
        total = tape.add(total, n)
    return tape.scale(total, 1.0 / len(nodes))


def train(bank, episode, config):
    """Run the co-training loop; returns (CacheModel, TeacherParams, Metrics).

    Deterministic given (bank, episode, config). With delta = lam = 0 the
    teacher is never built and the loop reduces to adapter-only training.
    """
    config.validate()
    w = config.loss
    student_only = config.student_only()
    dim = bank.dim
    hidden = config.hidden or dim
    view_idx = _view_indices(bank, config)
    keep = config.keep_frac if config.use_filter else 1.0

    keys, values = build_cache(bank, episode)
    adapter = Param(np.eye(dim), name="adapter")
    teacher = None
    if not student_only:
        gap = modality_gap_direction(
            bank.prompts, bank.features[list(episode.support_ids)])
        teacher = init_teacher(dim=dim, hidden=hidden,
                               enc_layers=config.enc_layers,
                               enc_heads=config.enc_heads,
                               mgt_layers=config.mgt_layers if config.use_mgt else 0,
                               mgt_heads=config.mgt_heads,
                               keep_frac=keep, seed=config.seed,
                               filter_direction=gap)
    params = [adapter] + (list(teacher.parameters()) if teacher else [])
    opt = AdamW(params, config.beta1, config.beta2, config.eps,
                config.weight_decay)

    sup_ids = list(episode.support_ids)
    sup_feats = bank.features[sup_ids]
    sup_labels = bank.labels[sup_ids]
    prompts = bank.prompts
    keys_t = constant(keys.T)
    values_c = constant(values)
    ones_n = constant(np.ones((1, keys.shape[0])))
    records = []

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config.epochs, config.lr)
        zero_grads(params)

        feats = sup_feats
        if config.jitter > 0.0:
            rng = np.random.default_rng((config.seed, epoch))
            feats = sup_feats + config.jitter * rng.normal(size=sup_feats.shape)
            feats = feats / np.linalg.norm(feats, axis=2, keepdims=True)
        zs_all = w.tau * (feats[:, 0, :] @ prompts.T)

        text_node = None
        if teacher is not None:
            text_node = encode_unimodal(constant(prompts), teacher.text_encoder)

        ce_nodes, focal_nodes, loss_nodes = [], [], []
        adapter_t = tape.transpose(adapter)
        for i, y in enumerate(sup_labels):
            z = constant(feats[i, 0:1, :])
            az = tape.l2_normalize_rows(tape.matmul(z, adapter_t))
            sims = tape.matmul(az, keys_t)
            affinity = tape.exp(tape.scale(tape.sub(sims, ones_n), config.cache_beta))
            l_cache = tape.matmul(affinity, values_c)
            l_zs = constant(zs_all[i:i + 1])

            l_graph = None
            if teacher is not None:
                out = teacher_forward(
                    constant(feats[i]), prompts, teacher,
                    use_mgt=config.use_mgt,
                    use_text_edges=config.use_text_edges,
                    view_indices=view_idx,
                    text_override=text_node)
                l_graph = out.logits

            ce_i = cross_entropy(train_logits(l_zs, l_cache, l_graph, w), int(y))
            ce_nodes.append(ce_i)
            loss_i = ce_i
            if w.lam != 0.0 and l_graph is not None:
                f_i = focal_loss(l_graph, int(y), w.gamma_focal, w.tau)
                focal_nodes.append(f_i)
                loss_i = tape.add(ce_i, tape.scale(f_i, w.lam))
            loss_nodes.append(loss_i)

        total = _mean_node(loss_nodes)
        if not np.isfinite(total.value[0, 0]):
            raise DivergenceError(epoch)
        ce_mean = float(np.mean([n.value[0, 0] for n in ce_nodes]))
        focal_mean = (float(np.mean([n.value[0, 0] for n in focal_nodes]))
                      if focal_nodes else 0.0)
        records.append(EpochRecord(epoch=epoch, loss=float(total.value[0, 0]),
                                   ce=ce_mean, focal=focal_mean, lr=lr))
        backward(total)
        opt.step(lr)

    alpha, beta = w.alpha, config.cache_beta
    if config.select_on_validation:
        val_ids = validation_ids(bank, episode)
        if val_ids:
            alpha, beta = select_alpha_beta(
                keys, values, adapter.value, bank, val_ids,
                tau=w.tau, alpha0=alpha, beta0=beta)

    model = CacheModel(keys=keys, values=values, adapter=adapter.value.copy(),
                       alpha=alpha, beta=beta, tau=w.tau)

    # the teacher branch weight is itself a searched hyperparameter: when the
    # graph-supervised student does not beat its delta=lam=0 reduction on the
    # held-out validation images, ship the reduction (strictly-better wins)
    variant = "graph" if not student_only else "reduction"
    if teacher is not None and config.select_teacher_on_validation:
        val_ids = validation_ids(bank, episode)
        if val_ids:
            reduction_cfg = replace(
                config, loss=replace(w, delta=0.0, lam=0.0),
                select_teacher_on_validation=False, diagnostics=False)
            red_model, _, _ = train(bank, episode, reduction_cfg)
            if _val_score(red_model, bank, val_ids) > _val_score(model, bank,
                                                                 val_ids):
                model = red_model
                variant = "reduction"

    query_logits = evaluate_logits(model, bank, episode.query_ids)
    query_acc = _accuracy(query_logits, bank.labels[list(episode.query_ids)])

    teacher_acc, filter_prec = float("nan"), float("nan")
    if teacher is not None and config.diagnostics:
        teacher_acc, filter_prec = teacher_diagnostics(
            teacher, bank, episode.query_ids, config)

    metrics = Metrics(
        epochs=records,
        query_accuracy=query_acc,
        teacher_accuracy=teacher_acc,
        filter_precision=filter_prec,
        mode="tip-adapter-f-equivalent" if student_only else "graph-teacher",
        seed=config.seed,
        config=config.to_dict(),
        alpha=model.alpha,
        beta=model.beta,
        variant=variant,
        query_logits=query_logits,
    )
    return model, teacher, metrics


def _val_score(model, bank, ids):
    """(accuracy, mean true-class probability) on held-out images; the
    probability term breaks accuracy ties on small validation sets."""
    logits = evaluate_logits(model, bank, ids)
    labels = bank.labels[list(ids)]
    acc = float((logits.argmax(axis=1) == labels).mean())
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    return acc, float(probs[np.arange(len(labels)), labels].mean())


def _accuracy(logits, labels):
    return float((logits.argmax(axis=1) == labels).mean())


def evaluate_logits(model, bank, query_ids):
    if len(query_ids) == 0:
        raise SamplingError("empty query set")
    queries = bank.global_features()[list(query_ids)]
    return test_logits_batch(queries, model, bank.prompts)


def evaluate(model, bank, episode):
    """Accuracy of argmax test logits over the episode's query images. Takes
    only the standalone student; no teacher state exists here."""
    logits = evaluate_logits(model, bank, episode.query_ids)
    return _accuracy(logits, bank.labels[list(episode.query_ids)])


def select_alpha_beta(keys, values, adapter, bank, val_ids, tau, alpha0, beta0):
    """Grid-search the cache mixing weight and sharpness on held-out
    validation images; the incumbent wins ties."""
    feats = bank.global_features()[list(val_ids)]
    labels = bank.labels[list(val_ids)]
    zs = tau * (feats @ bank.prompts.T)
    adapted = feats @ adapter.T
    adapted /= np.linalg.norm(adapted, axis=1, keepdims=True)
    sims = adapted @ keys.T

    idx = np.arange(len(labels))

    def score(alpha, beta):
        logits = zs + alpha * (np.exp(beta * (sims - 1.0)) @ values)
        acc = float((logits.argmax(axis=1) == labels).mean())
        shifted = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(shifted)
        probs /= probs.sum(axis=1, keepdims=True)
        # mean true-class probability breaks accuracy ties on small sets
        return acc, float(probs[idx, labels].mean())

    best = (alpha0, beta0)
    best_score = score(*best)
    for beta in BETA_GRID:
        for alpha in ALPHA_GRID:
            s = score(alpha, beta)
            if s > best_score:
                best, best_score = (alpha, beta), s
    return best


def teacher_diagnostics(teacher, bank, query_ids, config):
    """Teacher-branch accuracy and planted-foreground filter precision over
    the query images (diagnostic only; never part of inference)."""
    view_idx = _view_indices(bank, config)
    prompts = bank.prompts
    hits, total = 0, 0
    precisions = []
    for qid in query_ids:
        out = teacher_forward(constant(bank.features[qid]), prompts, teacher,
                              use_mgt=config.use_mgt,
                              use_text_edges=config.use_text_edges,
                              view_indices=view_idx)
        pred = int(out.logits.value.argmax())
        hits += int(pred == bank.labels[qid])
        total += 1
        fg = bank.foregrounds[qid]
        if fg:
            kept = out.kept if view_idx is None else [view_idx[i] for i in out.kept]
            overlap = len(set(kept) & set(fg))
            precisions.append(overlap / len(kept))
    precision = float(np.mean(precisions)) if precisions else float("nan")
    return hits / total, precision


ABLATION_ARMS = {
    "default": {},
    "student_only": {"loss": {"delta": 0.0, "lam": 0.0}},
    "no_mgt": {"use_mgt": False},
    "no_text": {"use_text_edges": False},
    "no_transformer": {"enc_layers": 0},
    "no_filter": {"use_filter": False},
    "pool_25": {"keep_frac": 0.25},
    "pool_50": {"keep_frac": 0.50},
    "pool_75": {"keep_frac": 0.75},
    "pool_all": {"keep_frac": 1.0},
    "loss_ce": {"loss": {"lam": 0.0}},
    "loss_ce_graph": {"loss": {"lam": 1.0, "gamma_focal": 0.0}},
    "loss_focal_graph": {},
    "grid_2x2": {"grid_mode": "grid2x2"},
    "grid_3x3": {"grid_mode": "grid3x3"},
    "grid_multiscale": {"grid_mode": "multiscale"},
}


def arm_config(base, arm):
    if arm not in ABLATION_ARMS:
        raise ConfigError(
            f"unknown ablation arm {arm!r}; valid arms: {sorted(ABLATION_ARMS)}")
    changes = dict(ABLATION_ARMS[arm])
    loss_changes = changes.pop("loss", None)
    cfg = replace(base, **changes) if changes else base
    if loss_changes:
        cfg = replace(cfg, loss=replace(cfg.loss, **loss_changes))
    return cfg


@dataclass
class AblationCell:
    arm: str
    shots: int
    seed: int
    accuracy: float


def _run_cell(args):
    bank, episode_seed, shots, arm, seed, base = args
    from .bank import sample_episode

    cfg = replace(arm_config(base, arm), seed=seed, diagnostics=False)
    episode = sample_episode(bank, shots, seed=episode_seed)
    _, _, metrics = train(bank, episode, cfg)
    return AblationCell(arm=arm, shots=shots, seed=seed,
                        accuracy=metrics.query_accuracy)


def run_ablation(bank, shots_list, arms, seeds, base=None, jobs=1):
    """Train and evaluate every (arm, shots, seed) cell; returns the per-run
    cells plus seed-mean accuracies keyed (arm, shots)."""
    base = base or TrainConfig.desk()
    tasks = [(bank, seed, shots, arm, seed, base)
             for arm in arms for shots in shots_list for seed in seeds]
    for arm in arms:
        arm_config(base, arm)  # validate names before any work
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            cells = list(pool.map(_run_cell, tasks))
    else:
        cells = [_run_cell(t) for t in tasks]
    table = {}
    for arm in arms:
        for shots in shots_list:
            accs = [c.accuracy for c in cells if c.arm == arm and c.shots == shots]
            table[(arm, shots)] = float(np.mean(accs))
    return cells, table
