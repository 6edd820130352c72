"""Training: baseline predictor, losses, optimizer and the two modes.

The predictor M factorizes the scene graph into independent per-node
and per-edge softmax classifiers.  Cross-entropy mode trains M alone.
Energy mode additionally scores the joint configuration: the predicted
state initializes a Langevin refinement toward low energy, and the loss
pushes the ground-truth configuration below the refined one,

    L = lambda_e * (E_plus - E_min)
      + lambda_r * (E_plus^2 + E_min^2)
      + lambda_t * L_task,

with gradients flowing through the whole refinement chain back to both
the energy parameters and M.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import metrics as em
from .energy import EnergyModelParams, energy_forward, init_energy_model
from .graphs import (ImageGraph, LabelSpace, SceneGraphState, SceneRecord,
                     decode, one_hot)
from .langevin import SGLDConfig, sgld_run
from .message_passing import _kernel, structure
from .params import named_tensors, tree_load_json, tree_to_json

CHECKPOINT_FORMAT_VERSION = 1


class DivergenceError(RuntimeError):
    """Training hit a non-finite loss or gradient."""


@dataclass
class PredictorParams:
    node_w: ad.Tensor  # (f, d)
    node_b: ad.Tensor
    edge_w: ad.Tensor  # (2f, d')
    edge_b: ad.Tensor
    frequency_bias: object = None  # (d, d, d') constant tensor, not trained


@dataclass
class LossWeights:
    lambda_e: float = 1.0
    lambda_r: float = 0.1
    lambda_t: float = 1.0

    def __post_init__(self):
        if min(self.lambda_e, self.lambda_r, self.lambda_t) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.lambda_e == self.lambda_r == self.lambda_t == 0:
            raise ValueError("at least one loss weight must be positive")

    def to_json(self) -> dict:
        return {"lambda_e": self.lambda_e, "lambda_r": self.lambda_r,
                "lambda_t": self.lambda_t}


def training_sgld() -> SGLDConfig:
    """SGLD settings used during training: the sampler contract with a
    small noise amplitude.  The unit-variance default suits standalone
    refinement, but while learning it pins chain states to the box walls
    and the projection clip zeroes the gradient path back to M."""
    return SGLDConfig(noise_scale=0.01)


@dataclass
class TrainConfig:
    mode: str = "ce"  # "ce" or "ebm"
    epochs: int = 10
    lr: float = 1e-2
    seed: int = 0
    hidden: int = 64
    iterations: int = 3
    alpha: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    sgld: SGLDConfig = field(default_factory=training_sgld)
    use_frequency_bias: bool = True
    audit_gradients: bool = False
    audit_fraction: float = 0.01

    def __post_init__(self):
        if self.mode not in ("ce", "ebm"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.epochs < 1 or self.lr <= 0 or self.hidden < 1:
            raise ValueError("invalid epochs/lr/hidden")
        if self.audit_gradients and not self.sgld.record_gradients_through_chain:
            raise ValueError("gradient audit requires the refinement chain "
                             "to be recorded")

    def to_json(self) -> dict:
        return {
            "mode": self.mode, "epochs": self.epochs, "lr": self.lr,
            "seed": self.seed, "hidden": self.hidden,
            "iterations": self.iterations, "alpha": self.alpha,
            "weights": self.weights.to_json(), "sgld": self.sgld.to_json(),
            "use_frequency_bias": self.use_frequency_bias,
            "audit_gradients": self.audit_gradients,
            "audit_fraction": self.audit_fraction,
        }

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        # Keys absent from a partial config (including fields inside the
        # "sgld" block) fall back to the training defaults above, not to
        # the sampler module's own defaults.
        obj = dict(obj)
        if "weights" in obj:
            obj["weights"] = LossWeights(**obj["weights"])
        if "sgld" in obj:
            obj["sgld"] = replace(training_sgld(), **obj["sgld"])
        return TrainConfig(**obj)


@dataclass
class TrainState:
    predictor: PredictorParams
    energy: EnergyModelParams
    space: LabelSpace
    mode: str
    lr: float
    seed: int
    step_count: int = 0
    epoch: int = 0


def init_predictor(rng, f: int, d: int, d_prime: int) -> PredictorParams:
    return PredictorParams(
        node_w=_kernel(rng, f, f, d), node_b=_kernel(rng, f, d),
        edge_w=_kernel(rng, 2 * f, 2 * f, d_prime), edge_b=_kernel(rng, 2 * f, d_prime),
    )


def frequency_bias_from(records, d: int, d_prime: int) -> np.ndarray:
    """Smoothed log-frequency of predicates per (subject, object) class pair."""
    counts = np.zeros((d, d, d_prime))
    for record in records:
        labels = record.node_labels
        for i in range(record.n):
            for j in range(record.n):
                if i != j:
                    counts[labels[i], labels[j], record.edge_labels[i, j]] += 1.0
    totals = counts.sum(axis=2, keepdims=True)
    return np.log(counts + 1.0) - np.log(totals + d_prime)


def predict(ig: ImageGraph, m: PredictorParams) -> SceneGraphState:
    """Initial scene graph: independent softmax scores for every node and
    off-diagonal directed pair; frequency bias added to edge logits when
    present, looked up at the argmax node labels."""
    n = ig.n
    feats = ig.node_features
    o = ad.softmax(ad.affine(feats, m.node_w, m.node_b))

    consts = structure(n)
    pair = ad.concat([ad.matmul(consts["src"], feats),
                      ad.matmul(consts["dst"], feats)], axis=1)
    logits = ad.affine(pair, m.edge_w, m.edge_b)
    if m.frequency_bias is not None:
        labels = np.argmax(o.value, axis=1)
        bias = m.frequency_bias.value[np.repeat(labels, n), np.tile(labels, n), :]
        logits = ad.add(logits, ad.constant(bias))
    d_prime = m.edge_b.value.shape[0]
    r_flat = ad.softmax(logits)
    mask = ad.broadcast_to(consts["offdiag"], (n * n, d_prime))
    r = ad.reshape(ad.elementwise_mul(r_flat, mask), (n, n, d_prime))
    return SceneGraphState(o, r)


def _floor(p: ad.Tensor, eps: float = 1e-12) -> ad.Tensor:
    # max(p, eps) without a dedicated op: relu(p - eps) + eps
    shape = p.value.shape
    return ad.add(ad.relu(ad.add(p, ad.constant(np.full(shape, -eps)))),
                  ad.constant(np.full(shape, eps)))


def task_loss(sg0: SceneGraphState, gt: SceneGraphState) -> ad.Tensor:
    """Mean negative log-probability at the ground-truth labels, nodes and
    off-diagonal edges averaged separately then summed."""
    n = sg0.n
    p_node = ad.sum_over_axis(ad.elementwise_mul(sg0.O, gt.O), 1)
    loss = ad.scalar_scale(ad.sum_over_axis(ad.log(_floor(p_node))), -1.0 / n)
    if n > 1:
        d_prime = sg0.R.value.shape[2]
        picked = ad.sum_over_axis(
            ad.elementwise_mul(ad.reshape(sg0.R, (n * n, d_prime)),
                               ad.reshape(gt.R, (n * n, d_prime))), 1)
        # Self-edge rows contribute log(1) = 0.
        picked = ad.add(picked, ad.constant(np.eye(n).reshape(-1)))
        edge_term = ad.scalar_scale(ad.sum_over_axis(ad.log(_floor(picked))),
                                    -1.0 / (n * n - n))
        loss = ad.add(loss, edge_term)
    return loss


def energy_loss(e_plus: ad.Tensor, e_min: ad.Tensor) -> ad.Tensor:
    """Ground-truth energy minus refined-prediction energy."""
    return ad.add(e_plus, ad.scalar_scale(e_min, -1.0))


def regularization_loss(e_plus: ad.Tensor, e_min: ad.Tensor) -> ad.Tensor:
    """Keeps energy magnitudes bounded: E_plus^2 + E_min^2."""
    return ad.add(ad.elementwise_mul(e_plus, e_plus),
                  ad.elementwise_mul(e_min, e_min))


def total_loss(record: SceneRecord, gt: SceneGraphState, state: TrainState,
               weights: LossWeights, sgld_cfg: SGLDConfig, noise_rng) -> tuple:
    """Weighted training loss for one record, plus float diagnostics."""
    sg0 = predict(record.image_graph, state.predictor)
    l_t = task_loss(sg0, gt)
    if state.mode == "ce":
        total = ad.scalar_scale(l_t, weights.lambda_t)
        return total, {"L_e": 0.0, "L_r": 0.0, "L_t": l_t.item(),
                       "total": total.item(), "E_plus": 0.0, "E_min": 0.0}
    traj = sgld_run(sg0, record.image_graph, state.energy, sgld_cfg, noise_rng)
    e_plus = energy_forward(record.image_graph, gt, state.energy)
    e_min = traj.final_energy
    l_e = energy_loss(e_plus, e_min)
    l_r = regularization_loss(e_plus, e_min)
    total = ad.add(ad.add(ad.scalar_scale(l_e, weights.lambda_e),
                          ad.scalar_scale(l_r, weights.lambda_r)),
                   ad.scalar_scale(l_t, weights.lambda_t))
    return total, {"L_e": l_e.item(), "L_r": l_r.item(), "L_t": l_t.item(),
                   "total": total.item(), "E_plus": e_plus.item(),
                   "E_min": e_min.item()}


def model_tensors(state: TrainState) -> list:
    return (named_tensors(state.predictor, "predictor.")
            + named_tensors(state.energy, "energy."))


def updated_tensors(state: TrainState) -> list:
    """Trainable (name, tensor) pairs the current mode actually optimizes.

    Cross-entropy mode never evaluates the energy model, so its tensors
    stay at initialization and are excluded from the gradient pass.
    """
    pairs = [(name, t) for name, t in model_tensors(state) if t.requires_grad]
    if state.mode == "ce":
        pairs = [(name, t) for name, t in pairs if name.startswith("predictor.")]
    return pairs


def sgd_step(state: TrainState, gradients: dict) -> TrainState:
    """w <- w - lr * g for every named gradient; no momentum.

    A non-finite gradient aborts before touching any parameter and
    names the offender.
    """
    pairs = [(name, t) for name, t in model_tensors(state) if name in gradients]
    for name, _ in pairs:
        if not np.isfinite(np.sum(gradients[name])):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
    for name, t in pairs:
        t.value = ad._prepare(t.value - state.lr * gradients[name])
    state.step_count += 1
    return state


class _NoiseTape:
    """Wraps an rng so a loss evaluation's noise draws can be replayed
    exactly, which makes finite differences through the sampler valid."""

    def __init__(self, rng):
        self._rng = rng
        self.tape = []
        self._pos = 0
        self._replay = False

    def normal(self, loc, scale, size):
        if self._replay:
            arr = self.tape[self._pos]
            self._pos += 1
            return arr
        arr = self._rng.normal(loc, scale, size=size)
        self.tape.append(arr)
        return arr

    def rewind(self):
        self._replay = True
        self._pos = 0


def audit_gradients(record: SceneRecord, gt: SceneGraphState, state: TrainState,
                    config: TrainConfig, h: float = 1e-5) -> float:
    """Central-difference audit of the full training gradient.

    Samples a fraction of coordinates from every trainable tensor,
    replays the same refinement noise for every evaluation, and returns
    the worst relative error.  Raises when it exceeds 1e-3.
    """
    tape = _NoiseTape(np.random.default_rng(0))
    trainable = updated_tensors(state)
    with ad.ComputationRecord():
        total, _ = total_loss(record, gt, state, config.weights, config.sgld, tape)
        gmap = ad.backward(total, wrt=[t for _, t in trainable])
        grads = {name: gmap[t].value.copy() for name, t in trainable}

    def loss_at() -> float:
        tape.rewind()
        with ad.ComputationRecord():
            value, _ = total_loss(record, gt, state, config.weights,
                                  config.sgld, tape)
            return value.item()

    picker = np.random.default_rng(config.seed)
    worst = 0.0
    worst_name = ""
    for name, t in trainable:
        size = t.value.size
        k = max(1, int(round(size * config.audit_fraction)))
        for flat in picker.choice(size, size=min(k, size), replace=False):
            base = t.value
            for sign in (+1.0, -1.0):
                bumped = base.copy().reshape(-1)
                bumped[flat] += sign * h
                t.value = ad._prepare(bumped.reshape(base.shape))
                if sign > 0:
                    up = loss_at()
                else:
                    down = loss_at()
            t.value = base
            fd = (up - down) / (2 * h)
            a = grads[name].reshape(-1)[flat]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if err > worst:
                worst, worst_name = err, f"{name}[{flat}]"
    if worst > 1e-3:
        raise RuntimeError(f"gradient audit failed at {worst_name}: "
                           f"relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def _rng_state(rng) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def save_checkpoint(path, state: TrainState, config: TrainConfig,
                    shuffle_rng, noise_rng) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "mode": state.mode,
        "epoch": state.epoch,
        "step_count": state.step_count,
        "lr": state.lr,
        "seed": state.seed,
        "label_space": state.space.to_json(),
        "config": config.to_json(),
        "predictor": tree_to_json(state.predictor),
        "energy": tree_to_json(state.energy),
        "rng": {"shuffle": _rng_state(shuffle_rng), "noise": _rng_state(noise_rng)},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    os.replace(tmp, path)


def _build_state(config: TrainConfig, space: LabelSpace, f: int,
                 init_rng) -> TrainState:
    d = space.num_object_classes
    d_prime = space.num_predicate_classes
    predictor = init_predictor(init_rng, f, d, d_prime)
    energy = init_energy_model(init_rng, d, d_prime, f, config.hidden,
                               config.alpha, config.iterations)
    return TrainState(predictor=predictor, energy=energy, space=space,
                      mode=config.mode, lr=config.lr, seed=config.seed)


def load_checkpoint(path, f: int):
    """Returns (TrainState, TrainConfig, shuffle_rng, noise_rng)."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format "
                         f"{payload.get('format_version')}")
    config = TrainConfig.from_json(payload["config"])
    space = LabelSpace.from_json(payload["label_space"])
    state = _build_state(config, space, f, np.random.default_rng(0))
    if any(e["name"] == "frequency_bias" for e in payload["predictor"]):
        d = space.num_object_classes
        d_prime = space.num_predicate_classes
        state.predictor.frequency_bias = ad.constant(np.zeros((d, d, d_prime)))
    tree_load_json(state.predictor, payload["predictor"])
    tree_load_json(state.energy, payload["energy"])
    state.mode = payload["mode"]
    state.lr = payload["lr"]
    state.seed = payload["seed"]
    state.step_count = payload["step_count"]
    state.epoch = payload["epoch"]
    return (state, config, _rng_from_state(payload["rng"]["shuffle"]),
            _rng_from_state(payload["rng"]["noise"]))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainData:
    space: LabelSpace
    train: list
    val: list
    rules: tuple = ()


def _val_metrics(state: TrainState, records, rules) -> dict:
    if not records:
        return {}
    losses = []
    results = []
    decoded = []
    with ad.no_grad():
        for record in records:
            sg0 = predict(record.image_graph, state.predictor)
            losses.append(task_loss(sg0, one_hot(record, state.space)).item())
            results.append(em.ImageResult(
                ranked=em.rank_triplets(sg0, "predcls"),
                gt_triplets=record.triplets(),
                node_classes=record.node_labels))
            decoded.append((record.node_labels, decode(sg0)[1]))
    recalls = [em.recall_at_k(r.ranked, r.gt_triplets, 20) for r in results]
    recalls = [r for r in recalls if r is not None]
    return {
        "task_loss": float(np.mean(losses)),
        "recall20": float(np.mean(recalls)) if recalls else None,
        "mean_recall20": em.mean_recall_at_k(results, state.space, 20),
        "violation_rate": em.constraint_violation_rate(decoded, rules),
    }


def train(data: TrainData, config: TrainConfig, out_dir=None, resume_path=None):
    """Run the configured mode over the training split.

    Returns (TrainState, report rows).  When out_dir is given, writes
    per-epoch checkpoints and a JSON-lines report there.  Resuming takes
    every setting from the checkpoint (the passed config is ignored) and
    continues bit-exactly where the saved run stopped.
    """
    if not data.train:
        raise ValueError("empty training set")
    f = data.train[0].image_graph.f

    if resume_path is not None:
        state, saved_config, shuffle_rng, noise_rng = load_checkpoint(resume_path, f)
        config = saved_config
        start_epoch = state.epoch
    else:
        ss = np.random.SeedSequence(config.seed)
        init_ss, shuffle_ss, noise_ss = ss.spawn(3)
        state = _build_state(config, data.space, f, np.random.default_rng(init_ss))
        if config.use_frequency_bias:
            d = data.space.num_object_classes
            d_prime = data.space.num_predicate_classes
            state.predictor.frequency_bias = ad.constant(
                frequency_bias_from(data.train, d, d_prime))
        shuffle_rng = np.random.default_rng(shuffle_ss)
        noise_rng = np.random.default_rng(noise_ss)
        start_epoch = 0

    trainable = updated_tensors(state)
    wrt = [t for _, t in trainable]
    report_rows = []
    report_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report_path = os.path.join(out_dir, "report.jsonl")
        if resume_path is None and os.path.exists(report_path):
            os.remove(report_path)

    audited = resume_path is not None or not config.audit_gradients
    last_checkpoint = resume_path

    for epoch in range(start_epoch, config.epochs):
        order = shuffle_rng.permutation(len(data.train))
        sums = {"L_e": 0.0, "L_r": 0.0, "L_t": 0.0, "total": 0.0}
        max_abs_energy = 0.0
        for idx in order:
            record = data.train[int(idx)]
            gt = one_hot(record, state.space)
            if not audited:
                audit_gradients(record, gt, state, config)
                audited = True
            try:
                with ad.ComputationRecord():
                    loss, diag = total_loss(record, gt, state, config.weights,
                                            config.sgld, noise_rng)
                    gmap = ad.backward(loss, wrt=wrt)
                    grads = {name: gmap[t].value for name, t in trainable}
                sgd_step(state, grads)
            except ad.NonFiniteError as err:
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, record {int(idx)}: {err}; "
                    f"last good checkpoint: {last_checkpoint}") from err
            for key in sums:
                sums[key] += diag[key]
            max_abs_energy = max(max_abs_energy, abs(diag["E_plus"]),
                                 abs(diag["E_min"]))
        state.epoch = epoch + 1

        count = len(order)
        row = {"epoch": epoch, "mode": state.mode,
               **{k: sums[k] / count for k in sums},
               "max_abs_energy": max_abs_energy,
               "val_metrics": _val_metrics(state, data.val, data.rules)}
        report_rows.append(row)
        if out_dir is not None:
            with open(report_path, "a") as fh:
                fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")))
                fh.write("\n")
            ckpt = os.path.join(out_dir, f"checkpoint_epoch{epoch:03d}.json")
            save_checkpoint(ckpt, state, config, shuffle_rng, noise_rng)
            last_checkpoint = ckpt
    return state, report_rows
