"""The training loop: supervised, FixMatch-style and rebalanced/merged-prototype modes.

One step draws a labeled batch of B and an unlabeled batch of floor(mu*B),
then in order: labeled forward and class-distribution update, supervised
loss; weak and strong unlabeled forwards; reweighting, pseudo-labels and the
masked unsupervised loss; bank push, merged views, semantic pseudo-labels
and the contrastive loss; AdamW step; EMA teacher update.
"""

import csv
import io
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import crp, msp
from .config import config_from_items, config_items, run_id, serialize_config
from .dataset import (
    build_splits,
    generate_mixture,
    read_bundle,
    sample_batches,
    strong_augment,
    weak_augment,
)
from .losses import ctr_loss, sup_loss, total_loss, unsup_loss
from .metrics import PseudoLabelMonitor, evaluate, head_tail_split
from .model import (
    EmaState,
    NetworkParams,
    OptimizerState,
    backward,
    add_grads,
    backward_apply,
    ema_update,
    forward,
)
from .numerics import RandomStream

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
EVENTS_VERSION = 1
METRICS_VERSION = 1

STREAMS = ("batches", "weak", "strong")


@dataclass
class TrainData:
    labeled: object
    unlabeled: object
    test: object
    spec: object = None
    mixture: object = None

    @property
    def labeled_counts(self):
        return np.bincount(self.labeled.labels, minlength=self.spec.num_classes)


def load_data(cfg):
    if cfg.data_dir:
        spec, mixture, labeled, unlabeled, test = read_bundle(cfg.data_dir)
        return TrainData(labeled, unlabeled, test, spec, mixture)
    return generate_data(cfg)


def generate_data(cfg):
    root = RandomStream(cfg.dataset_seed(), "data")
    mixture = generate_mixture(cfg.num_classes, cfg.dim, cfg.separation, root.child("mixture"))
    labeled, unlabeled, test = build_splits(cfg.data, mixture, root.child("splits"))
    return TrainData(labeled, unlabeled, test, cfg.data, mixture)


@dataclass
class TrainState:
    params: NetworkParams
    ema: EmaState
    optimizer: OptimizerState
    tracker: crp.DistributionTracker
    bank: msp.MemoryBank
    streams: dict
    t: int = 0
    history: list = field(default_factory=list)
    monitor: dict = None


def init_state(cfg, d_in):
    init_rng = RandomStream(cfg.seed, "init")
    params = NetworkParams.init(
        d_in, cfg.hidden, cfg.num_classes, cfg.d_proj, init_rng, n_layers=cfg.n_layers
    )
    return TrainState(
        params=params,
        ema=EmaState.from_params(params, cfg.weights.ema_momentum),
        optimizer=OptimizerState(
            params, lr=cfg.lr, weight_decay=cfg.weight_decay, beta1=cfg.beta1, beta2=cfg.beta2
        ),
        tracker=crp.DistributionTracker(cfg.num_classes, cfg.weights.dist_smoothing),
        bank=msp.MemoryBank(cfg.num_classes, cfg.d_proj, cfg.bank_maxsize),
        streams={name: RandomStream(cfg.seed, name) for name in STREAMS},
    )


@dataclass
class StepOutput:
    """Everything a step computed, on top of the updated state."""

    report: object
    pseudo: object = None
    beta: np.ndarray = None
    unlabeled_idx: np.ndarray = None
    ctr_valid: int = 0
    semantic_labels: list = None
    skipped: bool = False


def compute_losses(params, cfg, x_lab, y_lab, u_weak, u_strong, tracker, bank):
    """Loss terms and parameter gradients for one step, with state updates returned.

    Returns ``(report, grads, info)``; ``info`` carries the new tracker and
    bank, the pseudo-labels and the semantic labels. Targets derived from the
    weak view are constants.
    """
    use_rp, use_lctr, use_mp = cfg.effective_flags()
    w = cfg.weights

    lab = forward(params, x_lab)
    tracker = crp.update_distribution(tracker, lab.probs)
    l_sup, dlog_sup = sup_loss(lab.probs, y_lab)
    grads = backward(params, lab, dlogits=dlog_sup)
    info = {"tracker": tracker, "bank": bank, "pseudo": None, "beta": None,
            "semantic_labels": None, "ctr_valid": 0}

    if cfg.mode == "supervised":
        return total_loss(l_sup, 0.0, 0.0, w), grads, info

    weak = forward(params, u_weak)
    strong = forward(params, u_strong)
    n_u = u_weak.shape[0]

    if use_rp:
        beta = crp.reweight_factor(tracker, w.m_temperature).beta
        p_prime = crp.rebalance(weak.probs, beta)
    else:
        beta = None
        p_prime = weak.probs
    pseudo = crp.pseudo_labels(p_prime, w.tau)
    l_un, dlog_un = unsup_loss(pseudo, strong.probs)
    info.update(pseudo=pseudo, beta=beta)

    l_ctr = 0.0
    dz = None
    if use_lctr:
        bank = bank.copy().push(lab.z, y_lab)
        protos = msp.prototypes(bank)
        k = w.merge_k if use_mp else 1
        labels, q_strong, used = [], [], []
        for b in range(n_u):
            view = msp.merged_view(protos, msp.topk_order(weak.probs[b], k), k)
            if not view.usable:
                log.debug("no usable prototype for unlabeled row %d", b)
                labels.append(None)
                q_strong.append(None)
                used.append(None)
                continue
            q_w, index = msp.semantic_logits(weak.z[b], view, w.t_proto)
            q_s, _ = msp.semantic_logits(strong.z[b], view, w.t_proto)
            labels.append(msp.semantic_pseudo_label(q_w))
            q_strong.append(q_s)
            used.append(view.centers[index])
        l_ctr, dq = ctr_loss(labels, q_strong, n_rows=n_u)
        dz = np.zeros_like(strong.z)
        for b in range(n_u):
            if dq[b] is not None:
                dz[b] = msp.semantic_logits_backward(strong.z[b], used[b], w.t_proto, dq[b])
        info.update(bank=bank, semantic_labels=labels,
                    ctr_valid=sum(lbl is not None for lbl in labels))
        dz = w.lambda_ctr * dz

    g_strong = backward(params, strong, dlogits=w.lambda_un * dlog_un, dz=dz)
    grads = add_grads(grads, g_strong)
    report = total_loss(l_sup, l_un, l_ctr, w, masked_in_fraction=pseudo.mask_rate)
    return report, grads, info


def train_step(state, cfg, data, monitor=None):
    """Run one step in place on ``state``; returns a StepOutput."""
    supervised = cfg.mode == "supervised"
    li, ui = sample_batches(
        data.labeled, None if supervised else data.unlabeled,
        cfg.batch_size, cfg.mu, state.streams["batches"],
    )
    x_lab = data.labeled.features[li]
    y_lab = data.labeled.labels[li]
    if supervised:
        u_weak = u_strong = None
    else:
        u = data.unlabeled.features[ui]
        u_weak = weak_augment(u, cfg.augment, state.streams["weak"])
        u_strong = strong_augment(u, cfg.augment, state.streams["strong"])

    report, grads, info = compute_losses(
        state.params, cfg, x_lab, y_lab, u_weak, u_strong, state.tracker, state.bank
    )
    out = StepOutput(report=report, pseudo=info["pseudo"], beta=info["beta"],
                     unlabeled_idx=ui, ctr_valid=info["ctr_valid"],
                     semantic_labels=info["semantic_labels"])
    state.t += 1
    if not np.isfinite(report.l_total):
        log.error("step %d: non-finite loss %r, step aborted", state.t, report.l_total)
        out.skipped = True
        return out
    new_params = backward_apply(state.params, state.optimizer, grads)
    if new_params is state.params:
        out.skipped = True
        return out
    state.params = new_params
    state.tracker = info["tracker"]
    state.bank = info["bank"]
    state.ema = ema_update(state.ema, state.params)
    if monitor is not None and out.pseudo is not None:
        monitor.observe(ui, out.pseudo)
    return out


# -- telemetry ---------------------------------------------------------------

def event_record(state, cfg, out):
    rec = {
        "v": EVENTS_VERSION,
        "step": state.t,
        "loss": out.report.to_dict(),
        "p_tilde": state.tracker.p.tolist(),
        "skipped": out.skipped,
    }
    if out.pseudo is not None:
        C = cfg.num_classes
        m = out.pseudo.mask
        rec["beta"] = out.beta.tolist() if out.beta is not None else None
        rec["mask_rate"] = out.pseudo.mask_rate
        rec["pl_counts"] = np.bincount(out.pseudo.labels[m], minlength=C).tolist()
    if out.semantic_labels is not None:
        rec["ctr_valid"] = out.ctr_valid
    return rec


def metrics_header(C):
    cols = ["step", "mode", "seed"]
    for c in range(C):
        cols += [f"p{c}", f"r{c}", f"f1_{c}"]
    cols += ["macro_p", "macro_r", "macro_f1", "micro_f1", "accuracy",
             "pl_mask_in_rate", "pl_head_recall", "pl_tail_recall", "pl_tail_precision", "pl_tail_f1"]
    return cols


def metrics_row(step, cfg, report, pl):
    row = [step, cfg.mode, cfg.seed]
    for c in range(len(report.precision)):
        row += [float(report.precision[c]), float(report.recall[c]), float(report.f1[c])]
    row += [report.macro_precision, report.macro_recall, report.macro_f1, report.micro_f1,
            report.accuracy]
    if pl is None:
        row += [0.0] * 5
    else:
        row += [pl.mask_in_rate, pl.head_recall, pl.tail_recall, pl.tail_precision, pl.tail_f1]
    return [repr(v) if isinstance(v, float) else v for v in row]


def render_metrics_csv(cfg, history):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(metrics_header(cfg.num_classes))
    writer.writerows(history)
    return buf.getvalue()


# -- checkpoints -------------------------------------------------------------

def _arrays_to_json(arrays):
    return {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in arrays.items()}


def _arrays_from_json(d):
    return {k: np.array(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in d.items()}


def state_to_dict(state, cfg):
    opt = state.optimizer
    return {
        "version": CHECKPOINT_VERSION,
        "config": [[k, v] for k, v in config_items(cfg)],
        "t": state.t,
        "n_layers": state.params.n_layers,
        "params": _arrays_to_json(state.params.arrays),
        "ema": {"alpha": state.ema.alpha, "shadow": _arrays_to_json(state.ema.shadow.arrays)},
        "optimizer": {
            "lr": opt.lr, "weight_decay": opt.weight_decay, "beta1": opt.beta1,
            "beta2": opt.beta2, "eps": opt.eps, "step": opt.step,
            "m": _arrays_to_json(opt.m), "v": _arrays_to_json(opt.v),
        },
        "tracker": {"p": state.tracker.p.tolist(), "t": state.tracker.t,
                    "smoothing": state.tracker.smoothing},
        "bank": state.bank.to_dict(),
        "streams": {name: s.get_state() for name, s in state.streams.items()},
        "history": state.history,
        "monitor": state.monitor,
    }


def state_from_dict(d):
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    cfg = config_from_items(d["config"])
    n_layers = d["n_layers"]
    params = NetworkParams(_arrays_from_json(d["params"]), n_layers)
    ema = EmaState(NetworkParams(_arrays_from_json(d["ema"]["shadow"]), n_layers), d["ema"]["alpha"])
    o = d["optimizer"]
    opt = OptimizerState(params, lr=o["lr"], weight_decay=o["weight_decay"],
                         beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"])
    opt.step = o["step"]
    opt.m = _arrays_from_json(o["m"])
    opt.v = _arrays_from_json(o["v"])
    tr = crp.DistributionTracker(len(d["tracker"]["p"]), d["tracker"]["smoothing"])
    tr.p = np.array(d["tracker"]["p"], dtype=np.float64)
    tr.t = d["tracker"]["t"]
    state = TrainState(
        params=params, ema=ema, optimizer=opt, tracker=tr,
        bank=msp.MemoryBank.from_dict(d["bank"]),
        streams={name: RandomStream.from_state(s) for name, s in d["streams"].items()},
        t=d["t"], history=[list(r) for r in d["history"]], monitor=d["monitor"],
    )
    return state, cfg


def save_checkpoint(path, state, cfg):
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(state_to_dict(state, cfg), fh)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path) as fh:
        return state_from_dict(json.load(fh))


# -- runs --------------------------------------------------------------------

@dataclass
class RunResult:
    state: TrainState
    config: object
    report: object
    confusion: np.ndarray
    pseudo_report: object
    history: list
    head: np.ndarray = None
    tail: np.ndarray = None
    run_dir: str = None


def _truncate_events(path, step):
    if not os.path.exists(path):
        return
    with open(path) as fh:
        keep = [line for line in fh if json.loads(line)["step"] <= step]
    with open(path, "w") as fh:
        fh.writelines(keep)


def train_run(cfg, data=None, out_dir=None, state=None, stop_at=None):
    """Train to ``cfg.iterations`` (or ``stop_at``), evaluating the EMA teacher.

    With ``out_dir`` set, writes ``<out_dir>/<run-id>/`` holding config.echo,
    metrics.csv, events.jsonl and checkpoints/. Passing a restored ``state``
    continues that run exactly.
    """
    if data is None:
        data = load_data(cfg)
    resumed = state is not None
    if state is None:
        state = init_state(cfg, data.labeled.features.shape[1])
    head, tail = head_tail_split(data.labeled_counts)
    monitor = None
    if cfg.mode != "supervised":
        monitor = PseudoLabelMonitor(data.unlabeled, cfg.num_classes, head, tail)
        if state.monitor is not None:
            monitor.load_dict(state.monitor)

    run_dir = events_fh = None
    if out_dir is not None:
        run_dir = os.path.join(out_dir, run_id(cfg))
        os.makedirs(os.path.join(run_dir, "checkpoints"), exist_ok=True)
        os.makedirs(os.path.join(run_dir, "features"), exist_ok=True)
        with open(os.path.join(run_dir, "config.echo"), "w") as fh:
            fh.write(serialize_config(cfg))
        events_path = os.path.join(run_dir, "events.jsonl")
        if cfg.write_events:
            if resumed:
                _truncate_events(events_path, state.t)
                events_fh = open(events_path, "a")
            else:
                events_fh = open(events_path, "w")

    def record_eval():
        report, _ = evaluate(state.ema.shadow, data.test)
        pl = monitor.report() if monitor is not None else None
        state.history.append(metrics_row(state.t, cfg, report, pl))

    def write_metrics():
        if run_dir is not None:
            with open(os.path.join(run_dir, "metrics.csv"), "w") as fh:
                fh.write(render_metrics_csv(cfg, state.history))

    def checkpoint():
        state.monitor = monitor.to_dict() if monitor is not None else None
        if run_dir is not None:
            ck = os.path.join(run_dir, "checkpoints")
            save_checkpoint(os.path.join(ck, f"step-{state.t:07d}.json"), state, cfg)
            save_checkpoint(os.path.join(ck, "latest.json"), state, cfg)

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    try:
        if state.t == 0 and not state.history:
            record_eval()
        while state.t < end:
            out = train_step(state, cfg, data, monitor)
            if events_fh is not None:
                events_fh.write(json.dumps(event_record(state, cfg, out)) + "\n")
            if state.t % cfg.eval_every == 0:
                record_eval()
            if cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0 and state.t < end:
                write_metrics()
                checkpoint()
        # a stopped run must not gain rows an uninterrupted one lacks
        if state.t == cfg.iterations and state.history[-1][0] != state.t:
            record_eval()
        write_metrics()
        checkpoint()
    finally:
        if events_fh is not None:
            events_fh.close()

    report, cm = evaluate(state.ema.shadow, data.test)
    return RunResult(
        state=state, config=cfg, report=report, confusion=cm,
        pseudo_report=monitor.report() if monitor is not None else None,
        history=state.history, head=head, tail=tail, run_dir=run_dir,
    )


def resume_run(checkpoint_path, iterations=None, out_dir=None):
    """Continue a run from a checkpoint written by :func:`train_run`."""
    state, cfg = load_checkpoint(checkpoint_path)
    if iterations is not None and iterations != cfg.iterations:
        from .config import replace
        cfg = replace(cfg, iterations=iterations)
    if out_dir is None:
        out_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(checkpoint_path))))
    return train_run(cfg, out_dir=out_dir, state=state)
