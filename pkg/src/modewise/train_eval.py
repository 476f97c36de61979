"""Training loop, early stopping, dropout grid search, evaluation metrics."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .models import Ensemble, Network, NetworkSpec, build_config
from .nn import Adam, softmax_xent
from .pipeline import Dataset

log = logging.getLogger("modewise.train")

N_CLASSES = 5


class TrainingDiverged(Exception):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss at epoch {epoch}")
        self.epoch = epoch


@dataclass
class TrainConfig:
    batch_size: int = 64
    max_epochs: int = 62
    early_stop: str = "val"          # val | test | none
    patience: Optional[int] = None   # None: never halt early, still pick best
    seed: int = 0
    monitor_frac: float = 0.1        # val split carved from train
    lr: float = 0.001

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.early_stop not in ("val", "test", "none"):
            raise ValueError(f"early_stop must be val/test/none, got {self.early_stop}")


@dataclass
class TrainResult:
    network: Network
    train_acc: list[float]
    monitor_acc: list[float]
    best_epoch: int                 # 1-based; 0 when nothing was monitored
    wall_time_s: float
    monitor_kind: str

    def to_jsonable(self) -> dict:
        return {
            "config": self.network.spec.name,
            "monitor": self.monitor_kind,
            "epochs_run": len(self.train_acc),
            "best_epoch": self.best_epoch,
            "train_accuracy": self.train_acc,
            "monitor_accuracy": self.monitor_acc,
            "wall_time_s": round(self.wall_time_s, 3),
        }


def best_epoch(curve: Sequence[float], patience: Optional[int] = None) -> int:
    """1-based epoch with the maximum monitored score, earliest on ties.

    With patience given, simulates the halting rule: epochs more than
    `patience` past the incumbent best are never reached.
    """
    if not curve:
        raise ValueError("empty accuracy curve")
    best_i, best_v = 0, curve[0]
    for i, v in enumerate(curve[1:], start=1):
        if v > best_v:
            best_i, best_v = i, v
        # halting happens after an epoch is observed; later entries of a
        # fully recorded curve would never have run
        if patience is not None and i - best_i >= patience:
            break
    return best_i + 1


def accuracy(predict: Callable[[np.ndarray], np.ndarray],
             x: np.ndarray, y: np.ndarray) -> float:
    return float((predict(x) == y).mean())


def train(net: Network, train_set: Dataset, cfg: TrainConfig,
          monitor_set: Optional[Dataset] = None) -> TrainResult:
    """Mini-batch Adam training with per-epoch accuracy tracking.

    early_stop="val" carves a seeded monitor split out of the training data;
    "test" monitors the provided set (reproduces the reference protocol and
    leaks the test set into epoch selection -- reports label it); "none"
    trains for max_epochs and keeps the final parameters.

    Per-channel input standardization is fixed from the fitting data before
    the first step (unless the network already carries one) and travels with
    the saved model.
    """
    rng = np.random.default_rng(cfg.seed)
    x_all = train_set.stacked()
    y_all = train_set.labels()

    if cfg.early_stop == "val":
        n_mon = max(1, int(round(len(x_all) * cfg.monitor_frac)))
        if n_mon >= len(x_all):
            raise ValueError("training set too small for a validation split")
        perm = rng.permutation(len(x_all))
        mon_idx, fit_idx = perm[:n_mon], perm[n_mon:]
        x_mon, y_mon = x_all[mon_idx], y_all[mon_idx]
        x_fit, y_fit = x_all[fit_idx], y_all[fit_idx]
    elif cfg.early_stop == "test":
        if monitor_set is None:
            raise ValueError("early_stop='test' requires a monitor set")
        x_mon, y_mon = monitor_set.stacked(), monitor_set.labels()
        x_fit, y_fit = x_all, y_all
    else:
        x_mon = y_mon = None
        x_fit, y_fit = x_all, y_all

    if net.input_scale is None:
        net.set_input_scale(x_fit.mean(axis=(0, 2)), x_fit.std(axis=(0, 2)))

    opt = Adam(lr=cfg.lr)
    names, params, _ = net.named_params()

    train_curve: list[float] = []
    monitor_curve: list[float] = []
    best_i, best_v, best_weights = -1, -np.inf, None
    t0 = time.perf_counter()

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(x_fit))
        correct = 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            xb, yb = x_fit[idx], y_fit[idx]
            logits = net.forward(xb, train=True)
            loss, dlogits = softmax_xent(logits, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            net.backward(dlogits)
            opt.step(params, net.named_params()[2], names)
            correct += int((logits.argmax(axis=1) == yb).sum())
        train_curve.append(correct / len(x_fit))

        if x_mon is not None:
            mon_acc = accuracy(net.predict, x_mon, y_mon)
            monitor_curve.append(mon_acc)
            if mon_acc > best_v:
                best_i, best_v = epoch - 1, mon_acc
                best_weights = net.get_weights()
            log.info("epoch %d: train %.4f monitor %.4f", epoch,
                     train_curve[-1], mon_acc)
            if cfg.patience is not None and (epoch - 1) - best_i >= cfg.patience:
                log.info("halting: no improvement for %d epochs", cfg.patience)
                break
        else:
            log.info("epoch %d: train %.4f", epoch, train_curve[-1])

    if best_weights is not None:
        net.set_weights(best_weights)
    return TrainResult(
        network=net,
        train_acc=train_curve,
        monitor_acc=monitor_curve,
        best_epoch=best_i + 1 if best_weights is not None else 0,
        wall_time_s=time.perf_counter() - t0,
        monitor_kind=cfg.early_stop,
    )


# --- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    confusion: np.ndarray           # rows actual, cols predicted
    accuracy: float
    precision: list[float]
    recall: list[float]
    f_score: list[float]
    macro_precision: float
    macro_recall: float
    macro_f: float
    flags: list[str] = field(default_factory=list)

    def to_jsonable(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f": self.macro_f,
            "flags": self.flags,
        }

    def format_table(self, class_names: Sequence[str] = ()) -> str:
        names = list(class_names) or [f"class{i}" for i in range(N_CLASSES)]
        width = max(8, max(len(n) for n in names) + 1)
        lines = ["confusion matrix (rows actual, cols predicted):"]
        header = " " * width + "".join(f"{n:>{width}}" for n in names)
        lines.append(header + f"{'recall%':>{width}}")
        for i, n in enumerate(names):
            row = "".join(f"{int(v):>{width}}" for v in self.confusion[i])
            lines.append(f"{n:<{width}}" + row
                         + f"{100 * self.recall[i]:>{width}.1f}")
        prec = "".join(f"{100 * p:>{width}.1f}" for p in self.precision)
        lines.append(f"{'prec%':<{width}}" + prec)
        lines.append(f"accuracy: {100 * self.accuracy:.2f}%")
        return "\n".join(lines)


def evaluate(predict: Callable[[np.ndarray], np.ndarray] | Network | Ensemble,
             test_set: Dataset) -> EvalReport:
    """Confusion matrix plus precision/recall/F per class and macro averages."""
    if not test_set.samples:
        raise ValueError("empty test set")
    if isinstance(predict, (Network, Ensemble)):
        predict = predict.predict
    x, y = test_set.stacked(), test_set.labels()
    pred = np.asarray(predict(x))
    conf = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    np.add.at(conf, (y, pred), 1)

    flags: list[str] = []
    precision, recall, f_score = [], [], []
    for k in range(N_CLASSES):
        tp = conf[k, k]
        col = conf[:, k].sum()
        row = conf[k, :].sum()
        if col == 0:
            flags.append(f"precision[{k}] undefined (no predictions), set to 0")
        if row == 0:
            flags.append(f"recall[{k}] undefined (no instances), set to 0")
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        f = 2 * p * r / (p + r) if (p + r) else 0.0
        if (p + r) == 0 and (col or row):
            flags.append(f"f_score[{k}] undefined, set to 0")
        precision.append(float(p))
        recall.append(float(r))
        f_score.append(float(f))

    return EvalReport(
        confusion=conf,
        accuracy=float(conf.trace() / conf.sum()),
        precision=precision,
        recall=recall,
        f_score=f_score,
        macro_precision=float(np.mean(precision)),
        macro_recall=float(np.mean(recall)),
        macro_f=float(np.mean(f_score)),
        flags=flags,
    )


# --- dropout grid search ------------------------------------------------------

@dataclass
class GridResult:
    best: tuple[float, float]
    table: dict[tuple[float, float], float]

    def to_jsonable(self) -> dict:
        return {"best_p": list(self.best),
                "mean_cv_accuracy": {f"{p1:g},{p2:g}": acc
                                     for (p1, p2), acc in self.table.items()}}


def cv_folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    """Seeded partition of range(n) into k nearly equal folds."""
    if k < 2 or k > n:
        raise ValueError(f"need 2 <= k <= n, got k={k}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(chunk) for chunk in np.array_split(perm, k)]


def _cell_accuracy(args):
    (p1, p2), name, m, filters, train_x, train_y, folds, epochs, batch, seed = args
    accs = []
    for fi, fold in enumerate(folds):
        mask = np.ones(len(train_x), dtype=bool)
        mask[fold] = False
        spec = build_config(name, M=m, dropout=(p1, p2), filters=filters)
        net = Network.build(spec, seed=np.random.SeedSequence((seed, fi)))
        rng = np.random.default_rng((seed, fi, 1))
        x_fit, y_fit = train_x[mask], train_y[mask]
        net.set_input_scale(x_fit.mean(axis=(0, 2)), x_fit.std(axis=(0, 2)))
        opt = Adam()
        names, params, _ = net.named_params()
        for _ in range(epochs):
            order = rng.permutation(len(x_fit))
            for lo in range(0, len(order), batch):
                idx = order[lo:lo + batch]
                logits = net.forward(x_fit[idx], train=True)
                loss, dlogits = softmax_xent(logits, y_fit[idx])
                if not np.isfinite(loss):
                    raise TrainingDiverged(0)
                net.backward(dlogits)
                opt.step(params, net.named_params()[2], names)
        accs.append(accuracy(net.predict, train_x[fold], train_y[fold]))
    return (p1, p2), float(np.mean(accs))


def grid_search_dropout(name: str, train_set: Dataset,
                        grid: Sequence[float],
                        k: int = 5, epochs: int = 10,
                        batch_size: int = 64, seed: int = 0,
                        filters: Sequence[int] = (32, 64, 128),
                        jobs: int = 1) -> GridResult:
    """Mean k-fold CV accuracy for every (p1, p2) pair from the grid.

    Ties resolve to the lexicographically smaller pair. The configuration
    must have exactly two dropout layers (the two-p search pattern).
    """
    if not grid:
        raise ValueError("empty dropout grid")
    x, y = train_set.stacked(), train_set.labels()
    folds = cv_folds(len(x), k, seed)
    cells = [(p1, p2) for p1 in grid for p2 in grid]
    args = [((p1, p2), name, train_set.M, tuple(filters), x, y, folds,
             epochs, batch_size, seed) for (p1, p2) in cells]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_accuracy, args))
    else:
        results = [_cell_accuracy(a) for a in args]
    table = dict(results)
    best = max(sorted(table), key=lambda cell: table[cell])
    return GridResult(best, table)


def train_ensemble(spec: NetworkSpec, train_set: Dataset, cfg: TrainConfig,
                   n_members: int = 7,
                   monitor_set: Optional[Dataset] = None,
                   jobs: int = 1) -> tuple[Ensemble, list[TrainResult]]:
    """Bag n members: each trains on its own bootstrap resample."""
    from .models import member_seeds

    seeds = member_seeds(cfg.seed, n_members)
    args = []
    for i, ss in enumerate(seeds):
        member_cfg = TrainConfig(
            batch_size=cfg.batch_size, max_epochs=cfg.max_epochs,
            early_stop=cfg.early_stop, patience=cfg.patience,
            seed=int(ss.generate_state(1)[0]), monitor_frac=cfg.monitor_frac,
            lr=cfg.lr)
        args.append((spec, train_set, member_cfg, monitor_set, ss))
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_train_member, args))
    else:
        results = [_train_member(a) for a in args]
    return Ensemble([r.network for r in results]), results


def _train_member(args) -> TrainResult:
    from .models import bootstrap_resample

    spec, train_set, cfg, monitor_set, ss = args
    resampled = bootstrap_resample(train_set, ss)
    net = Network.build(spec, seed=ss)
    return train(net, resampled, cfg, monitor_set)
