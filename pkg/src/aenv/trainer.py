"""Training orchestration: upstream contrastive runs, downstream heads on a
frozen encoder, the end-to-end supervised baseline, and the experiment grid.

Every stochastic consumer draws from its own named stream off the master
seed, so runs are reproducible and independent of each other.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .dataset import (DatasetManifest, RirStore, sample_batch)
from .metrics import (classification_metrics, compute_embeddings,
                      regression_metrics)
from .model import (Adam, DownstreamHead, Encoder, EncoderConfig,
                    UpstreamModel, load_state_dict, parameter_hash,
                    save_checkpoint, state_dict)
from .objectives import cross_entropy_loss, mse_loss, supcon_loss
from .rng import child_seed, named_stream

TASKS = ("rt60", "c50", "volume")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path


@dataclass
class TrainConfig:
    tau: float = 0.1
    strategy: str = "soft"
    n_classes: int = 24
    views: int = 3
    lr: float = 1e-3
    batches_per_epoch: int = 128
    val_batches: int = 32
    patience: int = 4
    max_epochs: int = 200
    downstream_batch: int = 16
    master_seed: int = 0

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        for name in ("n_classes", "views", "batches_per_epoch", "val_batches",
                     "patience", "max_epochs", "downstream_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class RunRecord:
    train_losses: list[float] = field(default_factory=list)
    val_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1  # 0-based
    best_val_loss: float = float("inf")
    stop_reason: str = ""
    wall_clock_s: float = 0.0
    config: dict = field(default_factory=dict)
    checkpoint_path: str | None = None


class EarlyStopping:
    """Strict-improvement early stopping: a tie counts as no improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = float("inf")
        self.best_epoch = -1
        self.stale = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        """Record one epoch; returns True when this epoch is a new best."""
        if val_loss < self.best:
            self.best = val_loss
            self.best_epoch = epoch
            self.stale = 0
            return True
        self.stale += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.patience


class _RunDir:
    """Writes the run directory layout (config/record/checkpoint/log); a
    None path disables all output."""

    def __init__(self, path):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.mkdir(parents=True, exist_ok=True)
            self._log = open(self.path / "log.txt", "w")

    def log(self, msg: str):
        if self.path is not None:
            self._log.write(msg + "\n")
            self._log.flush()

    def write_json(self, name: str, payload: dict):
        if self.path is not None:
            with open(self.path / name, "w") as f:
                json.dump(payload, f, indent=2, default=str)

    def checkpoint(self, name: str, arrays, sidecar=None) -> str | None:
        if self.path is None:
            return None
        path = self.path / name
        save_checkpoint(path, arrays, sidecar)
        return str(path)

    def close(self):
        if self.path is not None:
            self._log.close()


def _upstream_batch_loss(model: UpstreamModel, batch, tau: float,
                         training: bool, dropout_rng=None) -> Tensor:
    x = Tensor(batch.feature_array())
    e = model.encoder.forward(x, training=training, dropout_rng=dropout_rng)
    z = model.projection.forward(e)
    # normalize by anchor count so the loss scale is batch-size independent
    return supcon_loss(z, batch.class_labels, tau) * (1.0 / len(batch.features))


def train_upstream(store: RirStore, manifests: dict[str, DatasetManifest],
                   corpus, enc_config: EncoderConfig, config: TrainConfig,
                   run_dir=None, run_name: str = "upstream",
                   cache: dict | None = None
                   ) -> tuple[RunRecord, UpstreamModel]:
    """Contrastive training with fresh batches every step and a fixed
    validation batch sequence; keeps the best-validation checkpoint."""
    seed = config.master_seed
    model = UpstreamModel.build(
        enc_config, named_stream(seed, f"{run_name}:init"))
    opt = Adam(model.named_parameters(), lr=config.lr)
    dropout_rng = named_stream(seed, f"{run_name}:dropout")
    train_rng = named_stream(seed, f"{run_name}:batches")
    val_seed = child_seed(seed, f"{run_name}:val-batches")

    rd = _RunDir(run_dir)
    rd.write_json("config.json", asdict(config))
    record = RunRecord(config=asdict(config))
    stopper = EarlyStopping(config.patience)
    best_state = None
    t0 = time.monotonic()

    for epoch in range(config.max_epochs):
        epoch_losses = []
        for _ in range(config.batches_per_epoch):
            batch = sample_batch(manifests["train"], store, corpus,
                                 config.strategy, config.n_classes,
                                 config.views, train_rng, cache=cache)
            loss = _upstream_batch_loss(model, batch, config.tau,
                                        training=True, dropout_rng=dropout_rng)
            value = float(loss.data)
            if not np.isfinite(value):
                path = rd.checkpoint("diverged.ckpt", state_dict(
                    model.encoder, model.projection))
                rd.close()
                raise TrainingDiverged(
                    f"non-finite train loss at epoch {epoch}", path)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(value)

        # fixed-seed validation batches so the signal is comparable across
        # epochs; eval-mode forward (running stats, no dropout)
        val_rng = np.random.default_rng(val_seed)
        val_losses = []
        for _ in range(config.val_batches):
            batch = sample_batch(manifests["val"], store, corpus,
                                 config.strategy, config.n_classes,
                                 config.views, val_rng, cache=cache)
            val_losses.append(float(_upstream_batch_loss(
                model, batch, config.tau, training=False).data))

        record.train_losses.append(float(np.mean(epoch_losses)))
        record.val_losses.append(float(np.mean(val_losses)))
        improved = stopper.update(epoch, record.val_losses[-1])
        rd.log(f"epoch {epoch}: train {record.train_losses[-1]:.4f} "
               f"val {record.val_losses[-1]:.4f}"
               + (" *" if improved else ""))
        if improved:
            best_state = state_dict(model.encoder, model.projection)
        if stopper.should_stop:
            record.stop_reason = (f"no val improvement for "
                                  f"{config.patience} epochs")
            break
    else:
        record.stop_reason = f"reached max_epochs {config.max_epochs}"

    record.best_epoch = stopper.best_epoch
    record.best_val_loss = stopper.best
    record.wall_clock_s = time.monotonic() - t0
    load_state_dict(best_state, model.encoder, model.projection)
    record.checkpoint_path = rd.checkpoint(
        "best.ckpt", best_state,
        sidecar={"config": asdict(config), "best_epoch": record.best_epoch})
    rd.write_json("record.json", asdict(record))
    rd.close()
    return record, model


# ---------------------------------------------------------------------------
# downstream
# ---------------------------------------------------------------------------

def _targets(manifest: DatasetManifest, task: str) -> np.ndarray:
    if task == "rt60":
        return np.array([e.rt60_s for e in manifest.entries])
    if task == "c50":
        return np.array([e.c50_db for e in manifest.entries])
    if task == "volume":
        return np.array([e.volume_class for e in manifest.entries])
    raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")


def _head_loss(head: DownstreamHead, emb: np.ndarray, targets) -> Tensor:
    logits = head.forward_logits(Tensor(emb.astype(np.float32)))
    if head.task == "volume":
        return cross_entropy_loss(logits, targets)
    return mse_loss(logits, targets)


def train_downstream(encoder: Encoder, task: str,
                     manifests: dict[str, DatasetManifest], store: RirStore,
                     corpus, config: TrainConfig, run_dir=None,
                     run_name: str = "downstream", cache: dict | None = None,
                     embeddings: dict[str, np.ndarray] | None = None
                     ) -> tuple[RunRecord, DownstreamHead]:
    """Train one task head on frozen-encoder embeddings. The encoder only
    runs eval-mode forward passes (precomputed below), so its parameters
    cannot change."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    seed = config.master_seed
    frozen_hash = parameter_hash(encoder)
    if embeddings is None:
        embeddings = {}
    for split in ("train", "val"):
        if split not in embeddings:
            embeddings[split] = compute_embeddings(
                encoder, manifests[split], store, corpus, cache=cache)
    y = {split: _targets(manifests[split], task) for split in ("train", "val")}

    head = DownstreamHead(task, named_stream(seed, f"{run_name}:init"),
                          embedding_dim=encoder.config.embedding_dim)
    opt = Adam(head.named_parameters(), lr=config.lr)
    shuffle_rng = named_stream(seed, f"{run_name}:shuffle")

    rd = _RunDir(run_dir)
    rd.write_json("config.json", {**asdict(config), "task": task})
    record = RunRecord(config={**asdict(config), "task": task})
    stopper = EarlyStopping(config.patience)
    best_state = None
    t0 = time.monotonic()
    n_train = len(y["train"])

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(n_train)
        losses = []
        for start in range(0, n_train, config.downstream_batch):
            idx = order[start:start + config.downstream_batch]
            loss = _head_loss(head, embeddings["train"][idx], y["train"][idx])
            value = float(loss.data)
            if not np.isfinite(value):
                rd.close()
                raise TrainingDiverged(f"non-finite {task} loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        val_loss = float(_head_loss(head, embeddings["val"], y["val"]).data)

        record.train_losses.append(float(np.mean(losses)))
        record.val_losses.append(val_loss)
        improved = stopper.update(epoch, val_loss)
        rd.log(f"epoch {epoch}: train {record.train_losses[-1]:.4f} "
               f"val {val_loss:.4f}" + (" *" if improved else ""))
        if improved:
            best_state = state_dict(head)
        if stopper.should_stop:
            record.stop_reason = (f"no val improvement for "
                                  f"{config.patience} epochs")
            break
    else:
        record.stop_reason = f"reached max_epochs {config.max_epochs}"

    record.best_epoch = stopper.best_epoch
    record.best_val_loss = stopper.best
    record.wall_clock_s = time.monotonic() - t0
    load_state_dict(best_state, head)
    record.checkpoint_path = rd.checkpoint(
        "best.ckpt", {**state_dict(encoder), **best_state},
        sidecar={"task": task, "best_epoch": record.best_epoch})
    rd.write_json("record.json", asdict(record))
    rd.close()
    assert parameter_hash(encoder) == frozen_hash, "encoder changed"
    return record, head


def predict_downstream(head: DownstreamHead, embeddings: np.ndarray
                       ) -> np.ndarray:
    out = head.forward(Tensor(embeddings.astype(np.float32))).data
    if head.task == "volume":
        return out.argmax(axis=1)
    return out.reshape(-1)


def evaluate_downstream(head: DownstreamHead, encoder: Encoder,
                        manifest: DatasetManifest, store: RirStore, corpus,
                        cache: dict | None = None,
                        embeddings: np.ndarray | None = None):
    """Metric report for one task on one manifest split."""
    if embeddings is None:
        embeddings = compute_embeddings(encoder, manifest, store, corpus,
                                        cache=cache)
    pred = predict_downstream(head, embeddings)
    truth = _targets(manifest, head.task)
    if head.task == "volume":
        return classification_metrics(pred, truth)
    return regression_metrics(pred, truth)


# ---------------------------------------------------------------------------
# supervised baseline: encoder + head end to end, random init
# ---------------------------------------------------------------------------

def train_supervised_baseline(task: str, manifests: dict[str, DatasetManifest],
                              store: RirStore, corpus,
                              enc_config: EncoderConfig, config: TrainConfig,
                              run_dir=None, run_name: str = "supervised",
                              cache: dict | None = None
                              ) -> tuple[RunRecord, Encoder, DownstreamHead]:
    seed = config.master_seed
    init_rng = named_stream(seed, f"{run_name}:init")
    encoder = Encoder(enc_config, init_rng)
    head = DownstreamHead(task, init_rng, embedding_dim=enc_config.embedding_dim)
    params = encoder.named_parameters() + head.named_parameters()
    opt = Adam(params, lr=config.lr)
    dropout_rng = named_stream(seed, f"{run_name}:dropout")
    shuffle_rng = named_stream(seed, f"{run_name}:shuffle")

    def features_of(entries):
        from .dataset import _materialize
        return np.stack([
            _materialize(store, corpus, e.rir_id, e.source_id, cache).values
            for e in entries])[:, None].astype(np.float32)

    def forward_loss(entries, targets, training):
        x = Tensor(features_of(entries))
        e = encoder.forward(x, training=training,
                            dropout_rng=dropout_rng if training else None)
        if task == "volume":
            return cross_entropy_loss(head.forward_logits(e), targets)
        return mse_loss(head.forward_logits(e), targets)

    y = {s: _targets(manifests[s], task) for s in ("train", "val")}
    rd = _RunDir(run_dir)
    rd.write_json("config.json", {**asdict(config), "task": task,
                                  "mode": "supervised"})
    record = RunRecord(config={**asdict(config), "task": task,
                               "mode": "supervised"})
    stopper = EarlyStopping(config.patience)
    best_state = None
    t0 = time.monotonic()
    train_entries = manifests["train"].entries
    val_entries = manifests["val"].entries

    for epoch in range(config.max_epochs):
        order = shuffle_rng.permutation(len(train_entries))
        losses = []
        for start in range(0, len(order), config.downstream_batch):
            idx = order[start:start + config.downstream_batch]
            loss = forward_loss([train_entries[i] for i in idx],
                                y["train"][idx], training=True)
            value = float(loss.data)
            if not np.isfinite(value):
                rd.close()
                raise TrainingDiverged(
                    f"non-finite baseline loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(value)
        val_losses = []
        for start in range(0, len(val_entries), 64):
            chunk = val_entries[start:start + 64]
            val_losses.append(float(forward_loss(
                chunk, y["val"][start:start + 64], training=False).data)
                * len(chunk))
        val_loss = float(np.sum(val_losses) / len(val_entries))

        record.train_losses.append(float(np.mean(losses)))
        record.val_losses.append(val_loss)
        improved = stopper.update(epoch, val_loss)
        rd.log(f"epoch {epoch}: train {record.train_losses[-1]:.4f} "
               f"val {val_loss:.4f}" + (" *" if improved else ""))
        if improved:
            best_state = {**state_dict(encoder), **state_dict(head)}
        if stopper.should_stop:
            record.stop_reason = (f"no val improvement for "
                                  f"{config.patience} epochs")
            break
    else:
        record.stop_reason = f"reached max_epochs {config.max_epochs}"

    record.best_epoch = stopper.best_epoch
    record.best_val_loss = stopper.best
    record.wall_clock_s = time.monotonic() - t0
    load_state_dict(best_state, encoder, head)
    record.checkpoint_path = rd.checkpoint(
        "best.ckpt", best_state, sidecar={"task": task, "mode": "supervised"})
    rd.write_json("record.json", asdict(record))
    rd.close()
    return record, encoder, head


# ---------------------------------------------------------------------------
# experiment grid
# ---------------------------------------------------------------------------

def _report_from(report) -> dict:
    if hasattr(report, "rmse"):
        return {"rmse": report.rmse, "corr": report.pearson_corr,
                "bias": report.bias}
    return {"acc": report.accuracy, "pr": report.precision,
            "re": report.recall}


def run_experiment_grid(strategies, taus, tasks,
                        store_up, up_manifests, store_down, down_manifests,
                        corpus, enc_config: EncoderConfig,
                        config: TrainConfig, out_dir=None,
                        include_untrained_control: bool = False,
                        cache: dict | None = None) -> list[dict]:
    """Cross product of sampling strategies and temperatures, evaluated on
    every downstream task, plus one supervised baseline per task. Cells
    that fail are recorded with their error and the grid continues."""
    if not strategies or not taus or not tasks:
        raise ValueError("empty grid: strategies, taus, and tasks must all "
                         "be non-empty")
    out_dir = Path(out_dir) if out_dir is not None else None
    cells: list[dict] = []

    def run_cell(desc: dict, fn):
        try:
            desc["metrics"] = fn()
            desc["error"] = None
        except Exception as exc:  # record and continue
            desc["metrics"] = None
            desc["error"] = f"{type(exc).__name__}: {exc}"
        cells.append(desc)

    def downstream_eval(encoder, task, name):
        emb = {s: compute_embeddings(encoder, down_manifests[s], store_down,
                                     corpus, cache=cache)
               for s in ("train", "val", "test")}
        _, head = train_downstream(
            encoder, task, down_manifests, store_down, corpus, config,
            run_dir=None if out_dir is None else out_dir / f"{name}-{task}",
            run_name=name, embeddings=emb)
        report = evaluate_downstream(head, encoder, down_manifests["test"],
                                     store_down, corpus,
                                     embeddings=emb["test"])
        return _report_from(report)

    for strategy in strategies:
        for tau in taus:
            name = f"{strategy}-tau{tau}"
            try:
                run_cfg = TrainConfig(**{**asdict(config),
                                         "strategy": strategy, "tau": tau})
                _, model = train_upstream(
                    store_up, up_manifests, corpus, enc_config, run_cfg,
                    run_dir=None if out_dir is None else out_dir / name,
                    run_name=name, cache=cache)
            except Exception as exc:
                for task in tasks:
                    cells.append({"task": task, "strategy": strategy,
                                  "tau": tau, "metrics": None,
                                  "error": f"{type(exc).__name__}: {exc}"})
                continue
            for task in tasks:
                run_cell({"task": task, "strategy": strategy, "tau": tau},
                         lambda e=model.encoder, t=task, n=name:
                         downstream_eval(e, t, n))

    for task in tasks:
        def supervised(t=task):
            _, encoder, head = train_supervised_baseline(
                t, down_manifests, store_down, corpus, enc_config, config,
                run_dir=None if out_dir is None else out_dir / f"sup-{t}",
                cache=cache)
            report = evaluate_downstream(head, encoder,
                                         down_manifests["test"], store_down,
                                         corpus, cache=cache)
            return _report_from(report)
        run_cell({"task": task, "strategy": "supervised", "tau": None},
                 supervised)

    if include_untrained_control:
        control = Encoder(enc_config,
                          named_stream(config.master_seed, "control:init"))
        for task in tasks:
            run_cell({"task": task, "strategy": "untrained", "tau": None},
                     lambda t=task: downstream_eval(control, t, "untrained"))

    if out_dir is not None:
        write_grid_report(cells, out_dir)
    return cells


def write_grid_report(cells: list[dict], out_dir) -> None:
    """CSV plus an aligned text table of all grid cells."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metric_keys = ("rmse", "corr", "bias", "acc", "pr", "re")
    with open(out_dir / "report.csv", "w") as f:
        f.write("task,strategy,tau," + ",".join(metric_keys) + ",error\n")
        for c in cells:
            m = c["metrics"] or {}
            vals = ",".join("" if m.get(k) is None else f"{m[k]:.4f}"
                            for k in metric_keys)
            f.write(f"{c['task']},{c['strategy']},{c['tau']},{vals},"
                    f"{c['error'] or ''}\n")
    rows = []
    for c in cells:
        m = c["metrics"] or {}
        shown = "  ".join(f"{k}={m[k]:.4f}" for k in metric_keys
                          if m.get(k) is not None) or c["error"]
        rows.append((c["task"], c["strategy"],
                     "-" if c["tau"] is None else str(c["tau"]), shown))
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    with open(out_dir / "report.txt", "w") as f:
        for r in rows:
            f.write(f"{r[0]:<{widths[0]}}  {r[1]:<{widths[1]}}  "
                    f"{r[2]:<{widths[2]}}  {r[3]}\n")
