"""Command-line entry point.

Subcommands cover the full pipeline: RIR generation, dataset construction,
upstream/downstream training, evaluation, embedding export, and the
experiment grid. Exit codes: 0 success, 1 user/config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .acoustics import load_rir_store, save_rir_store
from .config import AppConfig
from .dataset import (RirStore, SyntheticCorpus, WavCorpus, build_downstream,
                      build_upstream, generate_rir_store, load_manifests,
                      save_manifests)
from .metrics import export_embeddings
from .model import (DownstreamHead, Encoder, EncoderConfig, UpstreamModel,
                    load_checkpoint, load_state_dict)
from .signal import index_wav_corpus
from .trainer import (TrainingDiverged, evaluate_downstream,
                      run_experiment_grid, train_downstream, train_upstream)

STRATEGY_FLAGS = {"soft": "soft", "hard": "hard",
                  "pos-independent": "pos_independent"}


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def _load_store(path) -> RirStore:
    records, rooms = load_rir_store(path)
    return RirStore(records, rooms)


def _corpus_from_meta(meta: dict):
    spec = meta["corpus"]
    if spec["type"] == "synthetic":
        return SyntheticCorpus(spec["n_segments"], spec["master_seed"],
                               spec["segment_s"])
    entries = []
    with open(spec["segments"]) as f:
        for line in f:
            entries.append(json.loads(line))
    return WavCorpus(spec["dir"], entries)


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ValueError(f"output directory {out} is not empty "
                         f"(use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config_for(args, dataset_meta: dict | None = None) -> AppConfig:
    cfg = AppConfig.load(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.train.master_seed = args.seed
    if dataset_meta is not None:
        cfg.dataset.segment_s = dataset_meta.get("segment_s",
                                                 cfg.dataset.segment_s)
        cfg.apply_scale(None, segment_s=cfg.dataset.segment_s)
    return cfg


def _encoder_from_run(ckpt_path) -> Encoder:
    """Rebuild an encoder from a checkpoint plus the effective-config echo
    that lives next to it."""
    ckpt_path = Path(ckpt_path)
    echo = ckpt_path.parent / "effective-config.json"
    if not echo.exists():
        raise ValueError(f"missing {echo}; cannot reconstruct the encoder "
                         f"architecture")
    with open(echo) as f:
        cfg = AppConfig.from_dict(json.load(f))
    arrays, _ = load_checkpoint(ckpt_path)
    encoder = Encoder(cfg.model, np.random.default_rng(0))
    if any(k.startswith("proj.") for k in arrays):
        model = UpstreamModel.build(cfg.model, np.random.default_rng(0))
        load_state_dict(arrays, model.encoder, model.projection)
        return model.encoder
    load_state_dict({k: v for k, v in arrays.items()
                     if k.startswith("enc.")}, encoder)
    return encoder


def write_histogram_csv(values, path, bins: int = 10) -> None:
    values = np.asarray([v for v in values if np.isfinite(v)], dtype=float)
    counts, edges = np.histogram(values, bins=bins)
    with open(path, "w") as f:
        f.write("bin_low,bin_high,count\n")
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            f.write(f"{lo:.6f},{hi:.6f},{c}\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_rirs(args) -> int:
    cfg = _config_for(args)
    out = _prepare_out(args.out, args.force)
    store = generate_rir_store(args.count_rooms, args.rirs_per_room,
                               cfg.seed, sim_config=cfg.acoustics,
                               room_prefix=args.room_prefix)
    save_rir_store(store.records, store.rooms, out)
    cfg.echo(out)
    rt60 = [r.rt60_s for r in store.records]
    c50 = [r.c50_db for r in store.records]
    vols = [store.room(rid).volume() for rid in store.room_ids]
    write_histogram_csv(rt60, out / "rt60_hist.csv")
    write_histogram_csv(c50, out / "c50_hist.csv")
    write_histogram_csv(vols, out / "volume_hist.csv")
    finite = [v for v in rt60 if np.isfinite(v)]
    print(f"wrote {len(store.records)} RIRs from {len(store.room_ids)} rooms "
          f"to {out}")
    print(f"RT60 [s]: median {np.median(finite):.3f} "
          f"range [{min(finite):.3f}, {max(finite):.3f}]")
    print(f"C50 [dB]: median {np.median(c50):.2f}")
    print(f"volume [m^3]: range [{min(vols):.1f}, {max(vols):.1f}]")
    return 0


def cmd_build_dataset(args) -> int:
    cfg = _config_for(args)
    cfg.apply_scale(args.scale, segment_s=args.segment_s)
    out = _prepare_out(args.out, args.force)
    store = _load_store(args.rirs)
    rng = np.random.default_rng(cfg.seed)

    if args.speech_dir:
        seg_index = out / "segments.jsonl"
        entries = index_wav_corpus(args.speech_dir, out_path=seg_index,
                                   segment_s=cfg.dataset.segment_s)
        corpus = WavCorpus(args.speech_dir, entries)
        corpus_meta = {"type": "wav", "dir": str(args.speech_dir),
                       "segments": str(seg_index)}
    else:
        corpus = SyntheticCorpus(args.synthetic_count, cfg.seed,
                                 cfg.dataset.segment_s)
        corpus_meta = {"type": "synthetic",
                       "n_segments": args.synthetic_count,
                       "master_seed": cfg.seed,
                       "segment_s": cfg.dataset.segment_s}

    upstream_rooms = None
    if args.upstream:
        _, up_meta = load_manifests(args.upstream)
        upstream_rooms = set(up_meta["room_ids"])
    if args.role == "upstream":
        manifests = build_upstream(store, corpus, cfg.dataset, rng)
    else:
        manifests = build_downstream(store, corpus, cfg.dataset, rng,
                                     upstream_room_ids=upstream_rooms)
    room_ids = sorted({e.room_id for m in manifests.values()
                       for e in m.entries})
    save_manifests(out, manifests, meta={
        "role": args.role,
        "scale": args.scale,
        "segment_s": cfg.dataset.segment_s,
        "stft_window": "hann",
        "corpus": corpus_meta,
        "room_ids": room_ids,
        "sizes": {s: len(manifests[s].entries) for s in manifests},
    })
    cfg.echo(out)
    sizes = "/".join(str(len(manifests[s].entries))
                     for s in ("train", "val", "test"))
    print(f"built {args.role} dataset at {out}: {sizes} entries, "
          f"{len(room_ids)} rooms")
    return 0


def cmd_train_upstream(args) -> int:
    manifests, meta = load_manifests(args.dataset)
    cfg = _config_for(args, dataset_meta=meta)
    if args.strategy:
        cfg.train.strategy = STRATEGY_FLAGS[args.strategy]
    if args.tau is not None:
        cfg.train.tau = args.tau
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    store = _load_store(args.rirs)
    corpus = _corpus_from_meta(meta)
    record, _ = train_upstream(store, manifests, corpus, cfg.model,
                               cfg.train, run_dir=out, cache={})
    print(f"upstream run finished: best epoch {record.best_epoch}, "
          f"best val loss {record.best_val_loss:.4f} ({record.stop_reason})")
    print(f"checkpoint: {record.checkpoint_path}")
    return 0


def cmd_train_downstream(args) -> int:
    manifests, meta = load_manifests(args.dataset)
    cfg = _config_for(args, dataset_meta=meta)
    out = _prepare_out(args.out, args.force)
    encoder = _encoder_from_run(args.encoder)
    cfg.model = encoder.config
    cfg.echo(out)
    store = _load_store(args.rirs)
    corpus = _corpus_from_meta(meta)
    record, _ = train_downstream(encoder, args.task, manifests, store,
                                 corpus, cfg.train, run_dir=out, cache={})
    print(f"downstream {args.task} run finished: best epoch "
          f"{record.best_epoch}, best val loss {record.best_val_loss:.4f}")
    return 0


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    ckpt = run / "best.ckpt"
    if not ckpt.exists():
        raise ValueError(f"no checkpoint at {ckpt}")
    with open(str(ckpt) + ".json") as f:
        sidecar = json.load(f)
    task = sidecar.get("task")
    if task is None:
        raise ValueError(f"{ckpt} is not a downstream checkpoint "
                         f"(no task in sidecar)")
    encoder = _encoder_from_run(ckpt)
    arrays, _ = load_checkpoint(ckpt)
    head = DownstreamHead(task, np.random.default_rng(0),
                          embedding_dim=encoder.config.embedding_dim)
    load_state_dict({k: v for k, v in arrays.items()
                     if k.startswith("head.")}, head)

    manifests, meta = load_manifests(args.dataset)
    store = _load_store(args.rirs)
    corpus = _corpus_from_meta(meta)
    report = evaluate_downstream(head, encoder, manifests[args.split], store,
                                 corpus, cache={})
    out_csv = run / f"eval-{args.split}.csv"
    if task == "volume":
        print(f"task {task} [{args.split}]  ACC {report.accuracy:.4f}  "
              f"PR {report.precision:.4f}  RE {report.recall:.4f}")
        with open(out_csv, "w") as f:
            f.write("acc,pr,re,n\n")
            f.write(f"{report.accuracy:.6f},{report.precision:.6f},"
                    f"{report.recall:.6f},{report.n}\n")
    else:
        corr = ("nan" if report.pearson_corr is None
                else f"{report.pearson_corr:.4f}")
        unit = "s" if task == "rt60" else "dB"
        print(f"task {task} [{args.split}]  RMSE {report.rmse:.4f} {unit}  "
              f"CORR {corr}  BIAS {report.bias:+.4f} {unit}")
        with open(out_csv, "w") as f:
            f.write("rmse,corr,bias,n\n")
            f.write(f"{report.rmse:.6f},{corr},{report.bias:.6f},"
                    f"{report.n}\n")
    print(f"wrote {out_csv}")
    return 0


def cmd_export_embeddings(args) -> int:
    encoder = _encoder_from_run(args.encoder)
    manifests, meta = load_manifests(args.dataset)
    store = _load_store(args.rirs)
    corpus = _corpus_from_meta(meta)
    path = export_embeddings(encoder, manifests[args.split], store, corpus,
                             args.out, cache={})
    print(f"wrote {len(manifests[args.split].entries)} embeddings to {path}")
    return 0


def cmd_grid(args) -> int:
    up_manifests, up_meta = load_manifests(args.dataset_upstream)
    down_manifests, down_meta = load_manifests(args.dataset_downstream)
    cfg = _config_for(args, dataset_meta=up_meta)
    out = _prepare_out(args.out, args.force)
    cfg.echo(out)
    store_up = _load_store(args.rirs_upstream)
    store_down = _load_store(args.rirs_downstream)
    corpus = _corpus_from_meta(up_meta)
    strategies = [STRATEGY_FLAGS[s] for s in args.strategies]
    cells = run_experiment_grid(
        strategies, args.taus, args.tasks, store_up, up_manifests,
        store_down, down_manifests, corpus, cfg.model, cfg.train,
        out_dir=out, include_untrained_control=args.include_untrained,
        cache={})
    failed = sum(1 for c in cells if c["error"] is not None)
    print((out / "report.txt").read_text(), end="")
    print(f"grid complete: {len(cells)} cells, {failed} failed; "
          f"report at {out / 'report.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aenv",
                                description="Room-acoustic embedding toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True, config=True, force=True):
        if config:
            sp.add_argument("--config", help="JSON config file")
        if seed:
            sp.add_argument("--seed", type=int, help="master seed override")
        if force:
            sp.add_argument("--force", action="store_true",
                            help="overwrite a non-empty output directory")

    sp = sub.add_parser("gen-rirs", help="simulate a store of RIRs")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count-rooms", type=int, default=64)
    sp.add_argument("--rirs-per-room", type=int, default=2)
    sp.add_argument("--room-prefix", default="room")
    common(sp)
    sp.set_defaults(func=cmd_gen_rirs)

    sp = sub.add_parser("build-dataset", help="build split manifests")
    sp.add_argument("--rirs", required=True, help="RIR store directory")
    src = sp.add_mutually_exclusive_group(required=True)
    src.add_argument("--speech-dir", help="directory of 16 kHz mono WAVs")
    src.add_argument("--synthetic", action="store_true",
                     help="use the synthetic source generator")
    sp.add_argument("--synthetic-count", type=int, default=256,
                    help="number of synthetic segments")
    sp.add_argument("--role", choices=("upstream", "downstream"),
                    required=True)
    sp.add_argument("--upstream", help="upstream dataset dir (for room "
                                       "disjointness when --role downstream)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=float, default=None,
                    help="shrink all dataset sizes by this fraction")
    sp.add_argument("--segment-s", type=float, default=None,
                    help="source segment duration in seconds")
    common(sp)
    sp.set_defaults(func=cmd_build_dataset)

    sp = sub.add_parser("train-upstream", help="contrastive encoder training")
    sp.add_argument("--rirs", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--strategy", choices=sorted(STRATEGY_FLAGS))
    sp.add_argument("--tau", type=float)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train_upstream)

    sp = sub.add_parser("train-downstream", help="train a frozen-encoder head")
    sp.add_argument("--encoder", required=True, help="upstream best.ckpt")
    sp.add_argument("--task", choices=("rt60", "c50", "volume"),
                    required=True)
    sp.add_argument("--rirs", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_train_downstream)

    sp = sub.add_parser("evaluate", help="metrics for a downstream run")
    sp.add_argument("--run", required=True, help="downstream run directory")
    sp.add_argument("--rirs", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"),
                    default="test")
    common(sp, force=False)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("export-embeddings", help="dump embeddings to CSV")
    sp.add_argument("--encoder", required=True)
    sp.add_argument("--rirs", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--split", choices=("train", "val", "test"),
                    default="test")
    sp.add_argument("--out", required=True)
    common(sp, force=False)
    sp.set_defaults(func=cmd_export_embeddings)

    sp = sub.add_parser("grid", help="strategies x temperatures x tasks")
    sp.add_argument("--rirs-upstream", required=True)
    sp.add_argument("--dataset-upstream", required=True)
    sp.add_argument("--rirs-downstream", required=True)
    sp.add_argument("--dataset-downstream", required=True)
    sp.add_argument("--strategies", nargs="+", default=sorted(STRATEGY_FLAGS),
                    choices=sorted(STRATEGY_FLAGS))
    sp.add_argument("--taus", nargs="+", type=float,
                    default=[0.01, 0.1, 1.0])
    sp.add_argument("--tasks", nargs="+", default=["rt60", "c50", "volume"])
    sp.add_argument("--include-untrained", action="store_true")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_grid)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # unexpected runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}",
              file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
