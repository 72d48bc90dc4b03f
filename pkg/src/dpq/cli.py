"""Command-line entry point: train, inspect, gradcheck, bench.

Every run resolves its configuration up front, writes it as a flat
key=value file next to the outputs, and is reproducible bit-for-bit from
that file (single-threaded mode). A lock file guards the run directory
against concurrent writers.

Exit codes: 0 success, 2 usage/config errors, 3 training divergence,
4 corrupt or unsupported files, 5 gradient-check threshold violations.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import List, Optional

import numpy as np

from .analysis import (
    code_change_rate,
    code_distribution,
    delta_series_tsv,
    export_code_table,
    histogram_tsv,
    nearest_neighbors,
    neighbors_tsv,
)
from .core import DpqConfig, build_table, compression_stats, rank_certificate
from .errors import CorruptFileError, TrainingDivergedError, UnsupportedFileError
from .storage import (
    Artifact,
    artifact_from_state,
    load_artifact,
    load_kv,
    save_artifact,
    save_kv,
    save_state_sidecar,
)
from .numerics import Rng
from .trainer import (
    ClassifierModel,
    FullEmbedding,
    QuantizedEmbedding,
    SgdOptions,
    grad_check,
    load_text_dataset,
    synthetic_corpus,
    train_classifier,
    train_reconstruction,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_CORRUPT = 4
EXIT_GRADCHECK = 5

_CKPT_RE = re.compile(r"ckpt_(\d+)\.dpq$")


@dataclass
class RunConfig:
    """Resolved settings of one training run; serialized for provenance."""

    task: str = "recon"
    n: int = 256
    d: int = 32
    k: int = 16
    d_groups: int = 8
    mode: str = "sx"
    distance: str = "dot"
    subspace_sharing: bool = False
    tau_forward: float = 0.0
    tau_backward: float = 1.0
    reg_coefficient: float = 1.0
    ema_decay: Optional[float] = None
    bn: bool = True
    bn_affine: bool = False
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5
    embedding: str = "dpq"     # classify: full | dpq
    lr: float = 0.1
    epochs: int = 10
    batch: int = 64
    momentum: float = 0.0
    shards: int = 1
    hidden: int = 32
    min_count: int = 1
    classes: int = 4
    docs: int = 10000
    doc_len: int = 20
    signal: float = 0.35
    seed: int = 0
    checkpoint_interval: int = 0
    target: str = ""
    data: str = ""

    def dpq_config(self) -> DpqConfig:
        return DpqConfig(
            n=self.n, d=self.d, k=self.k, d_groups=self.d_groups,
            mode=self.mode, distance=self.distance,
            subspace_sharing=self.subspace_sharing,
            tau_forward=self.tau_forward, tau_backward=self.tau_backward,
            reg_coefficient=self.reg_coefficient, ema_decay=self.ema_decay,
            bn=self.bn, bn_affine=self.bn_affine,
            bn_momentum=self.bn_momentum, bn_eps=self.bn_eps,
        )

    def sgd_options(self) -> SgdOptions:
        return SgdOptions(lr=self.lr, epochs=self.epochs, batch_size=self.batch,
                          seed=self.seed, momentum=self.momentum,
                          shards=self.shards)

    def to_kv(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = "" if v is None else str(v)
        return out

    @classmethod
    def from_kv(cls, kv: dict) -> "RunConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            raw = kv[f.name]
            if f.name == "ema_decay":
                kwargs[f.name] = None if raw == "" else float(raw)
            elif f.type in ("int", int):
                kwargs[f.name] = int(raw)
            elif f.type in ("float", float):
                kwargs[f.name] = float(raw)
            elif f.type in ("bool", bool):
                kwargs[f.name] = raw == "True"
            else:
                kwargs[f.name] = raw
        unknown = set(kv) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["recon", "classify"])
    p.add_argument("--n", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--d-groups", type=int, dest="d_groups")
    p.add_argument("--mode", choices=["sx", "vq"])
    p.add_argument("--distance", choices=["dot", "euclidean", "cosine"])
    p.add_argument("--subspace-sharing", action=argparse.BooleanOptionalAction,
                   dest="subspace_sharing")
    p.add_argument("--tau-forward", type=float, dest="tau_forward")
    p.add_argument("--tau-backward", type=float, dest="tau_backward")
    p.add_argument("--reg-coefficient", type=float, dest="reg_coefficient")
    p.add_argument("--ema-decay", type=float, dest="ema_decay")
    p.add_argument("--bn", action=argparse.BooleanOptionalAction)
    p.add_argument("--bn-affine", action=argparse.BooleanOptionalAction,
                   dest="bn_affine")
    p.add_argument("--bn-momentum", type=float, dest="bn_momentum")
    p.add_argument("--bn-eps", type=float, dest="bn_eps")
    p.add_argument("--embedding", choices=["full", "dpq"])
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--momentum", type=float)
    p.add_argument("--shards", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--min-count", type=int, dest="min_count")
    p.add_argument("--classes", type=int)
    p.add_argument("--docs", type=int)
    p.add_argument("--doc-len", type=int, dest="doc_len")
    p.add_argument("--signal", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", type=int, dest="checkpoint_interval")
    p.add_argument("--target", type=str)
    p.add_argument("--data", type=str)


def _resolve_run_config(args) -> RunConfig:
    if args.config:
        overridden = [
            f.name for f in fields(RunConfig)
            if getattr(args, f.name, None) is not None
        ]
        if overridden:
            raise ValueError(
                f"--config replays a saved run; drop the explicit flags "
                f"{overridden}"
            )
        return RunConfig.from_kv(load_kv(args.config))
    cfg = RunConfig()
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            setattr(cfg, f.name, v)
    if getattr(args, "seed", None) is None and "DPQ_SEED" in os.environ:
        cfg.seed = int(os.environ["DPQ_SEED"])
    return cfg


class _RunLock:
    """Exclusive lock file inside the run directory."""

    def __init__(self, out: Path):
        self.path = out / ".lock"

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ValueError(
                f"run directory {self.path.parent} is locked by another run"
            )
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)
        return False


def _write_checkpoint(out: Path, step: int, state, cfg: DpqConfig) -> None:
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    artifact = artifact_from_state(state, cfg)
    save_artifact(ckpt_dir / f"ckpt_{step:06d}.dpq", artifact)
    save_state_sidecar(ckpt_dir / f"ckpt_{step:06d}.state", state)


def cmd_train(args) -> int:
    run = _resolve_run_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _RunLock(out):
        save_kv(out / "run.cfg", run.to_kv())
        interval = run.checkpoint_interval

        if run.task == "recon":
            cfg = run.dpq_config()
            if run.target:
                target = np.load(run.target)
                if target.shape != (run.n, run.d):
                    raise ValueError(
                        f"target {run.target} has shape {target.shape}, "
                        f"expected ({run.n}, {run.d})"
                    )
            else:
                target = Rng(run.seed ^ 0x7A97).uniforms((run.n, run.d), -1.0, 1.0)

            def on_epoch(epoch, state):
                if interval > 0 and (epoch + 1) % interval == 0:
                    _write_checkpoint(out, epoch + 1, state, cfg)

            result = train_reconstruction(target, cfg, run.sgd_options(),
                                          on_epoch=on_epoch)
            save_artifact(out / "final.dpq",
                          artifact_from_state(result.state, cfg))
            report = result.report
            print(f"final mse {report.final('mse'):.6g}")
        else:
            if run.data:
                data = load_text_dataset(run.data, min_count=run.min_count)
                run.n = len(data.vocab)
            else:
                data = synthetic_corpus(
                    n_vocab=run.n, n_classes=run.classes, n_docs=run.docs,
                    doc_len=run.doc_len, signal=run.signal, seed=run.seed,
                )
            vocab_lines = [
                f"{t}\t{int(c)}" for t, c in zip(data.vocab.tokens, data.vocab.counts)
            ]
            (out / "vocab.tsv").write_text("\n".join(vocab_lines) + "\n",
                                           encoding="utf-8")
            if run.embedding == "full":
                source = FullEmbedding(run.n, run.d, seed=run.seed)
                cfg = None
            else:
                cfg = run.dpq_config()
                source = QuantizedEmbedding(cfg, seed=run.seed)
            model = ClassifierModel.build(source, run.hidden,
                                          data.num_classes, seed=run.seed)

            def on_epoch(epoch, state):
                if state is not None and interval > 0 and (epoch + 1) % interval == 0:
                    _write_checkpoint(out, epoch + 1, state, cfg)

            report = train_classifier(data, model, run.sgd_options(),
                                      on_epoch=on_epoch)
            if cfg is not None:
                save_artifact(out / "final.dpq",
                              artifact_from_state(source.state, cfg))
            print(f"final heldout accuracy {report.final('heldout_acc'):.4f}")

        (out / "report.tsv").write_text(report.to_tsv(), encoding="utf-8")
        if report.compression is not None:
            stats = report.compression
            print(f"compression ratio {stats.ratio:.2f} "
                  f"({stats.full_bits} -> {stats.compressed_bits} bits)")
        print(f"wall time {report.wall_time_s:.2f}s")
    return EXIT_OK


def _load_vocab(path: Optional[str], n: int) -> List[str]:
    if not path:
        return [str(i) for i in range(n)]
    tokens = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line:
            tokens.append(line.split("\t")[0])
    return tokens


def _artifact_config(artifact: Artifact) -> DpqConfig:
    return DpqConfig(
        n=artifact.n, d=artifact.d, k=artifact.k, d_groups=artifact.d_groups,
        mode="vq" if artifact.tied else "sx",
        distance="euclidean" if artifact.tied else "dot",
        subspace_sharing=artifact.shared,
        bn=False,
    )


def cmd_inspect(args) -> int:
    if args.what == "delta":
        ckpts = sorted(
            (int(_CKPT_RE.search(p.name).group(1)), p)
            for p in Path(args.checkpoint_dir).iterdir()
            if _CKPT_RE.search(p.name)
        )
        if len(ckpts) < 2:
            raise ValueError(
                f"need at least 2 checkpoints in {args.checkpoint_dir}"
            )
        deltas = []
        prev_step, prev = ckpts[0][0], load_artifact(ckpts[0][1])
        for step, path in ckpts[1:]:
            cur = load_artifact(path)
            deltas.append(code_change_rate(prev.codebook, cur.codebook,
                                           step_a=prev_step, step_b=step))
            prev_step, prev = step, cur
        print("\n".join(delta_series_tsv(deltas)))
        return EXIT_OK

    artifact = load_artifact(args.artifact)
    if args.what == "stats":
        stats = compression_stats(_artifact_config(artifact))
        cert = rank_certificate(artifact.codebook, artifact.values)
        print(f"n={artifact.n} d={artifact.d} k={artifact.k} "
              f"d_groups={artifact.d_groups} shared={artifact.shared} "
              f"tied={artifact.tied}")
        print(f"full_bits={stats.full_bits}")
        print(f"compressed_bits={stats.compressed_bits} "
              f"(codes={stats.code_bits}, values={stats.value_bits})")
        print(f"compression_ratio={stats.ratio:.2f}")
        print(f"rank_table={cert.rank_table} expected={cert.expected_rank} "
              f"conditions={cert.conditions} holds={cert.proposition_holds}")
    elif args.what == "hist":
        print("\n".join(histogram_tsv(code_distribution(artifact.codebook))))
    elif args.what == "codes":
        tokens = _load_vocab(args.vocab, artifact.n)
        ids = args.ids if args.ids else list(range(min(10, artifact.n)))
        if args.token:
            ids = [tokens.index(t) for t in args.token]
        print("\n".join(export_code_table(artifact.codebook, tokens, ids)))
    elif args.what == "nn":
        tokens = _load_vocab(args.vocab, artifact.n)
        if args.token:
            query = tokens.index(args.token[0])
        elif args.ids:
            query = args.ids[0]
        else:
            raise ValueError("nn needs --token or --ids")
        table = build_table(artifact.codebook, artifact.values)
        report = nearest_neighbors(table, query, args.top)
        print("\n".join(neighbors_tsv(report, tokens)))
        if report.zero_norm_excluded:
            print(f"# excluded {report.zero_norm_excluded} zero-norm rows",
                  file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    sx_threshold = 1e-5
    reg_threshold = 1e-6
    seeds = list(range(args.seeds))
    worst_sx = 0.0
    worst_reg = 0.0
    identity_ok = True
    failed = False
    modes = [args.mode] if args.mode else ["sx", "vq"]
    for mode in modes:
        if mode == "sx":
            for distance in ("dot", "euclidean", "cosine"):
                for bn in (False, True):
                    cfg = DpqConfig(
                        n=args.n, d=args.d, k=args.k, d_groups=args.d_groups,
                        mode="sx", distance=distance, bn=bn,
                    )
                    for seed in seeds:
                        rep = grad_check(cfg, seed)
                        worst_sx = max(worst_sx, rep.max_rel_err_sx)
        else:
            cfg = DpqConfig(
                n=args.n, d=args.d, k=args.k, d_groups=args.d_groups,
                mode="vq", distance="euclidean", reg_coefficient=1.0, bn=True,
            )
            for seed in seeds:
                rep = grad_check(cfg, seed)
                identity_ok = identity_ok and rep.vq_identity_ok
                worst_reg = max(worst_reg, rep.reg_grad_rel_err)
    if "sx" in modes:
        print(f"sx max relative error {worst_sx:.3e} (threshold {sx_threshold:.0e})")
        failed = failed or worst_sx >= sx_threshold
    if "vq" in modes:
        print(f"vq straight-through identity: {'ok' if identity_ok else 'BROKEN'}")
        print(f"regularizer max relative error {worst_reg:.3e} "
              f"(threshold {reg_threshold:.0e})")
        failed = failed or not identity_ok or worst_reg >= reg_threshold
    return EXIT_GRADCHECK if failed else EXIT_OK


def cmd_bench(args) -> int:
    from .core import init_state, build_codebook
    from .autograd import sx_backward, sx_forward, vq_backward, vq_forward

    cfg = DpqConfig(n=args.n, d=args.d, k=args.k, d_groups=args.d_groups,
                    mode=args.mode or "sx",
                    distance="euclidean" if args.mode == "vq" else "dot")
    state = init_state(cfg, args.seed if args.seed is not None else 0)
    batch = np.arange(min(args.batch, cfg.n))
    fwd = sx_forward if cfg.mode == "sx" else vq_forward
    bwd = sx_backward if cfg.mode == "sx" else vq_backward
    upstream = np.ones((len(batch), cfg.d))

    def timeit(label, fn):
        start = time.perf_counter()
        for _ in range(args.iters):
            fn()
        elapsed = (time.perf_counter() - start) / args.iters
        print(f"{label}\t{elapsed * 1e3:.3f} ms")

    timeit("discretize_all", lambda: build_codebook(state, cfg))
    timeit("forward", lambda: fwd(state, cfg, batch))
    trace = fwd(state, cfg, batch)
    timeit("backward", lambda: bwd(trace, upstream))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dpq",
        description="Train, store and inspect product-quantized embeddings.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", allow_abbrev=False,
                             help="run a reconstruction or classification task")
    _add_run_flags(p_train)
    p_train.add_argument("--config", type=str,
                         help="replay a saved run.cfg (exclusive with flags)")
    p_train.add_argument("--out", type=str, required=True)
    p_train.set_defaults(fn=cmd_train)

    p_inspect = sub.add_parser("inspect", allow_abbrev=False,
                               help="analyze a stored artifact")
    p_inspect.add_argument("what",
                           choices=["stats", "codes", "hist", "delta", "nn"])
    p_inspect.add_argument("--artifact", type=str)
    p_inspect.add_argument("--checkpoint-dir", type=str, dest="checkpoint_dir")
    p_inspect.add_argument("--vocab", type=str)
    p_inspect.add_argument("--token", type=str, nargs="+")
    p_inspect.add_argument("--ids", type=int, nargs="+")
    p_inspect.add_argument("--top", type=int, default=10)
    p_inspect.set_defaults(fn=cmd_inspect)

    p_grad = sub.add_parser("gradcheck", allow_abbrev=False,
                            help="verify analytic gradients against the oracle")
    p_grad.add_argument("--mode", choices=["sx", "vq"])
    p_grad.add_argument("--seeds", type=int, default=5)
    p_grad.add_argument("--n", type=int, default=8)
    p_grad.add_argument("--d", type=int, default=4)
    p_grad.add_argument("--k", type=int, default=3)
    p_grad.add_argument("--d-groups", type=int, dest="d_groups", default=2)
    p_grad.set_defaults(fn=cmd_gradcheck)

    p_bench = sub.add_parser("bench", allow_abbrev=False,
                             help="time the core operations")
    p_bench.add_argument("--mode", choices=["sx", "vq"])
    p_bench.add_argument("--n", type=int, default=4096)
    p_bench.add_argument("--d", type=int, default=64)
    p_bench.add_argument("--k", type=int, default=16)
    p_bench.add_argument("--d-groups", type=int, dest="d_groups", default=8)
    p_bench.add_argument("--batch", type=int, default=256)
    p_bench.add_argument("--iters", type=int, default=10)
    p_bench.add_argument("--seed", type=int)
    p_bench.set_defaults(fn=cmd_bench)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CorruptFileError, UnsupportedFileError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CORRUPT


if __name__ == "__main__":
    sys.exit(main())
