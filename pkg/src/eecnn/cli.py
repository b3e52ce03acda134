"""Command line: ``eecnn <subcommand> [options]``.

Exit codes: 0 success, 1 usage error or bad option value, 2 unreadable or malformed file.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path


from . import graph as G
from .bench import TARGETS, BenchStats, benchmark_all
from .cascade import CascadeConfig, calibrate_exit_threshold, classify_patch_cascade, expected_cost, process_frame
from .data import read_dataset, split_dataset, write_dataset
from .errors import FormatError, UsageError
from .losses import LossWeights
from .metrics import evaluate
from .synth import generate_synthetic
from .train import TrainConfig, train_early_exit, train_main, write_history_csv
from .weights import load_weights, save_weights

log = logging.getLogger("eecnn")


class _UsageExit(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise _UsageExit(f"{self.prog}: error: {message}")


def read_config(path: str | None) -> dict[str, str]:
    """Parse a ``key=value`` text file; blank lines and ``#`` comments are skipped."""
    if not path:
        return {}
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _settings(args) -> dict:
    s = read_config(args.config)
    for key in ("seed", "tau_ee", "tau_detect", "tau_accept", "wfp", "wfn", "gamma", "epochs", "batch"):
        v = getattr(args, key, None)
        if v is not None:
            s[key] = v
    if "batch" in s:
        s["batch_size"] = s["batch"]
    return s


def _cascade_cfg(s: dict) -> CascadeConfig:
    return CascadeConfig(
        float(s.get("tau_ee", 0.1)), float(s.get("tau_detect", 0.9)), float(s.get("tau_accept", 0.5))
    )


def _main_weights(s: dict) -> LossWeights:
    return LossWeights(
        w_fp=float(s.get("wfp", 1000.0)), w_fn=float(s.get("wfn_main", 1.0)), gamma=float(s.get("gamma", 2.0))
    )


def _ee_weights(s: dict) -> LossWeights:
    return LossWeights.early_exit(w_fn=float(s.get("wfn", 100.0)), gamma=float(s.get("gamma", 2.0)))


def _train_data(args, s):
    data = read_dataset(args.data)
    if args.val:
        return data, read_dataset(args.val)
    return split_dataset(data, float(s.get("train_fraction", 0.7)), int(s.get("seed", 0)))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args, s) -> None:
    data = generate_synthetic(args.n, args.pos, int(s.get("seed", 0)))
    write_dataset(data, args.out)
    print(f"wrote {len(data)} patches ({100 * data.positive_fraction:.2f}% balls) to {args.out}")


def cmd_split_data(args, s) -> None:
    train, val = split_dataset(read_dataset(args.data), args.train_fraction, int(s.get("seed", 0)))
    write_dataset(train, args.train_out)
    write_dataset(val, args.val_out)
    print(f"train={len(train)} val={len(val)}")


def cmd_train(args, s) -> None:
    train, val = _train_data(args, s)
    cfg = TrainConfig.from_mapping(s)
    g = load_weights(args.init) if args.init else G.build_ball_cnn(int(s.get("seed", 0)))
    g, history = train_main(g, train, val, cfg, _main_weights(s))
    save_weights(g, args.out)
    if args.history:
        write_history_csv(history, args.history)
    last = history[-1]
    print(f"epochs={len(history)} val_loss={last['val_loss']:.5f} val_precision={last['val_precision']:.4f} "
          f"val_recall={last['val_recall']:.4f}")


def cmd_attach_ee(args, s) -> None:
    g = load_weights(args.model)
    before = G.total_params(g)
    g = G.attach_early_exit(g, seed=int(s.get("seed", 1)))
    save_weights(g, args.out)
    after = G.total_params(g)
    print(f"params {before} -> {after} (+{after - before}, +{100 * (after - before) / before:.2f}%)")


def cmd_train_ee(args, s) -> None:
    train, val = _train_data(args, s)
    g = G.freeze_trunk(load_weights(args.model))
    cfg = TrainConfig.from_mapping(s)
    g, history = train_early_exit(g, train, val, cfg, _ee_weights(s))
    save_weights(g, args.out)
    if args.history:
        write_history_csv(history, args.history)
    cal = calibrate_exit_threshold(G.split_at_exit(g), val, args.max_recall_drop, float(s.get("tau_accept", 0.5)))
    print(f"tau_ee={cal.tau_ee:.6g} exit_rate={cal.exit_rate:.4f} recall_drop_pp={cal.recall_drop_pp:.3f}")


def cmd_split_model(args, s) -> None:
    split = G.split_at_exit(load_weights(args.model))
    save_weights(split.head, args.head_out)
    save_weights(split.tail, args.tail_out)
    print(f"head params={G.total_params(split.head)} macs={G.total_macs(split.head)}; "
          f"tail params={G.total_params(split.tail)} macs={G.total_macs(split.tail)}")


def cmd_eval(args, s) -> None:
    g = load_weights(args.model)
    data = read_dataset(args.data)
    cfg = _cascade_cfg(s)
    model = G.split_at_exit(g) if args.cascade else g
    rep = evaluate(model, data, cfg)
    print(rep.text())
    print(rep.key_values())


def cmd_bench(args, s) -> None:
    g = load_weights(args.model)
    if g.ee_tap is None:
        g = G.attach_early_exit(g)
    data = read_dataset(args.data)
    res = benchmark_all(g, data.pixels[: args.patches], args.runs, TARGETS, _cascade_cfg(s))
    print("target        mean[ms]  std[ms]  min[ms]  max[ms]")
    for name, r in res.items():
        st = r if isinstance(r, BenchStats) else r.stats
        print(f"{name:12s}  {st.row()}")
    c = res["cascade"]
    print(f"cascade exit_rate={c.exit_rate:.4f} predicted_mean={c.predicted_mean:.4f}ms measured_mean={c.stats.mean:.4f}ms")


def cmd_infer(args, s) -> None:
    g = load_weights(args.model)
    split = G.split_at_exit(g)
    cfg = _cascade_cfg(s)
    data = read_dataset(args.data)
    if args.index is not None:
        d = classify_patch_cascade(split, data.pixels[args.index], cfg)
        print(f"is_ball={int(d.is_ball)} exited_early={int(d.exited_early)} ee_confidence={d.ee_confidence:.6f} "
              f"confidence={'' if d.confidence is None else f'{d.confidence:.6f}'} "
              f"center={'' if d.center is None else f'{d.center[0]:.3f},{d.center[1]:.3f}'}")
        return
    res = process_frame(split, list(data.pixels), cfg)
    print(f"ball_index={'' if res.ball_index is None else res.ball_index} patches_processed={res.patches_processed} "
          f"ee_trigger_count={res.ee_trigger_count} stopped_early={int(res.stopped_early)}")
    if res.decision is not None:
        d = res.decision
        print(f"confidence={d.confidence:.6f} center={d.center[0]:.3f},{d.center[1]:.3f}")


def cmd_cost(args, s) -> None:
    t = expected_cost(args.p_exit, args.t_head, args.t_full_ee)
    print(f"expected={t:.4f}")
    for name, base in (("full_ee", args.t_full_ee), ("full_cnn", args.t_full_cnn)):
        if base:
            print(f"change_vs_{name}={100 * (t - base) / base:.2f}%")


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--seed", type=int)
    shared.add_argument("--config", help="key=value settings file")
    shared.add_argument("--tau-ee", dest="tau_ee", type=float)
    shared.add_argument("--tau-detect", dest="tau_detect", type=float)
    shared.add_argument("--tau-accept", dest="tau_accept", type=float)
    shared.add_argument("--wfp", type=float)
    shared.add_argument("--wfn", type=float)
    shared.add_argument("--gamma", type=float)
    shared.add_argument("--epochs", type=int)
    shared.add_argument("--batch", type=int)
    shared.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="eecnn", description="Early-exit ball detection CNN toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    q = sub.add_parser("gen-data", parents=[shared], help="generate a synthetic PTCH dataset")
    q.add_argument("--n", type=int, required=True)
    q.add_argument("--pos", type=float, default=0.43)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_gen_data)

    q = sub.add_parser("split-data", parents=[shared], help="stratified train/validation split")
    q.add_argument("--data", required=True)
    q.add_argument("--train-fraction", type=float, default=0.7)
    q.add_argument("--train-out", required=True)
    q.add_argument("--val-out", required=True)
    q.set_defaults(func=cmd_split_data)

    for name, func, helptext in (("train", cmd_train, "train the main network"),
                                 ("train-ee", cmd_train_ee, "train the early exit on a frozen trunk")):
        q = sub.add_parser(name, parents=[shared], help=helptext)
        q.add_argument("--data", required=True)
        q.add_argument("--val", help="validation set; default splits --data 70/30")
        q.add_argument("--out", required=True)
        q.add_argument("--history", help="write per-epoch CSV here")
        if name == "train":
            q.add_argument("--init", help="start from these weights")
        else:
            q.add_argument("--model", required=True)
            q.add_argument("--max-recall-drop", type=float, default=1.0, help="percentage points")
        q.set_defaults(func=func)

    q = sub.add_parser("attach-ee", parents=[shared], help="add the early-exit branch")
    q.add_argument("--model", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_attach_ee)

    q = sub.add_parser("split-model", parents=[shared], help="write head and tail models")
    q.add_argument("--model", required=True)
    q.add_argument("--head-out", required=True)
    q.add_argument("--tail-out", required=True)
    q.set_defaults(func=cmd_split_model)

    q = sub.add_parser("eval", parents=[shared], help="confusion matrix and center deviation")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--cascade", action="store_true", help="evaluate the early-exit cascade")
    q.set_defaults(func=cmd_eval)

    q = sub.add_parser("bench", parents=[shared], help="per-patch timing on this host")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--runs", type=int, default=1000)
    q.add_argument("--patches", type=int, default=256)
    q.set_defaults(func=cmd_bench)

    q = sub.add_parser("infer", parents=[shared], help="classify one patch or a frame of hypotheses")
    q.add_argument("--model", required=True)
    q.add_argument("--data", required=True, help="PTCH file; a frame is its ordered record list")
    q.add_argument("--index", type=int, help="classify only this record")
    q.set_defaults(func=cmd_infer)

    q = sub.add_parser("cost", parents=[shared], help="expected per-patch time of the cascade")
    q.add_argument("--p-exit", type=float, required=True)
    q.add_argument("--t-head", type=float, required=True)
    q.add_argument("--t-full-ee", type=float, required=True)
    q.add_argument("--t-full-cnn", type=float)
    q.set_defaults(func=cmd_cost)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageExit as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args, _settings(args))
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ValueError) as exc:  # ParameterError included: a bad option value
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
