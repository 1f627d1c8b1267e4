"""Command-line interface: ``im3f train``, ``im3f sweep`` and ``im3f inspect``.

Exit codes: 0 success, 1 runtime failure, 2 bad flags.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import itertools
import json
import logging
import os
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .dataio import (
    FORMATS,
    METRICS_HEADER,
    StateFileError,
    format_metrics_row,
    load_ratings,
    load_state,
    make_split,
    save_state,
)
from .gibbs import ModelConfig, run_chain
from .model import VARIANTS, Hyperparameters

log = logging.getLogger("im3f")

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
STATE = "state.im3f"
SUMMARY = "summary.csv"

# flag name -> (Hyperparameters field, parser)
HP_FLAGS = {
    "rank": ("D", int),
    "gamma": ("gamma", float),
    "beta": ("beta", float),
    "sigma2": ("sigma2", float),
    "sigma02": ("sigma0_2", float),
    "lambda0": ("lambda0", float),
    "k_user": ("K_U", int),
    "k_item": ("K_M", int),
    "alpha": ("alpha", float),
}


def _positive(kind):
    def parse(text):
        try:
            v = kind(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a {kind.__name__}, got {text!r}") from None
        if not v > 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text!r}")
        return v

    parse.__name__ = kind.__name__
    return parse


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text!r}")
    return v


def _chi0(text):
    if text == "auto":
        return text
    try:
        return float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}") from None


def _clamp(text):
    try:
        lo, hi = (float(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}") from None
    if not lo < hi:
        raise argparse.ArgumentTypeError(f"LO must be below HI, got {text!r}")
    return lo, hi


def _add_run_flags(p, data_required=True):
    g = p.add_argument_group("data")
    g.add_argument("--data", required=data_required, help="ratings file")
    g.add_argument("--format", choices=FORMATS, default="ml100k")
    g.add_argument("--split", choices=("loo", "cover"), default="loo",
                   help="leave one rating per user out, or cover every user and item in test")
    g.add_argument("--split-seed", type=_nonneg_int, default=None, help="defaults to --seed")
    m = p.add_argument_group("model")
    m.add_argument("--model", choices=VARIANTS, default="im3f")
    m.add_argument("--iters", type=_positive(int), default=100)
    m.add_argument("--burnin", type=_nonneg_int, default=None, help="defaults to iters // 5")
    m.add_argument("--seed", type=_nonneg_int, default=0)
    m.add_argument("--rank", type=_positive(int), default=10)
    m.add_argument("--gamma", type=_positive(float), default=1.0)
    m.add_argument("--beta", type=_positive(float), default=1.0)
    m.add_argument("--sigma2", type=_positive(float), default=0.5)
    m.add_argument("--sigma02", type=_positive(float), default=0.1)
    m.add_argument("--lambda0", type=_positive(float), default=10.0)
    m.add_argument("--chi0", type=_chi0, default="auto", help="'auto' uses the training mean")
    m.add_argument("--k-user", type=_positive(int), default=2)
    m.add_argument("--k-item", type=_positive(int), default=1)
    m.add_argument("--alpha", type=_positive(float), default=10.0)
    m.add_argument("--likelihood", choices=("map", "bayes", "exact"), default="map")
    m.add_argument("--clamp", type=_clamp, default=None, metavar="LO,HI",
                   help="clip predictions to a rating range")
    o = p.add_argument_group("output")
    o.add_argument("--out", required=True, help="output directory")
    o.add_argument("--timing", choices=("wall", "none"), default="wall",
                   help="'none' writes 0 in the seconds column so reruns are byte-identical")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="im3f", description="Gibbs samplers for BPMF, M3F and iM3F.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one chain and write manifest, metrics and state")
    _add_run_flags(t, data_required=False)
    t.add_argument("--from-manifest", help="rerun exactly the configuration recorded in a manifest")

    s = sub.add_parser("sweep", help="train every cell of a hyperparameter grid")
    _add_run_flags(s)
    s.add_argument("--grid", nargs="+", required=True, metavar="FLAG=V1,V2",
                   help="e.g. --grid gamma=0.1,1 beta=0.01,0.1,1")
    s.add_argument("--parallel", type=_positive(int), default=1, help="runs in flight at once")

    i = sub.add_parser("inspect", help="summarize a saved state")
    i.add_argument("--state", required=True)
    i.add_argument("--franchise", choices=("user", "item"), default=None, help="limit output to one side")
    i.add_argument("--top", type=_positive(int), default=10)
    return p


# ---------------------------------------------------------------------------
# train


def _run_settings(args) -> dict:
    """Flag values that determine a run, in manifest form."""
    return {
        "data": os.path.abspath(args.data),
        "format": args.format,
        "split": args.split,
        "split_seed": args.seed if args.split_seed is None else args.split_seed,
        "model": args.model,
        "iters": args.iters,
        "burnin": args.iters // 5 if args.burnin is None else args.burnin,
        "seed": args.seed,
        "chi0": args.chi0,
        "likelihood": args.likelihood,
        "clamp": list(args.clamp) if args.clamp else None,
        "timing": args.timing,
        "hp": {field: getattr(args, flag) for flag, (field, _) in HP_FLAGS.items()},
    }


def run_training(settings: dict, out: str, echo=print) -> dict:
    """Load, split, write the manifest, train, and write metrics and state under ``out``."""
    os.makedirs(out, exist_ok=True)
    dataset = load_ratings(settings["data"], settings["format"])
    train, test, exceptions = make_split(dataset, settings["split"], settings["split_seed"])
    chi0 = train.mean_rating() if settings["chi0"] == "auto" else float(settings["chi0"])
    hp = Hyperparameters(**settings["hp"], chi0=chi0)
    config = ModelConfig(
        variant=settings["model"], hp=hp, iters=settings["iters"], burnin=settings["burnin"],
        seed=settings["seed"], likelihood=settings["likelihood"],
        clamp=tuple(settings["clamp"]) if settings["clamp"] else None,
    )
    paths = {k: os.path.join(out, v) for k, v in (("manifest", MANIFEST), ("metrics", METRICS), ("state", STATE))}
    manifest = {
        "version": __version__,
        "settings": settings,
        "resolved": {"hp": hp.to_dict(), "burnin": config.burnin},
        "dataset": {
            "path": settings["data"], "sha256": dataset.content_hash(), "ratings": dataset.num_ratings,
            "users": dataset.num_users, "items": dataset.num_items,
        },
        "split": {"train": train.num_ratings, "test": test.num_ratings, "exceptions": len(exceptions)},
        "outputs": paths,
    }
    with open(paths["manifest"], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if exceptions:
        with open(os.path.join(out, "cover_exceptions.txt"), "w") as fh:
            fh.writelines(f"{kind}\t{i}\n" for kind, i in exceptions)

    timer = time.perf_counter if settings["timing"] == "wall" else (lambda: 0.0)
    with open(paths["metrics"], "w", newline="") as fh:
        fh.write(",".join(METRICS_HEADER) + "\n")

        def write_row(state, rec):
            fh.write(format_metrics_row(rec) + "\n")
            fh.flush()

        state, records = run_chain(train, config, test, callback=write_row, timer=timer)
    save_state(state, paths["state"], extra_meta={"dataset_sha256": dataset.content_hash()})
    last = records[-1]
    echo(
        f"final train_rmse={last.train_rmse:.6g} test_rmse={last.test_rmse:.6g} "
        f"K_U={last.k_user} K_M={last.k_item}"
    )
    return {"train_rmse": last.train_rmse, "test_rmse": last.test_rmse, "k_user": last.k_user, "k_item": last.k_item}


def _check_burnin(parser, settings):
    if settings["burnin"] >= settings["iters"]:
        parser.error(f"argument --burnin: must be below --iters ({settings['iters']}), got {settings['burnin']}")


def cmd_train(args, parser) -> int:
    if args.from_manifest:
        with open(args.from_manifest) as fh:
            settings = json.load(fh)["settings"]
    else:
        if args.data is None:
            parser.error("the following arguments are required: --data")
        settings = _run_settings(args)
    _check_burnin(parser, settings)
    run_training(settings, args.out)
    return 0


# ---------------------------------------------------------------------------
# sweep


def cell_seed(base_seed: int, cell_index: int) -> int:
    """Seed of sweep cell ``cell_index``; independent of scheduling."""
    h = hashlib.sha256(f"{base_seed}:{cell_index}".encode()).digest()
    return int.from_bytes(h[:8], "little") & (2**63 - 1)


def parse_grid(items) -> dict:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"grid entry {item!r} is not FLAG=V1,V2,...")
        key, vals = item.split("=", 1)
        flag = key.strip().lstrip("-").replace("-", "_")
        if flag in HP_FLAGS:
            kind = HP_FLAGS[flag][1]
        elif flag in ("model", "likelihood"):
            kind = str
        else:
            raise ValueError(f"grid flag {key!r} is not sweepable")
        values = [v for v in vals.split(",") if v]
        if not values:
            raise ValueError(f"grid flag {key!r} has no values")
        try:
            grid[flag] = [kind(v) for v in values]
        except ValueError:
            raise ValueError(f"grid flag {key!r}: cannot parse {vals!r} as {kind.__name__}") from None
    return grid


def _run_cell(job):
    index, settings, out = job
    try:
        res = run_training(settings, out, echo=lambda *_: None)
        return index, "ok", res, ""
    except Exception as err:  # a failed cell is reported in the summary, not raised
        return index, "failed", {}, f"{type(err).__name__}: {err}"


def cmd_sweep(args, parser) -> int:
    try:
        grid = parse_grid(args.grid)
    except ValueError as err:
        parser.error(f"argument --grid: {err}")
    base = _run_settings(args)
    _check_burnin(parser, base)
    keys = list(grid)
    cells = list(itertools.product(*(grid[k] for k in keys)))
    jobs = []
    for idx, combo in enumerate(cells):
        s = json.loads(json.dumps(base))
        for k, v in zip(keys, combo):
            if k in HP_FLAGS:
                s["hp"][HP_FLAGS[k][0]] = v
            else:
                s[k] = v
        s["seed"] = cell_seed(args.seed, idx)
        jobs.append((idx, s, os.path.join(args.out, f"cell_{idx:03d}")))
    os.makedirs(args.out, exist_ok=True)
    if args.parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    results.sort()
    failed = 0
    with open(os.path.join(args.out, SUMMARY), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell", *keys, "seed", "status", "train_rmse", "test_rmse", "k_user", "k_item", "error"])
        for (idx, status, res, err), combo, job in zip(results, cells, jobs):
            failed += status != "ok"
            w.writerow([
                idx, *combo, job[1]["seed"], status,
                *("%.6g" % res[k] if status == "ok" else "" for k in ("train_rmse", "test_rmse")),
                *(res[k] if status == "ok" else "" for k in ("k_user", "k_item")), err,
            ])
            print(f"cell {idx} {dict(zip(keys, combo))}: {status}"
                  + (f" test_rmse={res['test_rmse']:.6g} K_U={res['k_user']} K_M={res['k_item']}" if status == "ok" else f" {err}"))
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# inspect


def _histogram(values, width=40):
    if len(values) == 0:
        return ["    (none)"]
    top = max(values)
    return [f"    {i:4d} {v:8d} {'#' * max(1, round(width * v / top))}" for i, v in enumerate(values)]


def _top_biases(name, table, top, row_label, col_labels):
    lines = [f"  largest |{name}|:"]
    if table.size == 0:
        return lines + ["    (none)"]
    flat = np.argsort(-np.abs(table), axis=None, kind="stable")[:top]
    for f in flat:
        r, c = np.unravel_index(f, table.shape)
        lines.append(f"    {row_label} {r:6d} topic {col_labels[c]:4d} {table[r, c]: .6g}")
    return lines


def inspect_lines(state, franchise=None, top=10) -> list[str]:
    out = [f"variant: {state.variant}", f"likelihood: {state.likelihood}", f"iteration: {state.iteration}"]
    if state.variant == "bpmf":
        out.append("K_U: n/a")
        out.append("K_M: n/a")
        return out
    ku, km = state.topic_counts()
    out += [f"K_U: {ku}", f"K_M: {km}"]
    sides = ("user", "item") if franchise is None else (franchise,)
    for side in sides:
        table = state.bias.d if side == "user" else state.bias.c
        row_label = "item" if side == "user" else "user"
        if state.variant == "im3f":
            fr = state.user_fr if side == "user" else state.item_fr
            counts = fr.table_counts_by_dish()
            slots = fr.live_slots()
            labels = [int(x) for x in fr.dish_labels()]
            custs = [fr.dish_stats(k)[1] for k in slots]
            out.append(f"{side} franchise: {fr.dish_count()} dishes, {fr.num_tables()} tables "
                       f"(sum over dishes {int(np.sum(counts))}), {fr.seated()} customers")
            out.append("  tables per dish:")
            out += _histogram([int(c) for c in counts])
            out.append("  customers per dish:")
            out += _histogram([int(c) for c in custs])
        else:
            a = state.assignments
            n = a.n_user if side == "user" else a.n_item
            labels = list(range(n.shape[1]))
            out.append(f"{side} topics: {n.shape[1]} (fixed)")
            out.append("  ratings per topic:")
            out += _histogram([int(c) for c in n.sum(axis=0)])
        out += _top_biases("d" if side == "user" else "c", table, top, row_label, labels)
    return out


def cmd_inspect(args, parser) -> int:
    state = load_state(args.state)
    if args.franchise and state.variant == "bpmf":
        print("note: bpmf has no topics; --franchise ignored", file=sys.stderr)
    print("\n".join(inspect_lines(state, args.franchise, args.top)))
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(name)s %(message)s"
    )
    sub = parser._subparsers._group_actions[0].choices[args.command]
    try:
        return COMMANDS[args.command](args, sub)
    except SystemExit:
        raise
    except (OSError, ValueError, StateFileError, RuntimeError, FloatingPointError, AssertionError) as err:
        print(f"im3f {args.command}: error: {err}", file=sys.stderr)
        if args.verbose:
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
