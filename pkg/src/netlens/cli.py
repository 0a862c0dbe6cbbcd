"""``netlens`` command line: one executable, one subcommand per analysis.

Exit codes: 0 success, 1 contract/format/I-O errors, 2 numeric failures.
Every subcommand that takes ``--out`` also writes ``run_manifest.json``
(subcommand, resolved options, input digests, seed, versions).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from netlens import __version__, classify, plotting, robustness, spectra, xai
from netlens.errors import ContractError, NetlensError, NumericError
from netlens.fsutil import atomic_write_text, tree_digest, write_json
from netlens.network import load_network, forward, make_synthetic_network, softmax
from netlens.npyio import read_npy, write_npy
from netlens.prng import SplitMix64, derive_seed
from netlens.relevance import explain

SUBCOMMANDS = ("infer", "explain", "spectra", "xai-eval", "distort", "robustness", "auc", "fixtures")
SPECTRA_KINDS = ("relu", "add")
_UNRECORDED = {"func", "out", "config", "command", "net", "images", "labels", "heatmaps", "masks", "pred", "external"}


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def thread_count() -> int:
    raw = os.environ.get("NETLENS_THREADS", "")
    try:
        return max(1, int(raw)) if raw else min(8, os.cpu_count() or 1)
    except ValueError:
        raise ContractError(f"NETLENS_THREADS must be an integer, got {raw!r}") from None


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    return [int(t) for t in _csv_list(text)]


def _severities(text: str | None) -> list[int]:
    if text is None:
        return list(robustness.SEVERITIES)
    sevs = _int_list(text)
    for s in sevs:
        if s not in robustness.SEVERITIES:
            raise ContractError(f"severity {s} outside 1..5")
    return sevs


def _kinds(text: str | None) -> list[str]:
    kinds = _csv_list(text) if text else list(robustness.KINDS)
    for k in kinds:
        if k not in robustness.KINDS:
            raise ContractError(f"unknown distortion {k!r}; expected one of {robustness.KINDS}")
    return kinds


def load_images(directory) -> tuple[list[str], np.ndarray]:
    """All ``*.npy`` images in a directory, sorted by name, as an (N, C, H, W) batch."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"missing image directory {directory}")
    files = sorted(directory.glob("*.npy"))
    if not files:
        raise ContractError(f"no .npy images in {directory}")
    imgs = []
    for f in files:
        img = read_npy(f).astype(np.float64)
        if img.ndim != 3:
            raise ContractError(f"{f}: image must be (C, H, W), got {img.shape}")
        if img.min() < 0.0 or img.max() > 1.0:
            raise ContractError(f"{f}: image values must lie in [0, 1]")
        imgs.append(img)
    shapes = {i.shape for i in imgs}
    if len(shapes) != 1:
        raise ContractError(f"images in {directory} differ in shape: {sorted(shapes)}")
    return [f.stem for f in files], np.stack(imgs)


def write_run_manifest(out: Path, args, inputs: dict[str, str | None], extra: dict | None = None):
    # input paths are recorded by digest only, so outputs do not depend on where inputs live
    options = {k: v for k, v in vars(args).items() if k not in _UNRECORDED}
    doc = {
        "subcommand": args.command,
        "options": options,
        "seed": getattr(args, "seed", None),
        "inputs": {name: {"name": Path(p).name, "sha256": tree_digest(p)} for name, p in inputs.items() if p},
        "versions": {
            "netlens": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "distortion_table": robustness.TABLE_VERSION,
    }
    if extra:
        doc.update(extra)
    write_json(out / "run_manifest.json", doc)


# ---------------------------------------------------------------- subcommands

def cmd_fixtures(args) -> None:
    out = Path(args.out)
    c, size = 3, args.size
    nets = {}
    for label in ("net_a", "net_b"):
        nets[label], _ = make_synthetic_network(
            derive_seed(args.seed, label), args.depth, args.channels, out / label,
            input_shape=(c, size, size), zero_bias=args.zero_bias, residual=args.residual,
        )
    rng = SplitMix64(derive_seed(args.seed, "images"))
    index, labels = {}, []
    for i in range(args.count):
        image_id = f"img_{i:03d}"
        masks = _synthetic_masks(rng, size)
        base = 0.25 + 0.2 * rng.uniform(c * size * size).reshape(c, size, size)
        bright = masks["hard_exudates"] * 0.4 - masks["haemorrhages"] * 0.15 - masks["microaneurysms"] * 0.1
        img = np.clip(base + bright[None], 0.0, 1.0)
        write_npy(img, out / "images" / f"{image_id}.npy")
        masks["total"] = xai.total_mask(masks)
        index[image_id] = {}
        for lesion, m in masks.items():
            ref = f"{image_id}_{lesion}.npy"
            write_npy(m, out / "masks" / ref)
            index[image_id][lesion] = ref
        labels.append((image_id, int(rng.uniform(1)[0] * 5)))
    write_json(out / "masks" / "index.json", index)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id", "grade"])
    w.writerows(labels)
    atomic_write_text(out / "labels.csv", buf.getvalue())
    write_run_manifest(out, args, {})


def _synthetic_masks(rng: SplitMix64, size: int) -> dict[str, np.ndarray]:
    yy, xx = np.mgrid[:size, :size]
    masks = {}
    for lesion, (count, radius) in {"microaneurysms": (3, 0.6), "haemorrhages": (2, 1.6), "hard_exudates": (2, 2.4)}.items():
        m = np.zeros((size, size), np.float32)
        for _ in range(count):
            cy, cx = rng.uniform(2) * (size - 1)
            m[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2 + 0.5] = 1.0
        if not m.any():
            m[int(rng.uniform(1)[0] * size), int(rng.uniform(1)[0] * size)] = 1.0
        masks[lesion] = m
    return masks


def _read_labels(path) -> dict[str, int]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing labels file {path}")
    with path.open(newline="") as fh:
        return {row["image_id"]: int(row["grade"]) for row in csv.DictReader(fh)}


def cmd_infer(args) -> None:
    net = load_network(args.net)
    ids, batch = load_images(args.images)
    grades = _read_labels(args.labels) if args.labels else {}
    logits, _ = forward(net, batch)
    probs = softmax(logits)
    out = Path(args.out)
    write_npy(logits, out / "logits.npy")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image_id"] + [f"p{k}" for k in range(net.classes)] + ["grade"])
    for image_id, p in zip(ids, probs):
        g = grades.get(image_id)
        w.writerow([image_id] + [repr(float(v)) for v in p] + ["" if g is None else g])
    atomic_write_text(out / "predictions.csv", buf.getvalue())
    write_run_manifest(out, args, {"net": Path(args.net).parent, "images": args.images, "labels": args.labels})


def cmd_explain(args) -> None:
    net = load_network(args.net)
    ids, batch = load_images(args.images)
    out = Path(args.out)
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        maps = list(pool.map(lambda img: explain(net, img, args.target, args.seed_mode), batch))
    for image_id, rmap in zip(ids, maps):
        write_npy(rmap.input, out / f"{image_id}.npy")
        write_json(out / f"{image_id}.json", {
            "target_class": rmap.target_class,
            "seed_mode": rmap.seed_mode,
            "seed_value": rmap.seed_value,
            "conservation_gap": rmap.conservation_gap,
        })
    if not args.no_figures:
        k = min(6, len(ids))
        fig = plotting.plot_heatmaps(list(batch[:k]), [xai.pool(m.input, args.pooling) for m in maps[:k]], ids[:k])
        plotting.save_figure(fig, out / "figures" / "heatmaps.png")
    write_run_manifest(out, args, {"net": Path(args.net).parent, "images": args.images})


def cmd_spectra(args) -> None:
    net = load_network(args.net)
    _, batch = load_images(args.images)
    _, trace = forward(net, batch, trace=True)
    layers = _csv_list(args.layers) if args.layers else [l.name for l in net.layers if l.kind in SPECTRA_KINDS]
    out = Path(args.out)
    report, kappas = [], []
    for name in layers:
        spec = spectra.layer_spectrum(trace, name, centered=not args.uncentered)
        eig_ref = f"eigenvalues/{name}.npy"
        write_npy(spec.eigenvalues, out / eig_ref)
        entry = {"layer": name, "d": spec.d, "m": spec.m, "eigenvalues_path": eig_ref}
        try:
            entry["kappa"] = spectra.condition_number(spec)
        except NumericError as exc:
            entry["kappa"], entry["kappa_error"] = None, str(exc)
        positive = spec.eigenvalues[spec.eigenvalues > spectra.EIGEN_FLOOR]
        try:
            fit = spectra.fit_pareto(positive)
            entry["pareto"] = {"alpha": fit.alpha, "xm": fit.xm, "ks": fit.ks_statistic, "n": fit.n}
            best = spectra.fit_best_distribution(positive)
            entry["best_fit"] = {
                "family": best.best.family, "params": best.best.params, "ks": best.best.ks_statistic,
                "low_confidence": best.low_confidence,
            }
        except (ContractError, NumericError) as exc:
            entry["pareto"], entry["best_fit"], entry["fit_error"] = None, None, str(exc)
        report.append(entry)
        kappas.append(entry["kappa"])
    write_json(out / "spectra.json", {"centered": not args.uncentered, "layers": report})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer_index", "kappa"])
    for i, k in enumerate(kappas):
        w.writerow([i, "" if k is None else repr(k)])
    atomic_write_text(out / "kappa.csv", buf.getvalue())
    if not args.no_figures and layers:
        plotting.save_figure(plotting.plot_condition_numbers(layers, kappas), out / "figures" / "condition_number.png")
        first = spectra.layer_spectrum(trace, layers[0], centered=not args.uncentered)
        edges, masses = spectra.symmetrize_density(first, args.bins)
        plotting.save_figure(plotting.plot_eigen_density(edges, masses, layers[0]),
                             out / "figures" / f"density_{layers[0]}.png")
    write_run_manifest(out, args, {"net": Path(args.net).parent, "images": args.images})


def load_heatmaps(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"missing heatmap directory {directory}")
    return {f.stem: read_npy(f).astype(np.float64) for f in sorted(directory.glob("*.npy"))}


def cmd_xai_eval(args) -> None:
    masks = xai.load_mask_index(args.masks)
    heatmaps = load_heatmaps(args.heatmaps)
    poolings = _csv_list(args.pooling) if args.pooling else list(xai.POOLINGS)
    lesions = _csv_list(args.lesions) if args.lesions else list(xai.LESIONS)
    table = xai.score_set(heatmaps, masks, poolings, lesions, method=args.method)
    if args.trials:
        channels = next(iter(heatmaps.values())).shape[0] if heatmaps else 3
        table.rows.extend(xai.random_table(masks, poolings, lesions, args.trials, args.seed, channels).rows)
    out = Path(args.out)
    atomic_write_text(out / "scores.csv", table.to_csv())
    atomic_write_text(out / "scores.json", table.to_json())
    if not args.no_figures:
        for metric in xai.METRICS:
            plotting.save_figure(plotting.plot_score_table(table, metric), out / "figures" / f"{metric.lower()}.png")
    write_run_manifest(out, args, {"heatmaps": args.heatmaps, "masks": Path(args.masks).parent})


def cmd_distort(args) -> None:
    ids, batch = load_images(args.images)
    kinds, sevs = _kinds(args.kinds), _severities(args.severity)
    out = Path(args.out)
    jobs = [(k, s) for k in kinds for s in sevs]
    with ThreadPoolExecutor(max_workers=thread_count()) as pool:
        results = list(pool.map(lambda ks: robustness.distort_batch(batch, ks[0], ks[1], args.seed), jobs))
    for (kind, sev), distorted in zip(jobs, results):
        for image_id, img in zip(ids, distorted):
            write_npy(img, out / kind / str(sev) / f"{image_id}.npy")
    write_run_manifest(out, args, {"images": args.images})


def cmd_robustness(args) -> None:
    if not args.net or len(args.net) != 2:
        raise UsageError("robustness needs exactly two --net manifests (model A, then model B)")
    labels = tuple(_csv_list(args.model_labels)) if args.model_labels else ("A", "B")
    if len(labels) != 2:
        raise ContractError("--model-labels takes two comma-separated labels")
    net_a, net_b = load_network(args.net[0]), load_network(args.net[1])
    _, batch = load_images(args.images)
    grid = robustness.softmax_delta_grid(net_a, net_b, batch, _kinds(args.kinds), _severities(args.severity),
                                         args.seed, labels)
    if args.external:
        ext = robustness.grid_from_directory(net_a, net_b, args.external, labels)
        grid.cells.update(ext.cells)
    out = Path(args.out)
    atomic_write_text(out / "grid.csv", grid.to_csv())
    atomic_write_text(out / "grid.json", grid.to_json())
    if not args.no_figures and grid.cells:
        plotting.save_figure(plotting.plot_robustness_grid(grid), out / "figures" / "robustness.png")
    write_run_manifest(out, args, {
        "net_a": Path(args.net[0]).parent, "net_b": Path(args.net[1]).parent,
        "images": args.images, "external": args.external,
    })


def cmd_auc(args) -> None:
    healthy = tuple(_int_list(args.healthy_grades))
    for g in healthy:
        classify.to_referable(g)
    result = classify.evaluate(classify.read_predictions(args.pred), healthy)
    text = json.dumps(result, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if args.out:
        out = Path(args.out)
        atomic_write_text(out / "auc.json", text)
        write_run_manifest(out, args, {"pred": args.pred})


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="netlens", description="Diagnostics for convolutional classifiers.")
    parser.add_argument("--version", action="version", version=f"netlens {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_text, out_required=True, figures=False):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--seed", type=_seed, default=0, help="64-bit seed (default 0)")
        p.add_argument("--config", help="JSON file supplying option defaults")
        if figures:
            p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
        return p

    p = add("fixtures", cmd_fixtures, "write synthetic nets, images, masks and labels")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--channels", type=_int_list, default=[4, 8, 5])
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--zero-bias", action="store_true")
    p.add_argument("--residual", action="store_true")

    p = add("infer", cmd_infer, "logits and class probabilities for an image directory")
    p.add_argument("--net", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--labels", help="CSV image_id,grade merged into predictions.csv")

    p = add("explain", cmd_explain, "LRP-a1b0 input relevance per image", figures=True)
    p.add_argument("--net", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--target", type=int, default=3, help="output neuron (default 3, severe DR)")
    p.add_argument("--seed-mode", choices=("logit", "unit"), default="logit")
    p.add_argument("--pooling", choices=xai.POOLINGS, default="sum_pos", help="pooling for the figure")

    p = add("spectra", cmd_spectra, "activation eigen-spectra, condition numbers, fits", figures=True)
    p.add_argument("--net", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--layers", help="comma-separated layer names (default: relu and add layers)")
    p.add_argument("--uncentered", action="store_true", help="use the Gram matrix A^T A / m")
    p.add_argument("--bins", type=int, default=50)

    p = add("xai-eval", cmd_xai_eval, "RMA/RRA of heatmaps against lesion masks", figures=True)
    p.add_argument("--heatmaps", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--pooling", help="sum_pos, l2_norm_sq or both comma-separated (default both)")
    p.add_argument("--lesions", help="comma-separated lesion kinds (default all plus total)")
    p.add_argument("--method", default="LRP-a1b0")
    p.add_argument("--trials", type=int, default=0, help="random-heatmap control trials per image")

    p = add("distort", cmd_distort, "write distorted images into kind/severity folders")
    p.add_argument("--images", required=True)
    p.add_argument("--kinds")
    p.add_argument("--severity")

    p = add("robustness", cmd_robustness, "softmax disease-probability difference grid", figures=True)
    p.add_argument("--net", action="append", help="model manifest; give twice (A then B)")
    p.add_argument("--model-labels", help="labels for A,B")
    p.add_argument("--images", required=True)
    p.add_argument("--kinds")
    p.add_argument("--severity")
    p.add_argument("--external", help="directory of pre-distorted images kind/severity/*.npy")

    p = add("auc", cmd_auc, "referable-DR AUC from a predictions CSV", out_required=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--healthy-grades", default="0,1,2")
    return parser


def _config_tokens(sub: argparse.ArgumentParser, path: Path) -> list[str]:
    """Translate a JSON config into option tokens for ``sub``."""
    try:
        overrides = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ContractError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(overrides, dict):
        raise ContractError(f"{path}: config must be a JSON object")
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    tokens = []
    for key, value in overrides.items():
        action = actions.get(key.replace("-", "_"))
        if action is None or action.dest in ("config", "help"):
            raise ContractError(f"{path}: unknown option {key!r}")
        flag = action.option_strings[-1]
        if isinstance(action, argparse._StoreTrueAction):
            tokens += [flag] if value else []
        elif isinstance(action, argparse._AppendAction):
            for v in value if isinstance(value, list) else [value]:
                tokens += [flag, str(v)]
        elif isinstance(value, list):
            tokens += [flag, ",".join(str(v) for v in value)]
        else:
            tokens += [flag, str(value)]
    return tokens


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; options from ``--config`` apply first, explicit flags win."""
    parser = build_parser()
    if "--config" in argv:
        i = argv.index("--config")
        if i + 1 >= len(argv):
            raise UsageError("--config needs a path")
        path = Path(argv[i + 1])
        if not path.is_file():
            raise FileNotFoundError(f"missing config file {path}")
        command = next((a for a in argv if a in SUBCOMMANDS), None)
        if command is None:
            raise UsageError("--config needs a subcommand")
        sub = parser._subparsers._group_actions[0].choices[command]
        at = argv.index(command) + 1
        argv = argv[:at] + _config_tokens(sub, path) + argv[at:]
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
        args.func(args)
    except NumericError as exc:
        print(f"netlens: numeric error: {exc}", file=sys.stderr)
        return 2
    except (NetlensError, OSError, ValueError, KeyError) as exc:
        print(f"netlens: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
