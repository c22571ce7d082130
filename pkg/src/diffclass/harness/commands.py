"""Harness commands. All of them read and write one run directory::

    config.yaml                      resolved config of the latest command
    data/dataset.bin, splits.json
    train/checkpoint.pt, loss.csv, loss.png
    classify/records_seed<k>.jsonl, metrics.json, metrics.csv, timing.json
    ablate/ablation.csv, summary.csv, ablation.png
    uncertainty/coverage.csv, outcomes.csv, summary.json, coverage.png, outcomes.png
    explain/<id>.png, <id>_difference.npy, metadata.json
    report.md
    cache/                           error tensors shared by classify and ablate-steps

Apart from timing.json and the plots, every file is a pure function of the
config and the code, so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..classifier import RULES, ClassificationResult, NoiseLevelSet, classify, decide, \
    reconstruction_errors, sample_noise_set
from ..data import DataError, Dataset, from_model_space, generate_gaussian_dataset, \
    generate_shapes_dataset, load_dataset, load_image_folder, load_splits, save_dataset, \
    save_splits, stratified_split, to_model_space
from ..denoiser import Denoiser, GaussianClassModel, GaussianOracle
from ..explain import counterfactual
from ..schedule import NoiseSchedule
from ..training import Checkpoint, train, window_means, write_loss_csv
from ..uncertainty import OUTCOMES, confidence_by_outcome, coverage_accuracy_curve, \
    estimate_uncertainty, outcome_labels, write_outcome_csv
from . import plots
from .config import ConfigError, ExperimentConfig
from .metrics import MetricsReport, format_mean_std

log = logging.getLogger(__name__)


class OutputExistsError(ConfigError):
    """Refusing to replace existing outputs without ``--overwrite``."""


@dataclass
class Run:
    config: ExperimentConfig
    root: Path
    overwrite: bool = False

    def __post_init__(self):
        self.root = Path(self.root)

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def guard(self, *paths: Path) -> None:
        for p in paths:
            if p.exists() and not self.overwrite:
                raise OutputExistsError(f"{p} already exists; pass --overwrite to replace it")

    def record_config(self) -> None:
        self.config.save(self.path("config.yaml"))


@dataclass
class ModelHandle:
    denoiser: Denoiser
    schedule: NoiseSchedule
    wavelet: bool
    dtype: torch.dtype
    tag: str
    oracle: GaussianClassModel | None = None


# --------------------------------------------------------------------------
# Data and models
# --------------------------------------------------------------------------


def generate_data(run: Run) -> Dataset:
    cfg = run.config.dataset
    ds_path, split_path = run.path("data", "dataset.bin"), run.path("data", "splits.json")
    run.guard(ds_path, split_path)
    match cfg.kind:
        case "shapes":
            ds = generate_shapes_dataset(cfg.resolution, cfg.n_per_class, run.config.seed,
                                         cfg.background_noise)
        case "gaussian":
            ds = generate_gaussian_dataset(cfg.gaussian_model(), cfg.n_per_class, run.config.seed)
        case "folder":
            ds = load_image_folder(cfg.folder, cfg.resolution)
    splits = stratified_split(ds.labels, cfg.split, run.config.seed)
    save_dataset(ds, ds_path)
    save_splits(splits, split_path)
    run.record_config()
    log.info("wrote %d images (%s) to %s", len(ds), ds.fingerprint(), ds_path)
    return ds


def load_data(run: Run) -> tuple[Dataset, dict[str, list[int]]]:
    ds_path, split_path = run.root / "data" / "dataset.bin", run.root / "data" / "splits.json"
    if not ds_path.exists():
        raise DataError(f"{ds_path} not found; run generate-data first")
    ds = load_dataset(ds_path)
    splits = load_splits(split_path)
    if sorted(sum(splits.values(), [])) != list(range(len(ds))):
        raise DataError(f"{split_path} does not partition the dataset")
    return ds, splits


def model_inputs(ds: Dataset, indices, wavelet: bool, dtype=torch.float32) -> torch.Tensor:
    x = to_model_space(ds.images[np.asarray(indices, dtype=np.int64)], wavelet)
    return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)


def checkpoint_path(run: Run) -> Path:
    return Path(run.config.model.checkpoint) if run.config.model.checkpoint \
        else run.root / "train" / "checkpoint.pt"


def build_model(run: Run, ds: Dataset) -> ModelHandle:
    cfg = run.config
    schedule = cfg.model.schedule()
    if cfg.model.source == "oracle":
        if "oracle" not in ds.metadata:
            raise DataError("dataset metadata has no oracle parameters; generate a gaussian dataset")
        model = GaussianClassModel.from_dict(ds.metadata["oracle"])
        return ModelHandle(GaussianOracle(model), schedule, False, torch.float64,
                           f"oracle-{ds.fingerprint()}", model)
    path = checkpoint_path(run)
    ckpt = Checkpoint.load(path)
    if ckpt.schedule != schedule:
        raise ConfigError(f"checkpoint schedule {ckpt.schedule} differs from the config's {schedule}")
    if ckpt.wavelet != cfg.dataset.wavelet:
        raise ConfigError(f"checkpoint wavelet={ckpt.wavelet} but config wavelet={cfg.dataset.wavelet}")
    if ckpt.dataset_fingerprint != ds.fingerprint():
        raise DataError("checkpoint was trained on a different dataset")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    tag = f"ckpt-{digest}-{'ema' if cfg.model.use_ema else 'raw'}"
    return ModelHandle(ckpt.model(cfg.model.use_ema), schedule, ckpt.wavelet, torch.float32, tag)


def train_model(run: Run, resume: bool = False) -> Checkpoint:
    cfg = run.config
    ds, splits = load_data(run)
    ckpt_path = run.path("train", "checkpoint.pt")
    previous = None
    if ckpt_path.exists() and resume:
        previous = Checkpoint.load(ckpt_path)
    elif not resume:
        run.guard(ckpt_path)
    tr = splits["train"]
    x = model_inputs(ds, tr, cfg.dataset.wavelet)
    y = torch.from_numpy(ds.labels[tr])
    ckpt = train(x, y, cfg.model.denoiser, cfg.train, cfg.model.schedule(), ds.num_classes,
                 cfg.dataset.wavelet, ds.fingerprint(), resume=previous)
    ckpt.save(ckpt_path)
    write_loss_csv(ckpt.loss_history, run.path("train", "loss.csv"))
    if ckpt.loss_history:
        plots.plot_loss(ckpt.loss_history, run.path("train", "loss.png"))
    run.record_config()
    return ckpt


# --------------------------------------------------------------------------
# Classification
# --------------------------------------------------------------------------


def error_tensor(run: Run, handle: ModelHandle, x: torch.Tensor, N: int, seed: int) -> tuple[np.ndarray, dict]:
    """(B, C, N) errors for one inference seed, cached per model and seed.

    A cached tensor with more steps is prefix-sliced: step k only depends on
    the seed, so the first N steps of a larger run are an N-step run.
    """
    split = run.config.classification.split
    cache = run.path("cache", f"errors_{handle.tag}_{split}_seed{seed}.npz")
    if cache.exists():
        with np.load(cache) as f:
            if f["errors"].shape[2] >= N and f["errors"].shape[0] == len(x):
                timing = json.loads(str(f["timing"]))
                return f["errors"][:, :, :N].copy(), timing
    bs = run.config.classification.batch_size
    S = sample_noise_set(N, handle.schedule, tuple(x.shape), seed, dtype=x.dtype)
    errors = np.empty((len(x), handle.denoiser.contract.num_classes, N))
    seconds = []
    for start in range(0, len(x), bs):
        stop = min(len(x), start + bs)
        sub = NoiseLevelSet(S.t, S.lambdas, S.eps[:, start:stop], seed)
        t0 = time.perf_counter()
        errors[start:stop] = reconstruction_errors(x[start:stop], sub, handle.denoiser)
        seconds.append(time.perf_counter() - t0)
    timing = {"seed": seed, "N": N, "batch_size": bs, "num_samples": len(x),
              "batch_seconds": seconds, "seconds_per_batch": float(np.mean(seconds))}
    np.savez(cache, errors=errors, timing=json.dumps(timing))
    log.info("seed %d: N=%d errors for %d samples in %.1fs", seed, N, len(x), sum(seconds))
    return errors, timing


def _records(indices, labels, result: ClassificationResult, seed: int) -> list[dict]:
    out = []
    for i, idx in enumerate(indices):
        out.append({
            "id": int(idx), "seed": seed, "true_label": int(labels[i]),
            "predicted": int(result.predicted[i]), "rule": result.rule, "N": result.N,
            "votes": result.votes[i].tolist(), "posterior": result.posterior[i].tolist(),
            "mean_errors": result.mean_errors[i].tolist(),
        })
    return out


def _write_jsonl(rows, path) -> None:
    with open(path, "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")


def _read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def run_classification(run: Run) -> dict[str, MetricsReport]:
    cfg = run.config
    cc = cfg.classification
    ds, splits = load_data(run)
    handle = build_model(run, ds)
    idx = splits[cc.split]
    x = model_inputs(ds, idx, handle.wavelet, handle.dtype)
    y = ds.labels[idx]
    out = run.path("classify", "metrics.json")
    run.guard(out)
    reports = {rule: MetricsReport(rule, cc.N) for rule in RULES}
    timings = []
    for seed in cc.seeds:
        errors, timing = error_tensor(run, handle, x, cc.N, seed)
        timings.append(timing)
        for rule in RULES:
            result = decide(errors, rule, cc.tie_break_by_error)
            reports[rule].add(seed, result.predicted, y, cfg.uncertainty.positive_class)
            if rule == cc.rule:
                _write_jsonl(_records(idx, y, result, seed), run.path("classify", f"records_seed{seed}.jsonl"))
    summary = {
        "model": handle.tag.split("-")[0], "split": cc.split, "num_samples": len(idx),
        "num_classes": int(ds.num_classes), "N": cc.N, "rule": cc.rule,
        "rules": {rule: rep.summary() for rule, rep in reports.items()},
    }
    if handle.oracle is not None and handle.oracle.num_classes == 2:
        summary["bayes_accuracy"] = handle.oracle.bayes_accuracy()
    out.write_text(json.dumps(summary, indent=2) + "\n")
    with open(run.path("classify", "metrics.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "rule", "N", "accuracy", "f1", "macro_f1"])
        for rule, rep in reports.items():
            for row in zip(rep.seeds, rep.accuracy, rep.f1, rep.macro_f1):
                w.writerow([row[0], rule, cc.N] + [f"{v:.10g}" for v in row[1:]])
    run.path("classify", "timing.json").write_text(json.dumps(timings, indent=2) + "\n")
    run.record_config()
    return reports


def ablate_steps(run: Run) -> dict[str, dict[int, tuple[float, float | None]]]:
    """Accuracy against N, every N read as a prefix of the largest-N error tensor."""
    cfg = run.config
    cc = cfg.classification
    ds, splits = load_data(run)
    handle = build_model(run, ds)
    idx = splits[cc.split]
    x = model_inputs(ds, idx, handle.wavelet, handle.dtype)
    y = ds.labels[idx]
    out_csv = run.path("ablate", "ablation.csv")
    run.guard(out_csv)
    n_list = sorted(set(cc.N_list))
    acc = {(rule, n): [] for rule in RULES for n in n_list}
    for seed in cc.seeds:
        errors, _ = error_tensor(run, handle, x, n_list[-1], seed)
        for n in n_list:
            for rule in RULES:
                pred = decide(errors[:, :, :n], rule, cc.tie_break_by_error).predicted
                acc[rule, n].append(float(np.mean(pred == y)))
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["N", "seed", "rule", "accuracy"])
        for n in n_list:
            for rule in RULES:
                for seed, a in zip(cc.seeds, acc[rule, n]):
                    w.writerow([n, seed, rule, f"{a:.10g}"])
    summary = {rule: {n: MetricsReport.mean_std(acc[rule, n]) for n in n_list} for rule in RULES}
    with open(run.path("ablate", "summary.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["N", "rule", "mean_accuracy", "std_accuracy", "num_seeds"])
        for n in n_list:
            for rule in RULES:
                mean, std = summary[rule][n]
                w.writerow([n, rule, f"{mean:.10g}", "" if std is None else f"{std:.10g}", len(cc.seeds)])
    plots.plot_ablation({rule: (n_list, [summary[rule][n][0] for n in n_list],
                                [summary[rule][n][1] for n in n_list]) for rule in RULES},
                        run.path("ablate", "ablation.png"))
    run.record_config()
    return summary


# --------------------------------------------------------------------------
# Uncertainty
# --------------------------------------------------------------------------


def load_records(run: Run, seed: int) -> tuple[ClassificationResult, np.ndarray, list[int]]:
    path = run.root / "classify" / f"records_seed{seed}.jsonl"
    if not path.exists():
        raise DataError(f"{path} not found; run classify first")
    rows = _read_jsonl(path)
    if not rows:
        raise DataError(f"{path} is empty")
    result = ClassificationResult(
        np.array([r["predicted"] for r in rows]), np.array([r["votes"] for r in rows]),
        np.array([r["posterior"] for r in rows]), np.array([r["mean_errors"] for r in rows]),
        rows[0]["rule"])
    return result, np.array([r["true_label"] for r in rows]), [r["id"] for r in rows]


def _median(values) -> float | None:
    return float(np.median(values)) if len(values) else None


def run_uncertainty(run: Run) -> dict:
    cfg = run.config
    fractions = cfg.uncertainty.fractions
    out_csv = run.path("uncertainty", "coverage.csv")
    run.guard(out_csv)
    curves, pooled, per_seed = [], [], []
    for seed in cfg.classification.seeds:
        result, labels, _ = load_records(run, seed)
        ent = estimate_uncertainty(result.votes).entropy
        curves.append((seed, coverage_accuracy_curve(result, labels, fractions, entropies=ent)))
        correct = result.predicted == labels
        per_seed.append({"seed": seed, "median_entropy_correct": _median(ent[correct]),
                         "median_entropy_incorrect": _median(ent[~correct])})
        pooled.append((result, labels, ent))
    pred = np.concatenate([r.predicted for r, _, _ in pooled])
    votes = np.concatenate([r.votes for r, _, _ in pooled])
    true = np.concatenate([lab for _, lab, _ in pooled])
    ent = np.concatenate([e for _, _, e in pooled])

    mean_acc = np.mean([c.accuracy for _, c in curves], axis=0)
    with open(out_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "retained_fraction", "threshold", "n_kept", "accuracy"])
        for seed, c in curves:
            for row in zip(c.retained_fraction, c.thresholds, c.n_kept, c.accuracy):
                w.writerow([seed, f"{row[0]:.6g}", f"{row[1]:.10g}", int(row[2]), f"{row[3]:.10g}"])
        for f_, a in zip(curves[0][1].retained_fraction, mean_acc):
            w.writerow(["mean", f"{f_:.6g}", "", "", f"{a:.10g}"])
    plots.plot_coverage(curves[0][1].retained_fraction, mean_acc, run.path("uncertainty", "coverage.png"))

    summary = {
        "rule": cfg.classification.rule, "N": cfg.classification.N,
        "retained_fraction": curves[0][1].retained_fraction.tolist(), "mean_accuracy": mean_acc.tolist(),
        "median_entropy_correct": _median(ent[pred == true]),
        "median_entropy_incorrect": _median(ent[pred != true]),
        "per_seed": per_seed,
    }
    if votes.shape[1] == 2:
        merged = ClassificationResult(pred, votes, np.zeros(votes.shape), np.zeros(votes.shape),
                                      cfg.classification.rule)
        outcome = confidence_by_outcome(merged, true, cfg.uncertainty.positive_class)
        write_outcome_csv(outcome, run.path("uncertainty", "outcomes.csv"))
        groups = outcome_labels(pred, true, cfg.uncertainty.positive_class)
        plots.plot_outcomes({k: ent[groups == k] for k in OUTCOMES}, run.path("uncertainty", "outcomes.png"))
        summary["outcomes"] = outcome
    run.path("uncertainty", "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    run.record_config()
    return summary


# --------------------------------------------------------------------------
# Explainability
# --------------------------------------------------------------------------


def run_explain(run: Run) -> dict:
    cfg = run.config
    ec = cfg.explain
    ds, splits = load_data(run)
    handle = build_model(run, ds)
    meta_path = run.path("explain", "metadata.json")
    run.guard(meta_path)
    C = handle.denoiser.contract.num_classes
    if not (0 <= ec.source < C and 0 <= ec.target < C):
        raise ConfigError(f"explain source/target must lie in [0, {C})")
    idx = [i for i in splits[cfg.classification.split] if ds.labels[i] == ec.source][:ec.n_images]
    if not idx:
        raise DataError(f"no {cfg.classification.split} images of class {ec.source}")
    x = model_inputs(ds, idx, handle.wavelet, handle.dtype)
    res = counterfactual(x, ec.source, ec.target, ec.guidance, handle.denoiser, handle.schedule,
                         seed=cfg.seed)
    check = classify(res.counterfactual, handle.denoiser, handle.schedule, ec.verify_steps,
                     "majority", seed=cfg.seed)
    image = ds.images[idx]
    cf_pix = np.asarray(from_model_space(res.counterfactual.double().numpy(), handle.wavelet))
    fact_pix = np.asarray(from_model_space(res.factual.double().numpy(), handle.wavelet))
    diff = cf_pix - fact_pix
    items = []
    for k, i in enumerate(idx):
        np.save(run.path("explain", f"{i}_difference.npy"), diff[k])
        pred = int(check.predicted[k])
        plots.plot_triptych(image[k], cf_pix[k], diff[k], run.path("explain", f"{i}.png"),
                            f"id {i}: class {ec.source} -> {ec.target} (classified {pred})")
        items.append({"id": int(i), "counterfactual_predicted": pred,
                      "counterfactual_votes": check.votes[k].tolist()})
    hits = sum(item["counterfactual_predicted"] == ec.target for item in items)
    meta = {"noise_level": ec.guidance.noise_level, "guidance_scale": ec.guidance.scale,
            "sampler_steps": ec.guidance.sampler_steps, "sampler_kind": ec.guidance.sampler_kind,
            "source": ec.source, "target": ec.target, "seed": cfg.seed,
            "verify_steps": ec.verify_steps, "classified_as_target": hits, "images": items}
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    run.record_config()
    return meta


# --------------------------------------------------------------------------
# Report
# --------------------------------------------------------------------------


def _read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _table(header: list[str], rows: list[list]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return out + [""]


def write_report(run: Run) -> Path:
    root = run.root
    metrics_path = root / "classify" / "metrics.json"
    if not metrics_path.exists():
        raise DataError(f"{metrics_path} not found; run classify first")
    m = json.loads(metrics_path.read_text())
    task = f"{run.config.dataset.kind} / {m['model']}"
    seeds = m["rules"]["majority"]["seeds"]
    lines = ["# Run report", "",
             f"Task: {task}, {m['num_samples']} {m['split']} samples, {m['num_classes']} classes, "
             f"N = {m['N']}, {len(seeds)} inference seeds {seeds}.", ""]
    if "bayes_accuracy" in m:
        lines += [f"Analytic Bayes accuracy: {100 * m['bayes_accuracy']:.2f}%", ""]

    lines += ["## Majority vote vs averaging (accuracy %, mean ± std over seeds)", ""]
    acc = {r: m["rules"][r]["accuracy"] for r in ("majority", "average")}
    lines += _table(["Task", "N", "Majority", "Average"],
                    [[task, m["N"], format_mean_std(acc["majority"]["mean"], acc["majority"]["std"]),
                      format_mean_std(acc["average"]["mean"], acc["average"]["std"])]])

    lines += ["## Classification metrics (%, mean ± std over seeds)", ""]
    header = ["Task", "Rule", "Accuracy", "F1"] + (["Macro F1"] if m["num_classes"] > 2 else [])
    rows = []
    for rule in ("majority", "average"):
        r = m["rules"][rule]
        row = [task, rule, format_mean_std(r["accuracy"]["mean"], r["accuracy"]["std"]),
               format_mean_std(r["f1"]["mean"], r["f1"]["std"])]
        if m["num_classes"] > 2:
            row.append(format_mean_std(r["macro_f1"]["mean"], r["macro_f1"]["std"]))
        rows.append(row)
    lines += _table(header, rows)

    timing_path = root / "classify" / "timing.json"
    if timing_path.exists():
        lines += ["## Timing", ""]
        rows = [[t["seed"], t["N"], t["batch_size"], len(t["batch_seconds"]),
                 f"{t['seconds_per_batch']:.3f}"] for t in json.loads(timing_path.read_text())]
        lines += _table(["Seed", "N", "Batch size", "Batches", "Seconds per batch"], rows)

    ablation_path = root / "ablate" / "summary.csv"
    if ablation_path.exists():
        lines += ["## Accuracy against classification steps (%)", ""]
        rows = [[r["N"], r["rule"], format_mean_std(float(r["mean_accuracy"]),
                                                    float(r["std_accuracy"]) if r["std_accuracy"] else None)]
                for r in _read_csv(ablation_path)]
        lines += _table(["N", "Rule", "Accuracy"], rows)

    unc_path = root / "uncertainty" / "summary.json"
    if unc_path.exists():
        u = json.loads(unc_path.read_text())
        lines += ["## Uncertainty filtering (mean accuracy % on the most certain fraction)", ""]
        lines += _table(["Retained", "Accuracy"],
                        [[f"{100 * f:g}%", f"{100 * a:.1f}"]
                         for f, a in zip(u["retained_fraction"], u["mean_accuracy"])])
        fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
        lines += [f"Median vote entropy (bits): correct {fmt(u['median_entropy_correct'])}, "
                  f"incorrect {fmt(u['median_entropy_incorrect'])}.", ""]

    explain_path = root / "explain" / "metadata.json"
    if explain_path.exists():
        e = json.loads(explain_path.read_text())
        lines += ["## Counterfactuals", "",
                  f"{e['classified_as_target']} of {len(e['images'])} counterfactuals "
                  f"({e['source']} -> {e['target']}, t* = {e['noise_level']}, w = {e['guidance_scale']}) "
                  f"are classified as the target class.", ""]

    loss_path = root / "train" / "loss.csv"
    if loss_path.exists():
        hist = [(int(r["step"]), float(r["loss"]), float(r["lr"])) for r in _read_csv(loss_path)]
        if hist:
            first, last = window_means(hist, 500)
            lines += ["## Training", "",
                      f"{len(hist)} steps; mean loss over the first 500 steps {first:.4f}, "
                      f"last 500 steps {last:.4f} (ratio {last / first:.3f}).", ""]

    out = run.path("report.md")
    out.write_text("\n".join(lines))
    return out
