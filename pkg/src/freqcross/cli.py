"""``freqcross`` command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import functools
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import datapipe, evalkit, gradsuite, imaging, spectrum, trainer
from . import model as fqmodel
from .errors import FreqCrossError, InvalidConfig

CONFIG_SECTIONS = ("model", "train", "augment", "paths")
PATH_KEYS = ("manifest", "out_dir", "model")


class ConfigError(InvalidConfig):
    pass


def _fail(message: str, code: int):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def handle_errors(fn):
    """Map configuration problems to exit 2 and other failures to exit 1."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except InvalidConfig as exc:
            _fail(str(exc), 2)
        except (FreqCrossError, OSError) as exc:
            _fail(f"{type(exc).__name__}: {exc}", 1)

    return wrapper


def resolve_seed(flag: int | None, configured: int | None = None) -> int:
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    return datapipe.env_seed(0)


def write_effective_config(out_dir: Path, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "effective_config.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


# ---------------------------------------------------------------------------
# run configuration


class RunConfig:
    """Model, training, augmentation and path settings from one TOML file."""

    def __init__(self, model_cfg, train_cfg, paths: dict, seed_from_file: bool):
        self.model = model_cfg
        self.train = train_cfg
        self.paths = paths
        self.seed_from_file = seed_from_file

    @classmethod
    def load(cls, path) -> RunConfig:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc, base=path.parent)

    @classmethod
    def from_dict(cls, doc: dict, base=Path(".")) -> RunConfig:
        unknown = set(doc) - set(CONFIG_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        for name in CONFIG_SECTIONS:
            if not isinstance(doc.get(name, {}), dict):
                raise ConfigError(f"[{name}] must be a table")
        try:
            model_cfg = fqmodel.FreqCrossConfig.from_dict(doc.get("model", {}))
        except TypeError as exc:
            raise ConfigError(f"[model]: {exc}") from exc
        aug = doc.get("augment", {})
        bad = set(aug) - set(imaging.AugmentConfig.__dataclass_fields__)
        if bad:
            raise ConfigError(f"unknown [augment] keys: {sorted(bad)}")
        train_doc = dict(doc.get("train", {}))
        if "augment" in train_doc:
            raise ConfigError("augmentation settings belong in the [augment] section")
        try:
            train_cfg = trainer.TrainConfig.from_dict({**train_doc, "augment": aug})
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[train]/[augment]: {exc}") from exc
        paths = dict(doc.get("paths", {}))
        bad = set(paths) - set(PATH_KEYS)
        if bad:
            raise ConfigError(f"unknown [paths] keys: {sorted(bad)}")
        for k, v in paths.items():
            p = Path(v)
            paths[k] = p if p.is_absolute() else base / p
        return cls(model_cfg, train_cfg, paths, "seed" in train_doc)

    def require_path(self, key: str) -> Path:
        if key not in self.paths:
            raise ConfigError(f"missing required config key paths.{key}")
        return self.paths[key]

    def to_dict(self) -> dict:
        t = self.train.to_dict()
        aug = t.pop("augment")
        return {
            "model": self.model.to_dict(),
            "train": t,
            "augment": aug,
            "paths": {k: str(v) for k, v in sorted(self.paths.items())},
        }


def _load_run_config(config_path, seed, epochs, threads) -> RunConfig:
    rc = RunConfig.load(config_path)
    overrides = {"seed": resolve_seed(seed, rc.train.seed if rc.seed_from_file else None), "workers": threads}
    if epochs is not None:
        overrides["epochs"] = epochs
    rc.train = replace(rc.train, **overrides)
    return rc


def _load_manifest(path) -> datapipe.DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return datapipe.load_manifest(path)


# ---------------------------------------------------------------------------
# commands


@click.group()
@click.version_option(package_name="artifact")
def main():
    """FreqCross: spatial, spectral and radial-energy fusion detector."""


@main.command("fixtures")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False), help="Output directory.")
@click.option("--count", default=50, show_default=True, type=click.IntRange(min=1), help="Images per class.")
@click.option("--side", default=64, show_default=True, type=click.IntRange(min=imaging.MIN_SIDE))
@click.option("--gain", default=3.0, show_default=True, type=float, help="Mid-band amplitude gain.")
@click.option("--slope", default=1.0, show_default=True, type=float, help="Amplitude falloff exponent.")
@click.option("--seed", default=None, type=int, help="Defaults to $FREQCROSS_SEED, then 0.")
@handle_errors
def cmd_fixtures(out_dir, count, side, gain, slope, seed):
    """Generate the synthetic spectral fixture corpus."""
    if gain <= 0:
        raise ConfigError("--gain must be > 0")
    spec = datapipe.FixtureSpec(count_per_class=count, side=side, band_gain=gain, spectral_slope=slope,
                                seed=resolve_seed(seed))
    manifest = datapipe.make_fixtures(spec, out_dir)
    write_effective_config(Path(out_dir), {"fixtures": asdict(spec)})
    counts = manifest.counts
    for split in datapipe.SPLITS:
        click.echo(f"{split}: real={counts[(split, 'real')]} synthetic={counts[(split, 'synthetic')]}")


@main.command("spectrum")
@click.argument("image", type=click.Path(dir_okay=False))
@click.option("--bins", default=spectrum.DEFAULT_BINS, show_default=True, type=click.IntRange(min=1))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@handle_errors
def cmd_spectrum(image, bins, out_dir):
    """Write the centred log-magnitude grid and radial profile of IMAGE."""
    img = imaging.read_image(image)
    gray = imaging.to_grayscale(img)
    mag = spectrum.magnitude(spectrum.fft2d(gray), centered=True)
    profile = spectrum.radial_profile(mag, bins)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "magnitude.csv", spectrum.log_normalize(mag), delimiter=",", fmt="%.10g")
    spectrum.write_profile_csv(profile, out / "profile.csv")
    write_effective_config(out, {"image": str(image), "bins": bins})


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--resume", type=click.Path(dir_okay=False), default=None, help="Checkpoint to continue from.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Overrides paths.out_dir.")
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@handle_errors
def cmd_train(config_path, resume, out_dir, epochs, seed, threads):
    """Train a model; writes the model, history.csv, steps.csv and val metrics.json."""
    rc = _load_run_config(config_path, seed, epochs, threads)
    if out_dir is not None:
        rc.paths["out_dir"] = Path(out_dir)
    manifest = _load_manifest(rc.require_path("manifest"))
    out = rc.require_path("out_dir")
    model_path = rc.paths.setdefault("model", out / "model.fqxm")
    write_effective_config(out, rc.to_dict())
    result = trainer.train(rc.model, manifest, rc.train, checkpoint_path=out / "checkpoint.fqxc", resume=resume)
    fqmodel.save(result.model, model_path)
    trainer.write_history_csv(out / "history.csv", result.history)
    trainer.write_steps_csv(out / "steps.csv", result.history)
    _, report = trainer.evaluate(result.model, manifest, "val", rc.train.eval_batch_size)
    evalkit.write_metrics_json(out / "metrics.json", report.to_dict())
    last = result.history.epochs[-1]
    click.echo(f"epochs={len(result.history.epochs)} val_acc={last.val_acc:.4f} val_auc={report.auc_roc}")


@main.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--split", default="test", show_default=True, type=click.Choice(datapipe.SPLITS))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--batch-size", default=64, show_default=True, type=click.IntRange(min=1))
@click.option("--hist-bins", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@handle_errors
def cmd_eval(model_path, manifest_path, split, out_dir, batch_size, hist_bins, threads):
    """Score a split; writes metrics.json plus ROC, PR, confusion, histogram and PCA CSVs."""
    model = fqmodel.load(model_path)
    manifest = _load_manifest(manifest_path)
    source = datapipe.SampleSource(manifest, model.config.input_side, model.config.radial_bins, threads)
    res = trainer.score_split(model, source, split, batch_size, features=True)
    report = evalkit.metrics_report(res.scored)
    out = Path(out_dir)
    written = evalkit.write_eval_outputs(out, res.scored, report, res.features, hist_bins)
    if not written["pca"]:
        click.echo("note: pca.csv skipped (needs at least 3 distinct feature vectors)", err=True)
    write_effective_config(out, {"model": str(model_path), "manifest": str(manifest_path), "split": split,
                                 "batch_size": batch_size, "hist_bins": hist_bins})
    click.echo(f"accuracy={report.accuracy:.4f} auc_roc={report.auc_roc}")


@main.command("detect")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.argument("images", nargs=-1, required=True)
@handle_errors
def cmd_detect(model_path, images):
    """Print ``path,score,label`` for each IMAGE (label synthetic iff score >= 0.5)."""
    model = fqmodel.load(model_path)
    cfg = model.config
    failed = False
    for path in images:
        try:
            rgb, m_log, e = datapipe.prepare_image(imaging.read_image(path), cfg.input_side, radial_bins=cfg.radial_bins)
        except (FreqCrossError, OSError) as exc:
            click.echo(f"{path}: {type(exc).__name__}: {exc}", err=True)
            failed = True
            continue
        score = float(model.forward(rgb[None], m_log[None], e[None]).probabilities[0])
        click.echo(f"{path},{score!r},{'synthetic' if score >= 0.5 else 'real'}")
    if failed:
        sys.exit(1)


@main.command("ablate")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False))
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--epochs", type=click.IntRange(min=1), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@handle_errors
def cmd_ablate(config_path, out_dir, epochs, seed, threads):
    """Train all seven modality masks and write ablation.csv."""
    rc = _load_run_config(config_path, seed, epochs, threads)
    if out_dir is not None:
        rc.paths["out_dir"] = Path(out_dir)
    manifest = _load_manifest(rc.require_path("manifest"))
    out = rc.require_path("out_dir")
    write_effective_config(out, rc.to_dict())
    results = trainer.ablate(rc.model, manifest, rc.train)
    trainer.write_ablation_csv(out / "ablation.csv", results)
    for name, _, r in results:
        click.echo(f"{name}: auc_roc={r.auc_roc} accuracy={r.accuracy:.4f}")


@main.command("robustness")
@click.option("--model", "model_path", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(dir_okay=False))
@click.option("--split", default="test", show_default=True, type=click.Choice(datapipe.SPLITS))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=None)
@click.option("--threads", type=click.IntRange(min=1), default=1, show_default=True)
@handle_errors
def cmd_robustness(model_path, manifest_path, split, out_dir, seed, threads):
    """Accuracy under the default perturbation list; writes robustness.csv."""
    model = fqmodel.load(model_path)
    manifest = _load_manifest(manifest_path)
    seed = resolve_seed(seed)
    rows = evalkit.robustness_sweep(model, manifest, imaging.DEFAULT_PERTURBATIONS, seed, split, workers=threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    evalkit.write_robustness_csv(out / "robustness.csv", rows)
    write_effective_config(out, {"model": str(model_path), "manifest": str(manifest_path), "split": split,
                                 "seed": seed, "perturbations": [s.name for s in imaging.DEFAULT_PERTURBATIONS]})
    for r in rows:
        click.echo(f"{r.name}: accuracy={r.accuracy:.4f} drop={r.drop:+.4f}")


@main.command("gradcheck")
@click.option("--seed", type=int, default=None)
@handle_errors
def cmd_gradcheck(seed):
    """Finite-difference gradient checks for every layer and the tiny model."""
    ok = True
    for res in gradsuite.run_suite(resolve_seed(seed)):
        status = "PASS" if res.passed else "FAIL"
        click.echo(f"{status} {res.name} max_rel_err={res.report.max_error:.3e}")
        for group, err in res.report.errors.items():
            click.echo(f"    {group}: {err:.3e}")
        ok &= res.passed
    if not ok:
        sys.exit(1)


if __name__ == "__main__":
    main()
