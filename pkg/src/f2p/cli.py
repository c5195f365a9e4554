"""Command-line entry point: ``f2p <command> [options]``.

Every command that writes files also writes ``provenance.json`` next to its
outputs with the config digest, input digests, seed and output digests.
Failures print one line ``f2p: error: stage=<stage> <message>`` to stderr
and exit nonzero.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._imaging import read_png, sha256_file
from .adapt import IDENTITY, get_adapter
from .codec import serialize_mhm
from .config import ConfigError, PipelineConfig
from .ensemble import (
    EnsembleModel,
    PipelineStageError,
    PredictionMatrix,
    ensemble_predict,
    fit_ensemble,
    prediction_matrix,
)
from .evaluation import AblationGrid, compare_constant_weights, reconstruction_report, run_ablation
from .synthfaces import DatasetManifest, generate_dataset
from .trainer import FeatureStage, TrainConfig, TrainedModel, pretrain_features, train


class CommandError(Exception):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def _one_line(text: str) -> str:
    return " ".join(str(text).split())


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"f2p: error: stage=arguments {_one_line(message)}\n")


def _write_provenance(out: Path, command: str, cfg: PipelineConfig, seed, inputs: dict, outputs: list[Path]) -> dict:
    prov = {
        "command": command,
        "version": __version__,
        "config_digest": cfg.digest(),
        "seed": seed,
        "inputs": dict(sorted(inputs.items())),
        "outputs": {str(p.relative_to(out)): sha256_file(p) for p in sorted(outputs)},
    }
    (out / "provenance.json").write_text(json.dumps(prov, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return prov


def _files(root: Path) -> list[Path]:
    return [p for p in sorted(root.rglob("*")) if p.is_file() and p.name != "provenance.json"]


def _load_manifest(path, stage="data") -> DatasetManifest:
    try:
        return DatasetManifest.load(path, verify=True)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(stage, f"cannot load manifest {path}: {exc}") from exc


def _load_model(path) -> TrainedModel:
    try:
        return TrainedModel.load(path)
    except Exception as exc:  # noqa: BLE001
        raise CommandError("model", f"cannot load model {path}: {exc}") from exc


def _load_ensemble(path, adapter=None) -> EnsembleModel:
    try:
        return EnsembleModel.load(path, adapter)
    except Exception as exc:  # noqa: BLE001
        raise CommandError("ensemble", f"cannot load ensemble {path}: {exc}") from exc


def _adapter(spec):
    try:
        return get_adapter(spec)
    except KeyError as exc:
        raise CommandError("adapter", str(exc.args[0])) from exc


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(args, cfg: PipelineConfig) -> int:
    d = cfg.data(args.split)
    n = args.n if args.n is not None else d["n"]
    seed = args.seed if args.seed is not None else d["seed"]
    levels = d.get("style_levels")
    if args.style_levels is not None:
        levels = None if args.style_levels in ("none", "0") else int(args.style_levels)
    out = Path(args.out)
    try:
        manifest = generate_dataset(
            cfg.schema(), n, seed, cfg.augmentation(), out, canvas=cfg.canvas,
            normalize=cfg.raw["data"]["normalize"], style_levels=levels, jobs=args.jobs,
        )
    except Exception as exc:  # noqa: BLE001
        raise CommandError("gen-data", str(exc)) from exc
    _write_provenance(out, "gen-data", cfg, seed, {"manifest_digest": manifest.digest()}, _files(out))
    print(manifest.digest())
    return 0


def cmd_pretrain(args, cfg: PipelineConfig) -> int:
    f = dict(cfg.raw["features"])
    if args.epochs is not None:
        f["epochs"] = args.epochs
    if args.n is not None:
        f["n"] = args.n
    try:
        stage = pretrain_features(n=f["n"], sizes=tuple(f["sizes"]), epochs=f["epochs"], seed=f["seed"], lr=f["lr"])
    except Exception as exc:  # noqa: BLE001
        raise CommandError("pretrain", str(exc)) from exc
    out = Path(args.out)
    stage.save(out)
    _write_provenance(out, "pretrain", cfg, f["seed"], {}, _files(out))
    print(stage.digest())
    return 0


def parse_cell(text: str) -> tuple[str, str, str, str | None]:
    """``loss,input,mode[,region]`` e.g. ``local,crop,fine_tuning,nose``."""
    parts = [p.strip() for p in text.split(",")]
    if len(parts) not in (3, 4):
        raise CommandError("arguments", f"--cell wants loss,input,mode[,region], got {text!r}")
    loss, inp, mode = parts[:3]
    region = parts[3] if len(parts) == 4 else None
    aliases = {"fe": "feature_extraction", "ft": "fine_tuning", "full": "full_frame"}
    mode, inp = aliases.get(mode, mode), aliases.get(inp, inp)
    if loss not in ("complete", "local") or inp not in ("full_frame", "crop"):
        raise CommandError("arguments", f"bad cell {text!r}")
    if (loss == "local" or inp == "crop") and region is None:
        raise CommandError("arguments", f"cell {text!r} needs a region")
    if loss == "complete" and inp == "crop":
        raise CommandError("arguments", "a complete-loss model takes the full frame")
    return loss, inp, mode, region


def cmd_train(args, cfg: PipelineConfig) -> int:
    loss, inp, mode, region = parse_cell(args.cell)
    data = _load_manifest(args.data)
    eval_data = _load_manifest(args.eval) if args.eval else None
    overrides = cfg.training
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    try:
        config = TrainConfig(
            mode=mode,
            input_spec="full_frame" if inp == "full_frame" else f"crop:{region}",
            target_spec="complete" if loss == "complete" else f"local:{region}",
            head=args.head,
            **overrides,
        )
    except (TypeError, ValueError) as exc:
        raise CommandError("config", str(exc)) from exc
    init = None
    if args.init:
        init = _load_model(args.init)
    elif args.features:
        try:
            init = FeatureStage.load(args.features)
        except Exception as exc:  # noqa: BLE001
            raise CommandError("model", f"cannot load features {args.features}: {exc}") from exc
    try:
        model = train(data, config, init=init, eval_data=eval_data, crops=cfg.crops())
    except Exception as exc:  # noqa: BLE001
        raise CommandError("train", str(exc)) from exc
    out = Path(args.out)
    model.provenance["config_digest"] = cfg.digest()
    model.save(out)
    inputs = {"dataset_digest": data.digest()}
    if eval_data is not None:
        inputs["eval_digest"] = eval_data.digest()
    if init is not None:
        inputs["init_digest"] = init.digest()
    _write_provenance(out, "train", cfg, config.seed, inputs, _files(out))
    print(model.digest())
    return 0


def _model_dirs(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.rglob("model.json"))


def cmd_fit_ensemble(args, cfg: PipelineConfig) -> int:
    root = Path(args.models)
    dirs = _model_dirs(root)
    if not dirs:
        raise CommandError("fit-ensemble", f"no models under {root}")
    models = {str(d.relative_to(root)).replace("/", "-"): _load_model(d) for d in dirs}
    data = _load_manifest(args.data)
    split = args.split or cfg.raw["ensemble"]["split"]
    if split == "holdout":
        used = {m.provenance.get("dataset_digest") for m in models.values()}
        if data.digest() in used:
            raise CommandError("fit-ensemble", "holdout split requested but the manifest was used to train a model")
    crops = cfg.crops()
    try:
        matrix = prediction_matrix(models, data, crops)
        weights = fit_ensemble(matrix)
        ens = EnsembleModel(data.schema, models, weights, _adapter(cfg.adapter), crops,
                            {"config_digest": cfg.digest(), "fit_digest": data.digest(), "split": split})
    except CommandError:
        raise
    except Exception as exc:  # noqa: BLE001
        raise CommandError("fit-ensemble", str(exc)) from exc
    out = Path(args.out)
    ens.save(out)
    matrix.save(out / "matrices")
    inputs = {"fit_digest": data.digest(), **{f"model:{k}": m.digest() for k, m in models.items()}}
    _write_provenance(out, "fit-ensemble", cfg, None, inputs, _files(out))
    print(weights.digest())
    return 0


def _landmarks(text):
    if not text:
        raise CommandError("registration", "no landmarks given (--landmarks x1,y1,x2,y2); no detector is bundled")
    try:
        vals = [float(v) for v in text.split(",")]
    except ValueError:
        raise CommandError("registration", f"bad landmarks {text!r}") from None
    if len(vals) != 4:
        raise CommandError("registration", f"landmarks need 4 numbers, got {len(vals)}")
    return np.array(vals).reshape(2, 2)


def cmd_infer(args, cfg: PipelineConfig) -> int:
    lm = _landmarks(args.landmarks)
    ens = _load_ensemble(args.ensemble)
    adapter = _adapter(args.adapter) if args.adapter else ens.adapter
    try:
        image = read_png(args.image)
    except OSError as exc:
        raise CommandError("input", f"cannot read {args.image}: {exc}") from exc
    recipe = ensemble_predict(ens, image, lm, adapter)
    sys.stdout.write(serialize_mhm(recipe, ens.schema))
    return 0


def cmd_ablate(args, cfg: PipelineConfig) -> int:
    data = _load_manifest(args.data)
    eval_data = _load_manifest(args.eval) if args.eval else None
    features = FeatureStage.load(args.features) if args.features else None
    ab = cfg.raw["ablation"]
    regions = tuple(args.regions.split(",")) if args.regions else tuple(ab["regions"])
    overrides = cfg.training
    overrides.pop("seed", None)
    if args.max_epochs is not None:
        overrides["max_epochs"] = args.max_epochs
    grid = AblationGrid(regions=regions, train=overrides)
    seed = ab["seed"] if args.seed is None else args.seed
    report = run_ablation(data, grid, seed=seed, eval_data=eval_data, features=features, crops=cfg.crops(), jobs=args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(report.to_csv(), encoding="utf-8")
    (out / "ablation.txt").write_text(report.to_text(), encoding="utf-8")
    inputs = {"dataset_digest": data.digest()}
    if eval_data is not None:
        inputs["eval_digest"] = eval_data.digest()
    if features is not None:
        inputs["features_digest"] = features.digest()
    _write_provenance(out, "ablate", cfg, seed, inputs, _files(out))
    sys.stdout.write(report.to_text())
    return 0


def cmd_report(args, cfg: PipelineConfig) -> int:
    ens = _load_ensemble(args.ensemble)
    data = _load_manifest(args.eval)
    settings = {"off": IDENTITY, "on": ens.adapter}
    if args.adapter != "both":
        settings = {args.adapter: settings[args.adapter]}
    rep = reconstruction_report(ens, data, settings)
    text = rep.to_text()
    fit = Path(args.ensemble) / "matrices"
    if fit.exists():
        fitting = PredictionMatrix.load(fit, ens.schema)
        evaluation = prediction_matrix(ens.models, data, ens.crops, ens.adapter)
        text += "\n" + compare_constant_weights(ens.weights, fitting, evaluation).to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reconstruction.csv").write_text(rep.to_csv(), encoding="utf-8")
        (out / "report.txt").write_text(text, encoding="utf-8")
        inputs = {"ensemble_digest": ens.digest(), "eval_digest": data.digest()}
        _write_provenance(out, "report", cfg, None, inputs, _files(out))
    sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="f2p", description="Parametric face reconstruction pipeline on a toy renderer.")
    p.add_argument("--version", action="version", version=f"f2p {__version__}")
    p.add_argument("--config", help="pipeline config JSON (default: built-in defaults)")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a seeded dataset with a manifest")
    g.add_argument("--split", choices=("train", "eval"), default="train", help="which config data block to use")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--style-levels", help="posterization levels of the corpus, or 'none'")
    g.add_argument("--out", required=True)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(fn=cmd_gen_data)

    f = sub.add_parser("pretrain", help="pretrain the generic feature stage on random shapes")
    f.add_argument("--n", type=int)
    f.add_argument("--epochs", type=int)
    f.add_argument("--out", required=True)
    f.set_defaults(fn=cmd_pretrain)

    t = sub.add_parser("train", help="train one model (cell = loss,input,mode[,region])")
    t.add_argument("--cell", required=True, help="e.g. complete,full_frame,feature_extraction or local,crop,fine_tuning,nose")
    t.add_argument("--head", choices=("regression", "classification"), default="regression")
    t.add_argument("--data", required=True, help="training manifest")
    t.add_argument("--eval", help="manifest for the plateau schedule (default: 20%% holdout)")
    t.add_argument("--init", help="model directory to fine-tune from")
    t.add_argument("--features", help="pretrained feature stage for feature extraction")
    t.add_argument("--seed", type=int)
    t.add_argument("--max-epochs", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("fit-ensemble", help="fit per-coordinate blending weights")
    e.add_argument("--models", required=True, help="directory containing model directories")
    e.add_argument("--data", required=True, help="fitting manifest")
    e.add_argument("--split", choices=("train", "holdout"))
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_fit_ensemble)

    i = sub.add_parser("infer", help="print the inferred recipe of one image as mhm")
    i.add_argument("--ensemble", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--landmarks", help="x1,y1,x2,y2 eye centers in pixels")
    i.add_argument("--adapter", help="adapter id overriding the ensemble's")
    i.set_defaults(fn=cmd_infer)

    a = sub.add_parser("ablate", help="run the transfer-mode / decomposition ablation grid")
    a.add_argument("--data", required=True)
    a.add_argument("--eval")
    a.add_argument("--features")
    a.add_argument("--regions")
    a.add_argument("--seed", type=int)
    a.add_argument("--max-epochs", type=int)
    a.add_argument("--jobs", type=int, default=1)
    a.add_argument("--out", required=True)
    a.set_defaults(fn=cmd_ablate)

    r = sub.add_parser("report", help="re-render comparison with the adapter on and off")
    r.add_argument("--ensemble", required=True)
    r.add_argument("--eval", required=True)
    r.add_argument("--adapter", choices=("on", "off", "both"), default="both")
    r.add_argument("--out")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = PipelineConfig.load(args.config)
        return args.fn(args, cfg)
    except CommandError as exc:
        stage, msg = exc.stage, str(exc)
    except PipelineStageError as exc:
        stage, msg = exc.stage, str(exc)
    except ConfigError as exc:
        stage, msg = "config", str(exc)
    except Exception as exc:  # noqa: BLE001 - the single-line error contract covers everything
        stage, msg = args.command, f"{type(exc).__name__}: {exc}"
    sys.stderr.write(f"f2p: error: stage={stage} {_one_line(msg)}\n")
    return 1


if __name__ == "__main__":
    raise SystemExit(main())
