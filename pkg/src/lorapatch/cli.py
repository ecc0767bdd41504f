"""Command-line interface: ``lorapatch <command> ...``.

Every command reads one declarative :class:`RunConfig` (defaults, then an
optional ``--config`` JSON/TOML file, then ``--set key.path=value``
overrides, then command flags) and writes ``run_manifest.json`` next to its
outputs with the resolved config and the checksums of every input.

Relative ``--out`` paths are resolved against ``$LORAPATCH_OUT`` when set.
Exit codes: 0 success, 2 configuration/data errors, 3 I/O and file-format
errors, 4 training divergence or attack failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import torch

from . import __version__
from .attacks import AttackSpec, protect, save_protected
from .dataio import Dataset, dataset_checksum, load_folder, save_folder, split, synth_faces
from .errors import ConfigError, LoraPatchError, TrainingDivergenceError
from .finetune import FinetuneConfig, jpeg_baseline, run_finetune
from .metrics import DsrConfig, MetricRow, build_report, dsr_from_distances, evaluate_pair, per_image_l2, save_contact_sheet
from .model_zoo import (
    GeneratorSpec,
    TransformSpec,
    build_feature_extractor,
    build_semantic_encoder,
    build_toy_generator,
    evaluate_mse,
    train_toy_generator,
)
from .patchio import load_generator, load_patch, save_generator, save_patch
from .surgery import apply_patch, merge_patch, module_checksum
from .watermark import default_watermark

logger = logging.getLogger("lorapatch")

OUT_ROOT_ENV = "LORAPATCH_OUT"
RUN_MANIFEST = "run_manifest.json"
GENERATOR_FILE = "generator.lora"
PATCH_FILE = "patch.lora"


# -- configuration ------------------------------------------------------------

@dataclass
class DataConfig:
    n_train: int = 1000
    n_test: int = 200
    image_size: int = 64
    train_seed: int = 1
    test_seed: int = 2


@dataclass
class TrainGenConfig:
    epochs: int = 20
    batch_size: int = 16
    learning_rate: float = 2e-3
    heldout_fraction: float = 0.2
    split_seed: int = 0
    noise_augment: float = 0.08
    noise_fraction: float = 0.5


@dataclass
class WatermarkConfig:
    text: str = "AI"
    opacity: float = 0.8
    foreground_value: float = 1.0
    width_fraction: float = 0.25
    margin_fraction: float = 0.06

    def build(self, image_size: int):
        return default_watermark(image_size, self.text, self.opacity, self.foreground_value,
                                 self.width_fraction, self.margin_fraction)


@dataclass
class EncoderConfig:
    feature_dim: int = 512
    feature_seed: int = 3
    semantic_dim: int = 256
    semantic_seed: int = 5

    def build(self, image_size: int):
        f = build_feature_extractor(out_dim=self.feature_dim, seed=self.feature_seed, image_size=image_size)
        e = build_semantic_encoder(out_dim=self.semantic_dim, seed=self.semantic_seed,
                                   feature_dim=self.feature_dim, image_size=image_size)
        return f, e


@dataclass
class EvalConfig:
    jpeg_quality: int = 75
    taus: list = field(default_factory=lambda: [0.01, 0.05, 0.1])
    fid: bool = False


@dataclass
class RunConfig:
    """Everything a run depends on, serialised into every manifest."""

    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    transform: TransformSpec = field(default_factory=lambda: TransformSpec("synthetic_attribute_overlay"))
    train_gen: TrainGenConfig = field(default_factory=TrainGenConfig)
    attack: AttackSpec = field(default_factory=AttackSpec)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    dsr: DsrConfig = field(default_factory=DsrConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    encoders: EncoderConfig = field(default_factory=EncoderConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["transform"] = {"kind": self.transform.kind, "parameters": dict(self.transform.parameters)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _from_dict(cls, d)


_NESTED = {
    "data": DataConfig, "generator": GeneratorSpec, "train_gen": TrainGenConfig,
    "attack": AttackSpec, "dsr": DsrConfig, "watermark": WatermarkConfig,
    "encoders": EncoderConfig, "eval": EvalConfig,
}


def _from_dict(cls, d: dict) -> RunConfig:
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in d.items():
        if key in _NESTED:
            sub = _NESTED[key]
            bad = set(value) - {f.name for f in fields(sub)}
            if bad:
                raise ConfigError(f"unknown keys in [{key}]: {sorted(bad)}")
            try:
                kwargs[key] = sub(**value)
            except TypeError as exc:
                raise ConfigError(f"bad [{key}] section: {exc}") from exc
        elif key == "transform":
            kwargs[key] = TransformSpec.from_dict(value)
        elif key == "finetune":
            bad = set(value) - {f.name for f in fields(FinetuneConfig)}
            if bad:
                raise ConfigError(f"unknown keys in [finetune]: {sorted(bad)}")
            kwargs[key] = FinetuneConfig(**value)
        else:
            kwargs[key] = value
    cfg = cls(**kwargs)
    cfg.generator.validate()
    cfg.transform.validate()
    return cfg


def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("parameters", "paths"):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out


def _read_config_file(path: Path) -> dict:
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        try:
            doc = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    else:
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from exc
    # A run manifest embeds its config under "config"; accept it directly.
    if isinstance(doc, dict) and "config" in doc and "command" in doc:
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a table/object")
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_set(doc: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key.path=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = _parse_value(value)


def load_run_config(path=None, sets=(), overrides: dict | None = None) -> RunConfig:
    """Defaults < config file < ``--set`` assignments < command flags."""
    doc = RunConfig().to_dict()
    if path:
        doc = _deep_merge(doc, _read_config_file(Path(path)))
    extra: dict = {}
    for s in sets or ():
        _apply_set(extra, s)
    doc = _deep_merge(doc, extra)
    if overrides:
        doc = _deep_merge(doc, overrides)
    return RunConfig.from_dict(doc)


# -- helpers ------------------------------------------------------------------

def resolve_out(path) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _artifact(path, name: str) -> Path:
    p = Path(path)
    return p / name if p.is_dir() else p


def write_run_manifest(out_dir: Path, command: str, cfg: RunConfig, inputs: dict, outputs: dict,
                       extra: dict | None = None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "argv": sys.argv[1:],
        "config": cfg.to_dict(),
        "inputs": inputs,
        "outputs": outputs,
        "versions": {"lorapatch": __version__, "torch": torch.__version__, "python": platform.python_version()},
        "created_unix": int(time.time()),
        **(extra or {}),
    }
    path = out_dir / RUN_MANIFEST
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))
    return path


def _load_model(path):
    p = _artifact(path, GENERATOR_FILE)
    return load_generator(p), {"path": str(p), "sha256": file_sha256(p)}


def _load_patch(path):
    p = _artifact(path, PATCH_FILE)
    return load_patch(p), {"path": str(p), "sha256": file_sha256(p)}


def _load_data(path, size: int, limit: int | None = None):
    ds = load_folder(path, size=size, limit=limit)
    return ds, {"path": str(path), "n": len(ds), "checksum": dataset_checksum(ds)}


@torch.no_grad()
def run_model(model, images: torch.Tensor, batch_size: int = 32) -> torch.Tensor:
    model.eval()
    return torch.cat([model(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


# -- command implementations --------------------------------------------------

def cmd_synth_data(cfg: RunConfig, n: int, size: int, seed: int, out: Path) -> Dataset:
    ds = synth_faces(n, size, seed)
    save_folder(ds, out)
    write_run_manifest(out, "synth-data", cfg, {"n": n, "size": size, "seed": seed},
                       {"dataset": str(out), "checksum": dataset_checksum(ds)})
    logger.info("wrote %d synthetic faces to %s", n, out)
    return ds


def cmd_train_gen(cfg: RunConfig, data: Path, out: Path):
    ds, data_info = _load_data(data, cfg.data.image_size)
    tg = cfg.train_gen
    train, heldout = split(ds, (1 - tg.heldout_fraction, tg.heldout_fraction), seed=tg.split_seed)
    gen = build_toy_generator(cfg.generator)
    train_toy_generator(gen, train, cfg.transform, epochs=tg.epochs, batch_size=tg.batch_size,
                        learning_rate=tg.learning_rate, seed=cfg.seed, noise_augment=tg.noise_augment,
                        noise_fraction=tg.noise_fraction)
    mse = evaluate_mse(gen, heldout, cfg.transform)
    out.mkdir(parents=True, exist_ok=True)
    path = save_generator(gen, out / GENERATOR_FILE, meta={
        "transform": {"kind": cfg.transform.kind, "parameters": cfg.transform.parameters},
        "heldout_mse": mse})
    (out / "loss.csv").write_text("step,loss\n" + "".join(f"{i},{v:.6g}\n" for i, v in enumerate(gen.loss_trace)))
    write_run_manifest(out, "train-gen", cfg, {"data": data_info},
                       {"generator": str(path), "sha256": file_sha256(path), "heldout_mse": mse,
                        "base_model_checksum": module_checksum(gen)})
    print(f"held-out MSE: {mse:.6f}")
    return gen, mse


def cmd_protect(cfg: RunConfig, model: Path, data: Path, scenario: str, out: Path, patch: Path | None = None):
    gen, model_info = _load_model(model)
    inputs = {"model": model_info}
    if scenario == "leakage":
        if patch is None:
            raise ConfigError("the leakage scenario needs --patch (the exposed patched model)")
        p, patch_info = _load_patch(patch)
        target = apply_patch(gen, p)
        inputs["patch"] = patch_info
    elif scenario == "standard":
        if patch is not None:
            raise ConfigError("--patch only applies to the leakage scenario")
        target = gen
    else:
        raise ConfigError(f"unknown scenario {scenario!r}")
    ds, inputs["data"] = _load_data(data, cfg.data.image_size)
    spec = cfg.attack
    if spec.objective != "disrupt_self":
        raise ConfigError("protect uses the disrupt_self objective")
    protected = protect(target, ds, spec)
    save_protected(protected, out, spec, target, extra={"scenario": scenario})
    clean = run_model(target, ds.images)
    adv = run_model(target, protected.images)
    d = per_image_l2(adv, clean)
    summary = {"scenario": scenario, "mean_l2": d.mean().item(),
               "dsr": dsr_from_distances(d.tolist(), cfg.dsr.tau), "tau": cfg.dsr.tau,
               "max_linf": (protected.images - ds.images).abs().max().item()}
    write_run_manifest(out, "protect", cfg, inputs, {"dataset": str(out), **summary})
    print(f"protected {len(ds)} images ({scenario}): mean L2 {summary['mean_l2']:.4f}, "
          f"DSR {summary['dsr']:.3f} at tau={cfg.dsr.tau}")
    return protected, summary


def cmd_patch_train(cfg: RunConfig, model: Path, data: Path, out: Path, limit: int | None = None):
    gen, model_info = _load_model(model)
    ds, data_info = _load_data(data, cfg.data.image_size, limit=limit)
    fc = cfg.finetune
    watermark = cfg.watermark.build(ds.resolution[0]) if fc.mode == "defensive" else None
    f_enc, e_enc = cfg.encoders.build(ds.resolution[0])
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    try:
        patch, trace = run_finetune(gen, ds, watermark, fc, f_enc, e_enc)
    except TrainingDivergenceError as exc:
        if exc.trace is not None:
            exc.trace.write_csv(out / "trace.csv")
        write_run_manifest(out, "patch-train", cfg, {"model": model_info, "data": data_info},
                           {"trace": str(out / "trace.csv"), "diverged": True, "error": str(exc)})
        raise
    path = save_patch(patch, out / PATCH_FILE)
    trace.write_csv(out / "trace.csv")
    totals = trace.totals()
    outputs = {"patch": str(path), "sha256": file_sha256(path), "trace": str(out / "trace.csv"),
               "iterations": len(trace), "all_finite": trace.all_finite, "diverged": trace.diverged,
               "final_loss": totals[-1] if totals else None, "seconds": time.time() - started,
               "trainable_parameters": patch.num_parameters()}
    write_run_manifest(out, "patch-train", cfg, {"model": model_info, "data": data_info}, outputs)
    print(f"patch ({fc.mode}, rank {fc.rank}) trained for {len(trace)} iterations; "
          f"final loss {outputs['final_loss']:.5f}")
    return patch, trace


def cmd_forge(cfg: RunConfig, model: Path, data: Path, out: Path, patch: Path | None = None,
              jpeg: int | None = None):
    gen, model_info = _load_model(model)
    ds, data_info = _load_data(data, cfg.data.image_size)
    inputs = {"model": model_info, "data": data_info}
    x = jpeg_baseline(ds.images, jpeg) if jpeg else ds.images
    base_out = run_model(gen, x)
    columns = [ds.images, base_out]
    result = base_out
    if patch is not None:
        p, inputs["patch"] = _load_patch(patch)
        result = run_model(apply_patch(gen, p), x)
        columns.append(result)
    forged = ds.with_images(result.clamp(-1, 1), forged="true")
    save_folder(forged, out)
    sheet = save_contact_sheet(columns, out / "contact_sheet.png")
    write_run_manifest(out, "forge", cfg, inputs,
                       {"outputs": str(out), "contact_sheet": str(sheet), "jpeg_quality": jpeg,
                        "patched": patch is not None, "checksum": dataset_checksum(forged)})
    return forged


def cmd_eval(cfg: RunConfig, desired: Path, candidates: list[Path], names: list[str] | None, out: Path,
             scenario: str = "standard", defense: str = "pgd", model_name: str = "toy",
             benign_base: Path | None = None, benign_patched: Path | None = None):
    size = cfg.data.image_size
    want, want_info = _load_data(desired, size)
    names = names or [Path(c).name for c in candidates]
    if len(names) != len(candidates):
        raise ConfigError("--names must match --candidates one to one")
    encoder = build_feature_extractor(out_dim=cfg.encoders.feature_dim, seed=cfg.encoders.feature_seed,
                                      image_size=size) if cfg.eval.fid else None
    tau = cfg.dsr.tau
    rows, inputs, sweep = [], {"desired": want_info}, []
    for name, cand in zip(names, candidates):
        got, inputs[f"candidate:{name}"] = _load_data(cand, size)
        if got.ids != want.ids:
            raise ConfigError(f"candidate {name} ids do not match the desired set")
        rows.append(evaluate_pair(got.images, want.images, defense, name, model_name, scenario, tau, encoder))
        d = per_image_l2(got.images, want.images).tolist()
        sweep.append([name] + [dsr_from_distances(d, t) for t in cfg.eval.taus])
    if (benign_base is None) != (benign_patched is None):
        raise ConfigError("benign-impact rows need both --benign-base and --benign-patched")
    if benign_base is not None:
        b0, inputs["benign_base"] = _load_data(benign_base, size)
        b1, inputs["benign_patched"] = _load_data(benign_patched, size)
        rows.append(evaluate_pair(b1.images, b0.images, "none", "patch", model_name, "benign_impact", tau, encoder))
    report = build_report(rows, title=f"{defense} / {model_name} ({scenario})")
    out = Path(out)
    csv_path, md_path = report.write(out)
    sweep_path = out.with_name(out.name + "_tau_sweep.csv")
    sweep_path.write_text("candidate," + ",".join(f"dsr@{t:g}" for t in cfg.eval.taus) + "\n"
                          + "".join(",".join([r[0]] + [f"{v:.6g}" for v in r[1:]]) + "\n" for r in sweep))
    write_run_manifest(out.parent, "eval", cfg, inputs,
                       {"csv": str(csv_path), "markdown": str(md_path), "tau_sweep": str(sweep_path)},
                       extra={"rows": [asdict(r) for r in rows]})
    print(report.markdown)
    return report


def cmd_patch_export(cfg: RunConfig, model: Path, patch: Path, out: Path) -> Path:
    """Verify a patch against its base model and write a canonical copy plus digest."""
    gen, model_info = _load_model(model)
    p, patch_info = _load_patch(patch)
    apply_patch(gen, p)  # geometry check; checksum mismatch warns
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    path = save_patch(p, out)
    digest = file_sha256(path)
    path.with_name(path.name + ".sha256").write_text(f"{digest}  {path.name}\n")
    write_run_manifest(path.parent, "patch-export", cfg, {"model": model_info, "patch": patch_info},
                       {"patch": str(path), "sha256": digest})
    return path


def cmd_patch_import(cfg: RunConfig, model: Path, patch: Path, out: Path):
    """Check a distributed patch (container digest and optional sidecar), merge it, save the generator."""
    patch_path = _artifact(patch, PATCH_FILE)
    sidecar = patch_path.with_name(patch_path.name + ".sha256")
    if sidecar.exists():
        expected = sidecar.read_text().split()[0]
        if expected != file_sha256(patch_path):
            from .errors import ChecksumError

            raise ChecksumError(f"{patch_path} does not match its published digest")
    gen, model_info = _load_model(model)
    p, patch_info = _load_patch(patch_path)
    merged = merge_patch(apply_patch(gen, p))
    merged.spec = gen.spec
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    path = save_generator(merged, out / GENERATOR_FILE, meta={"merged_patch_sha256": patch_info["sha256"]})
    write_run_manifest(out, "patch-import", cfg, {"model": model_info, "patch": patch_info},
                       {"generator": str(path), "sha256": file_sha256(path)})
    return merged


def cmd_repro(cfg: RunConfig, out: Path) -> dict:
    """synth-data -> train-gen -> protect -> patch-train -> forge -> eval in one go."""
    d = cfg.data
    train_dir, test_dir = out / "data" / "train", out / "data" / "test"
    cmd_synth_data(cfg, d.n_train, d.image_size, d.train_seed, train_dir)
    cmd_synth_data(cfg, d.n_test, d.image_size, d.test_seed, test_dir)
    cmd_train_gen(cfg, train_dir, out / "generator")
    _, summary = cmd_protect(cfg, out / "generator", test_dir, "standard", out / "protected")
    cmd_patch_train(cfg, out / "generator", train_dir, out / "patch", limit=d.n_train)
    forge = out / "forge"
    cmd_forge(cfg, out / "generator", test_dir, forge / "desired")
    cmd_forge(cfg, out / "generator", out / "protected", forge / "no_bypass")
    cmd_forge(cfg, out / "generator", out / "protected", forge / "jpeg", jpeg=cfg.eval.jpeg_quality)
    cmd_forge(cfg, out / "generator", out / "protected", forge / "patched", patch=out / "patch")
    cmd_forge(cfg, out / "generator", test_dir, forge / "benign_patched", patch=out / "patch")
    report = cmd_eval(cfg, forge / "desired",
                      [forge / "no_bypass", forge / "jpeg", forge / "patched"],
                      ["no_bypass", f"jpeg_q{cfg.eval.jpeg_quality}", "lora_patch"], out / "report" / "table",
                      benign_base=forge / "desired", benign_patched=forge / "benign_patched")
    write_run_manifest(out, "repro", cfg, {}, {"report": str(out / "report" / "table.md"),
                                               "protect_summary": summary})
    return {"report": report, "protect_summary": summary}


# -- argument parsing ---------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or TOML run config (a run_manifest.json also works)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set finetune.learning_rate=5e-4")
    p.add_argument("--seed", type=int, help="global seed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lorapatch", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a synthetic face dataset")
    _common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("train-gen", help="train the toy generator M_o")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("protect", help="PGD-protect a folder against a model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eps", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float)
    p.add_argument("--scenario", choices=("standard", "leakage"), default="standard")
    p.add_argument("--patch", help="patch file/dir (leakage scenario target)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("patch-train", help="fine-tune a LoRA patch")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("bypass", "defensive"))
    p.add_argument("--rank", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--limit", type=int, help="use the first N images (default data.n_train)")
    p.add_argument("--no-gating", action="store_true")
    p.add_argument("--no-mmfa", action="store_true")
    p.add_argument("--no-adversarial", action="store_true", help="control run without the inner attack")
    p.add_argument("--out", required=True)

    p = sub.add_parser("forge", help="run M_o (or M_p with --patch) over a folder")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--patch")
    p.add_argument("--data", required=True)
    p.add_argument("--jpeg", type=int, help="JPEG-recompress inputs at this quality first")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="metric report for candidate output folders")
    _common(p)
    p.add_argument("--desired", required=True)
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--tau", type=float, nargs="+", help="first value is the DSR threshold; all go in the sweep")
    p.add_argument("--scenario", default="standard", choices=("standard", "leakage", "defensive"))
    p.add_argument("--defense", default="pgd")
    p.add_argument("--model-name", default="toy")
    p.add_argument("--benign-base")
    p.add_argument("--benign-patched")
    p.add_argument("--fid", action="store_true", help="add the toy-FID column")
    p.add_argument("--out", required=True, help="report path stem (writes .csv and .md)")

    p = sub.add_parser("patch", help="patch export/import")
    psub = p.add_subparsers(dest="patch_command", required=True)
    q = psub.add_parser("export", help="verify and publish a patch with a digest sidecar")
    _common(q)
    q.add_argument("--model", required=True)
    q.add_argument("--patch", required=True)
    q.add_argument("--out", required=True)
    q = psub.add_parser("import", help="verify a patch and merge it into a generator")
    _common(q)
    q.add_argument("--model", required=True)
    q.add_argument("--patch", required=True)
    q.add_argument("--out", required=True)

    p = sub.add_parser("repro", help="synth-data -> train-gen -> protect -> patch-train -> forge -> eval")
    _common(p)
    p.add_argument("--out", required=True)
    return parser


def _overrides(args) -> dict:
    o: dict = {}

    def put(section, key, value):
        if value is not None:
            o.setdefault(section, {})[key] = value

    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    cmd = args.command
    if cmd == "synth-data":
        put("data", "image_size", args.size)
    if cmd == "train-gen":
        put("train_gen", "epochs", args.epochs)
    if cmd == "protect":
        put("attack", "epsilon", args.eps)
        put("attack", "steps", args.steps)
        put("attack", "step_size", args.step_size)
    if cmd == "patch-train":
        put("finetune", "mode", args.mode)
        put("finetune", "rank", args.rank)
        put("finetune", "epochs", args.epochs)
        put("finetune", "learning_rate", args.lr)
        if args.no_gating:
            put("finetune", "use_gating", False)
        if args.no_mmfa:
            put("finetune", "use_mmfa", False)
        if args.no_adversarial:
            put("finetune", "adversarial", False)
    if cmd == "eval":
        if args.tau:
            put("dsr", "tau", args.tau[0])
            put("eval", "taus", list(args.tau))
        if args.fid:
            put("eval", "fid", True)
    return o


def dispatch(args) -> int:
    cfg = load_run_config(args.config, args.set, _overrides(args))
    out = resolve_out(args.out)
    cmd = args.command
    if cmd == "synth-data":
        n = args.n if args.n is not None else cfg.data.n_train
        seed = args.seed if args.seed is not None else cfg.data.train_seed
        cmd_synth_data(cfg, n, cfg.data.image_size, seed, out)
    elif cmd == "train-gen":
        cmd_train_gen(cfg, Path(args.data), out)
    elif cmd == "protect":
        cmd_protect(cfg, Path(args.model), Path(args.data), args.scenario, out,
                    Path(args.patch) if args.patch else None)
    elif cmd == "patch-train":
        cmd_patch_train(cfg, Path(args.model), Path(args.data), out,
                        limit=args.limit if args.limit is not None else cfg.data.n_train)
    elif cmd == "forge":
        cmd_forge(cfg, Path(args.model), Path(args.data), out, Path(args.patch) if args.patch else None,
                  args.jpeg)
    elif cmd == "eval":
        cmd_eval(cfg, Path(args.desired), [Path(c) for c in args.candidates], args.names, out,
                 args.scenario, args.defense, args.model_name,
                 Path(args.benign_base) if args.benign_base else None,
                 Path(args.benign_patched) if args.benign_patched else None)
    elif cmd == "patch":
        if args.patch_command == "export":
            cmd_patch_export(cfg, Path(args.model), Path(args.patch), out)
        else:
            cmd_patch_import(cfg, Path(args.model), Path(args.patch), out)
    elif cmd == "repro":
        cmd_repro(cfg, out)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(int(os.environ.get("LORAPATCH_THREADS", torch.get_num_threads())))
    try:
        return dispatch(args)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return exc.exit_code
    except LoraPatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
