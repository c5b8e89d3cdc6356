"""Experiment orchestration: single runs, sweeps, ledgers, checkpoints.

A run executes the adversarial training loop with a privately trained
critic: every critic step clips per-example gradients, adds calibrated
noise, and charges the accountant; generator steps touch latent draws
only. Evaluation rows (privacy budget spent so far, losses, inception
score) are appended to a CSV ledger at a fixed cadence.

Runs are reproducible bit for bit from (config, seed): all randomness
flows from named child streams of one seed sequence, and wall-clock
timing can be disabled to make ledgers byte-identical.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .accountant import Accountant
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, config_as_text
from .data import (
    DatasetSpec,
    fixed_batch,
    load_or_synthesize,
    poisson_batch,
    synthetic_dataset,
)
from .dp_optim import PrivacyParams, init_adam
from .evaluation import ClassifierModel, build_classifier, inception_score, train_classifier
from .gan import (
    GanModel,
    GpConfig,
    LatentSampler,
    build_models,
    dp_critic_step,
    generate,
    generator_step,
)
from .ledger import LedgerRow, RunLedger


class RunFailure(RuntimeError):
    """A run aborted after starting; the ledger was flushed first."""


@dataclass
class RunResult:
    config: RunConfig
    ledger: RunLedger
    out_dir: Path
    final_epsilon: float
    final_is: float
    classifier_accuracy: float
    status: str


def _child_seeds(seed: int) -> dict[str, int]:
    """Named, independent integer seeds derived from the run seed."""
    names = ["data", "model", "latent", "noise", "eval_latent", "classifier"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {
        name: int(child.generate_state(1, dtype=np.uint64)[0])
        for name, child in zip(names, children)
    }


def prepare_classifier(cfg: RunConfig, out_dir: Path, seeds: dict[str, int]) -> ClassifierModel:
    """Load the configured classifier checkpoint, or train one.

    Training data is the deterministic synthetic corpus at the run's image
    side; the trained classifier is checkpointed next to the run outputs.
    """
    if cfg.classifier_path:
        params, meta = load_checkpoint(cfg.classifier_path)
        net = build_classifier(int(meta["side"]), int(meta["n_classes"]))
        if net.param_shapes() != {n: v.shape for n, v in params.items()}:
            raise ConfigError(f"{cfg.classifier_path}: classifier shapes do not match")
        return ClassifierModel(
            net=net,
            params=params,
            side=int(meta["side"]),
            n_classes=int(meta["n_classes"]),
            val_accuracy=float(meta["val_accuracy"]),
        )
    train = synthetic_dataset(cfg.classifier_train, seed=seeds["classifier"], side=cfg.image_side)
    val = synthetic_dataset(
        cfg.classifier_val, seed=seeds["classifier"] + 1, side=cfg.image_side
    )
    model = train_classifier(
        train, val, seed=seeds["classifier"], epochs=cfg.classifier_epochs
    )
    save_checkpoint(
        out_dir / "classifier.ckpt",
        model.params,
        {
            "kind": "classifier",
            "side": model.side,
            "n_classes": model.n_classes,
            "val_accuracy": model.val_accuracy,
        },
    )
    return model


def _evaluate(
    model: GanModel,
    classifier: ClassifierModel,
    eval_sampler: LatentSampler,
    n_samples: int,
    splits: int,
) -> tuple[float, float]:
    imgs = []
    remaining = n_samples
    while remaining > 0:
        k = min(256, remaining)
        imgs.append(generate(model, eval_sampler.sample(k)))
        remaining -= k
    images = np.concatenate(imgs, axis=0)
    result = inception_score(classifier, images, splits=splits)
    return result.mean, result.std


def _params_finite(model: GanModel) -> bool:
    for v in model.critic_params.leaves():
        if not np.all(np.isfinite(v)):
            return False
    for v in model.gen_params.leaves():
        if not np.all(np.isfinite(v)):
            return False
    return True


def run_experiment(cfg: RunConfig) -> RunResult:
    """Run one configuration end to end; see the module docstring.

    Raises RunFailure on NaN losses, non-finite parameters, or accountant
    overflow, with the ledger rows collected so far flushed to disk and
    the failure recorded in the run metadata.
    """
    cfg = cfg.validate()
    out_dir = Path(cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.txt").write_text(config_as_text(cfg))
    seeds = _child_seeds(cfg.seed)

    ledger = RunLedger()
    ledger_path = out_dir / "ledger.csv"

    def fail(message: str, meta_extra: dict | None = None) -> RunFailure:
        ledger.write(ledger_path)
        meta = {"status": message}
        if meta_extra:
            meta.update(meta_extra)
        (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
        return RunFailure(f"{message}; ledger flushed to {ledger_path}")

    spec = DatasetSpec(
        data_dir=cfg.data_dir,
        image_side=cfg.image_side,
        subset=cfg.subset,
    )
    dataset, source = load_or_synthesize(spec, seed=seeds["data"])
    if dataset.n < cfg.batch_size:
        raise ConfigError(
            f"dataset of {dataset.n} examples smaller than batch_size {cfg.batch_size}"
        )

    classifier = prepare_classifier(cfg, out_dir, seeds)

    model = build_models(
        capacity=cfg.capacity,
        latent_dim=cfg.latent_dim,
        image_side=cfg.image_side,
        seed=seeds["model"],
        gen_batchnorm=cfg.gen_batchnorm,
    )
    privacy = PrivacyParams(
        clip=cfg.clip,
        noise_multiplier=cfg.noise_multiplier,
        batch_size=cfg.batch_size,
        dataset_size=dataset.n,
        delta=cfg.delta,
    )
    gp = GpConfig(
        lambda_gp=cfg.lambda_gp,
        n_critic=cfg.n_critic,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        generator_ascent=(cfg.generator_objective == "ascend"),
    )
    try:
        accountant = Accountant(q=privacy.sampling_rate, sigma=cfg.noise_multiplier)
    except OverflowError as e:
        raise fail(f"failed: accountant overflow: {e}") from e

    critic_state = init_adam(
        model.critic_params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
    )
    gen_state = init_adam(
        model.gen_params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps
    )
    data_rng = np.random.Generator(np.random.Philox(key=seeds["data"]))
    noise_rng = np.random.Generator(np.random.Philox(key=seeds["noise"]))
    sampler = LatentSampler(seed=seeds["latent"], latent_dim=cfg.latent_dim)
    eval_sampler = LatentSampler(seed=seeds["eval_latent"], latent_dim=cfg.latent_dim)

    t_start = time.perf_counter()
    last_critic_loss = 0.0
    last_gen_score = 0.0
    status = "ok"
    failed_at = -1

    def wall() -> float:
        if cfg.timing == "none":
            return 0.0
        return time.perf_counter() - t_start

    def append_eval_row(step: int) -> None:
        ed = accountant.epsilon(cfg.delta)
        curve = accountant.curve
        rdp_eps = curve.eps.get(ed.alpha_star, 0.0) if ed.alpha_star >= 0 else 0.0
        is_mean, is_std = _evaluate(
            model, classifier, eval_sampler, cfg.eval_samples, cfg.eval_splits
        )
        ledger.append(
            LedgerRow(
                step=step,
                alpha_star=ed.alpha_star,
                rdp_eps=rdp_eps,
                epsilon=ed.epsilon,
                delta=cfg.delta,
                critic_loss=last_critic_loss,
                gen_loss=last_gen_score,
                is_mean=is_mean,
                is_std=is_std,
                wall_s=wall(),
            )
        )

    try:
        append_eval_row(0)
        for step in range(1, cfg.steps + 1):
            if cfg.sampling == "poisson":
                idx = poisson_batch(dataset, privacy.sampling_rate, data_rng)
            else:
                idx = fixed_batch(dataset, cfg.batch_size, data_rng)
            batch = dataset.images[idx]
            critic_state, _, last_critic_loss = dp_critic_step(
                model, batch, sampler, privacy, gp, critic_state, accountant, noise_rng
            )
            if step % cfg.n_critic == 0:
                gen_state, last_gen_score = generator_step(model, sampler, gp, gen_state)
            if not math.isfinite(last_critic_loss) or not _params_finite(model):
                status = f"failed: non-finite state at step {step}"
                failed_at = step
                break
            if step % cfg.eval_every == 0 or step == cfg.steps:
                append_eval_row(step)
    finally:
        ledger.write(ledger_path)

    final = accountant.epsilon(cfg.delta)
    save_checkpoint(
        out_dir / "generator.ckpt",
        model.gen_params,
        {
            "kind": "generator",
            "arch": model.arch(),
            "accountant": accountant.state(),
            "clip": cfg.clip,
        },
    )
    save_checkpoint(
        out_dir / "critic.ckpt",
        model.critic_params,
        {
            "kind": "critic",
            "arch": model.arch(),
            "accountant": accountant.state(),
            "clip": cfg.clip,
        },
    )
    meta = {
        "status": status,
        "dataset_source": source,
        "dataset_size": dataset.n,
        "sampling_rate": privacy.sampling_rate,
        "classifier_accuracy": classifier.val_accuracy,
        "final_epsilon": final.epsilon if math.isfinite(final.epsilon) else "inf",
        "final_alpha_star": final.alpha_star,
        "accounted_steps": accountant.steps,
        "failed_at": failed_at,
    }
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    final_is = ledger.rows[-1].is_mean if ledger.rows else 0.0
    if status != "ok":
        raise RunFailure(f"{status}; ledger flushed to {ledger_path}")
    return RunResult(
        config=cfg,
        ledger=ledger,
        out_dir=out_dir,
        final_epsilon=final.epsilon,
        final_is=final_is,
        classifier_accuracy=classifier.val_accuracy,
        status=status,
    )


# ---------------------------------------------------------------------------
# sweeps

SWEEP_HEADER = (
    "clip,noise_multiplier,capacity,step,alpha_star,rdp_eps,epsilon,delta,"
    "critic_loss,gen_loss,is_mean,is_std,wall_s"
)


@dataclass
class SweepResult:
    results: list[RunResult]
    failures: dict[str, str]
    combined_csv: Path
    out_dir: Path


def _run_name(cfg: RunConfig) -> str:
    return f"C{cfg.clip:g}_sigma{cfg.noise_multiplier:g}_cap{cfg.capacity}"


def sweep(configs: list[RunConfig], out_dir: str | Path, baseline: bool = True) -> SweepResult:
    """Run each config, then merge ledgers into one plot-ready CSV.

    Adds a non-private baseline (noise 0, no effective clipping) cloned
    from the first config unless one is already present or ``baseline``
    is False. A failing run is recorded and the sweep continues; its
    flushed ledger rows still enter the combined CSV. Configs are assumed
    to share dataset and evaluation settings, so the classifier trained by
    the first run is reused by the rest.
    """
    if not configs:
        raise ConfigError("sweep needs at least one config")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    todo = list(configs)
    if baseline and not any(c.noise_multiplier == 0.0 for c in todo):
        todo.append(replace(todo[0], noise_multiplier=0.0, clip=math.inf))
    results: list[RunResult] = []
    failures: dict[str, str] = {}
    lines = [SWEEP_HEADER]
    summary: dict[str, str] = {}
    shared_classifier = ""
    for cfg in todo:
        name = _run_name(cfg)
        run_dir = out_dir / name
        cfg_run = replace(cfg, out=str(run_dir))
        if shared_classifier and not cfg_run.classifier_path:
            cfg_run = replace(cfg_run, classifier_path=shared_classifier)
        try:
            res = run_experiment(cfg_run)
            results.append(res)
            summary[name] = "ok"
            rows = res.ledger.rows
        except RunFailure as e:
            failures[name] = str(e)
            summary[name] = str(e)
            try:
                rows = RunLedger.read(run_dir / "ledger.csv").rows
            except Exception:
                rows = []
        except ConfigError as e:
            failures[name] = f"config error: {e}"
            summary[name] = failures[name]
            rows = []
        if not shared_classifier and (run_dir / "classifier.ckpt").exists():
            shared_classifier = str(run_dir / "classifier.ckpt")
        for r in rows:
            lines.append(
                f"{cfg_run.clip:.17g},{cfg_run.noise_multiplier:.17g},{cfg_run.capacity},"
                f"{r.step},{r.alpha_star},{r.rdp_eps:.17g},{r.epsilon:.17g},"
                f"{r.delta:.17g},{r.critic_loss:.17g},{r.gen_loss:.17g},"
                f"{r.is_mean:.17g},{r.is_std:.17g},{r.wall_s:.17g}"
            )
    combined = out_dir / "sweep.csv"
    combined.write_text("\n".join(lines) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return SweepResult(
        results=results, failures=failures, combined_csv=combined, out_dir=out_dir
    )
