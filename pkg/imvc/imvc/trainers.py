"""
Training loop: autoencoder pretraining on the reconstruction loss, then
fine-tuning every network with hierarchical imputation and the total loss,
followed by final label extraction.
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
import json
import os

import numpy as np
from sklearn.decomposition import PCA
import torch
from torch.utils.data import DataLoader
from tqdm import tqdm
import wandb

from .base import ConfigError, DataError, EmptyViewError, MetadataBase, NumericError
from .datasets import DataSources, ViewDataset, normalize
from .diffnet import ParamStore, Tape, adam_step, backward
from .imputation import (
    build_similarity_table,
    compute_prototypes,
    impute_assignments,
    impute_features,
)
from .io import RunWriter, SweepIndexWriter
from .losses import loss_caa, loss_ebm, loss_rec, loss_total
from .metrics import evaluate
from .model import Architecture, ModelBundle, Provenance, hard_labels, load_checkpoint

PROTOTYPE_SCOPES = ("batch", "epoch")
WANDB_MODES = ("disabled", "offline", "online")
SWEEP_GRID = (0.001, 0.01, 0.05, 0.1, 1.0)


@dataclass
class TrainConfig(MetadataBase):
    alpha: float = 0.1
    beta: float = 0.01
    tau: float = 0.5
    lr: float = 1e-3
    pretrain_epochs: int = 50
    finetune_epochs: int = 60
    batch_size: int = 100
    seed: int = 0
    k: int = None
    latent_dim: int = 32
    encoder_hidden: list = field(default_factory=lambda: [64, 128])
    predictor_hidden: list = field(default_factory=lambda: [64])
    energy_hidden: list = field(default_factory=lambda: [64, 64, 64])
    use_rec: bool = True
    use_ebm: bool = True
    use_caa: bool = True
    detach_anchors: bool = True
    detach_imputed: bool = True
    prototype_scope: str = "batch"
    normalize: bool = True
    debug_dump: bool = False
    wandb_mode: str = "disabled"

    @classmethod
    def desk(cls, **overrides):
        return cls(**overrides).validate()

    @classmethod
    def full_scale(cls, **overrides):
        """
        Widths, epochs and optimiser settings of the full-size benchmark runs.
        """
        settings = dict(
            lr=1e-4,
            pretrain_epochs=100,
            finetune_epochs=200,
            batch_size=200,
            latent_dim=2000,
            encoder_hidden=[256, 512],
            predictor_hidden=[1024],
            energy_hidden=[256, 256, 256],
        )
        return cls(**(settings | overrides)).validate()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, path):
        """
        Reads a config file. A run.json written by a previous run is accepted
        too; its "config" section is used.
        """
        try:
            with open(path) as f:
                d = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"{path}: no such config file")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}")
        if "command" in d and "config" in d:
            d = d["config"]
        return cls.from_dict(d)

    def validate(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be non-negative")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.batch_size < 1 or self.latent_dim < 1:
            raise ConfigError("batch_size and latent_dim must be positive")
        if self.k is not None and self.k < 1:
            raise ConfigError(f"k must be positive, got {self.k}")
        for name in ("encoder_hidden", "predictor_hidden", "energy_hidden"):
            if any(int(w) < 1 for w in getattr(self, name)):
                raise ConfigError(f"{name} widths must be positive")
        if self.prototype_scope not in PROTOTYPE_SCOPES:
            raise ConfigError(f"prototype_scope must be one of {PROTOTYPE_SCOPES}")
        if self.wandb_mode not in WANDB_MODES:
            raise ConfigError(f"wandb_mode must be one of {WANDB_MODES}")
        return self

    def resolved(self, dataset: ViewDataset):
        """
        Fills k from the ground-truth labels when it was not given.
        """
        if self.k is not None:
            return self
        if dataset.labels is None:
            raise ConfigError("k is not set and the dataset has no labels to infer it from")
        return TrainConfig.from_dict(self.to_dict() | {"k": len(np.unique(dataset.labels))})

    def architecture(self, view_dims):
        if self.k is None:
            raise ConfigError("k must be resolved before building networks")
        return Architecture(
            view_dims=view_dims,
            k=self.k,
            latent_dim=self.latent_dim,
            encoder_hidden=self.encoder_hidden,
            predictor_hidden=self.predictor_hidden,
            energy_hidden=self.energy_hidden,
        )

    def to_dict(self):
        return asdict(self)

    def get_metadata(self):
        return super().get_metadata() | self.to_dict()


@dataclass
class TrainState:
    epoch: int = 0
    pretrain_epoch: int = 0
    pretrain_history: list = field(default_factory=list)
    history: list = field(default_factory=list)
    imputed_assignments: list = field(default_factory=list)
    imputed_features: list = field(default_factory=list)
    best_epoch: int = None
    best_total: float = None
    debug: list = field(default_factory=list)


@dataclass
class BatchStep:
    report: object
    latents: object
    assignments: object
    table: object


@dataclass
class Completion:
    latents: object
    assignments: object
    table: object
    prototypes: list


def log_metrics(metrics):
    # Trainers also run outside `run`, where no wandb run is active.
    if wandb.run is not None:
        wandb.log(metrics)


def batch_seed(seed, epoch):
    return seed * 1_000_003 + epoch


def build_bundle(view_dims, config: TrainConfig):
    torch.manual_seed(config.seed)
    return ModelBundle(config.architecture(view_dims))


def view_prototypes(latents, mask, assignments, k, detach=True):
    """
    Prototypes of every view, or None for a view with no observed rows.
    """
    prototypes = []
    for v, h in enumerate(latents):
        try:
            prototypes.append(compute_prototypes(
                h.detach() if detach else h, mask[:, v], assignments.labels[v], k, view=v
            ))
        except EmptyViewError:
            prototypes.append(None)
    return prototypes


def complete(bundle: ModelBundle, dataset: ViewDataset, config: TrainConfig) -> Completion:
    """
    No-grad pass over the whole dataset in order, followed by assignment and
    feature completion over all N samples.
    """
    loader = DataLoader(
        dataset, batch_size=config.batch_size, shuffle=False, collate_fn=dataset.collate
    )
    chunks = [[] for _ in range(dataset.v_count)]
    with torch.no_grad():
        for batch in loader:
            for v, x in enumerate(batch.views):
                chunks[v].append(bundle.encode_batch(x, v))
        latents = [torch.cat(c) for c in chunks]
        mask = dataset.tensors()[1]
        q = [bundle.predict_assignments(h) for h in latents]
        table = build_similarity_table(q, [hard_labels(x) for x in q], mask, config.tau)
        assignments = impute_assignments(q, mask, table)
        prototypes = view_prototypes(latents, mask, assignments, bundle.k)
        bank = impute_features(latents, mask, assignments, prototypes)
    return Completion(bank, assignments, table, prototypes)


def labels_from_assignments(completed):
    """
    Label of sample i is the argmax over clusters of its completed
    assignments summed over views.
    """
    return hard_labels(torch.stack(list(completed)).sum(dim=0)).numpy()


def final_labels(bundle: ModelBundle, dataset: ViewDataset, config: TrainConfig):
    completion = complete(bundle, dataset, config)
    return labels_from_assignments(completion.assignments.completed)


class HierarchicalImputationTrainer(MetadataBase):
    """
    Runs pretraining and fine-tuning of a ModelBundle on one dataset. Batch
    composition is a pure function of (seed, epoch).
    """
    def __init__(self, bundle: ModelBundle, dataset: ViewDataset, config: TrainConfig, state=None):
        self.bundle = bundle
        self.dataset = dataset
        self.config = config
        self.state = state or TrainState(
            imputed_assignments=[0] * dataset.v_count,
            imputed_features=[0] * dataset.v_count,
        )
        self.pretrain_store = ParamStore(*bundle.autoencoders(), lr=config.lr)
        self.store = ParamStore(bundle, lr=config.lr)

    def batches(self, epoch):
        generator = torch.Generator().manual_seed(batch_seed(self.config.seed, epoch))
        return DataLoader(
            self.dataset,
            batch_size=self.config.batch_size,
            shuffle=True,
            generator=generator,
            collate_fn=self.dataset.collate,
        )

    def _reconstruct(self, batch, tape=None):
        latents = [self.bundle.encode_batch(x, v, tape) for v, x in enumerate(batch.views)]
        reconstructions = [self.bundle.decode_batch(h, v, tape) for v, h in enumerate(latents)]
        return latents, loss_rec(batch.views, reconstructions, batch.mask)

    def pretrain(self):
        """
        Updates encoder and decoder parameters only, on the masked
        reconstruction loss.
        """
        for epoch in tqdm(
            range(self.state.pretrain_epoch, self.config.pretrain_epochs), desc="Pretrain epochs"
        ):
            losses = []
            for b, batch in enumerate(self.batches(epoch)):
                with Tape(self.pretrain_store) as tape:
                    _, rec = self._reconstruct(batch, tape)
                if not torch.isfinite(rec):
                    raise NumericError(f"rec loss is not finite at pretrain epoch {epoch} batch {b}")
                adam_step(self.pretrain_store, backward(tape, rec), self.config.lr)
                losses.append(rec.item())

            mean = float(np.mean(losses))
            self.state.pretrain_history.append(mean)
            self.state.pretrain_epoch = epoch + 1
            tqdm.write(f"Pretrain epoch: {epoch}, Rec Loss: {mean}")
            log_metrics({"pretrain_rec": mean})
        return self.bundle, self.state.pretrain_history

    def objective(self, batch, tape=None, prototypes=None, table=None) -> BatchStep:
        """
        Forward latents and assignments, similarity table, completed
        assignments, completed features, then the weighted loss terms. A
        precomputed `table` or `prototypes` replaces the batch-scoped one.
        """
        cfg, bundle, mask = self.config, self.bundle, batch.mask
        latents, rec = self._reconstruct(batch, tape)
        if not cfg.use_rec:
            rec = torch.zeros((), dtype=torch.float64)

        q = [bundle.predict_assignments(h, tape) for h in latents]
        if table is None:
            table = build_similarity_table(q, [hard_labels(x.detach()) for x in q], mask, cfg.tau)
        assignments = impute_assignments(q, mask, table, detach=cfg.detach_imputed)
        if prototypes is None:
            prototypes = view_prototypes(latents, mask, assignments, bundle.k, cfg.detach_imputed)
        bank = impute_features(latents, mask, assignments, prototypes)

        ebm, ebm_terms = torch.zeros((), dtype=torch.float64), ()
        if cfg.use_ebm:
            ebm, energies = loss_ebm(bundle, bank, assignments, cfg.detach_anchors, tape)
            ebm_terms = energies.terms
        caa, ca_terms, reg_terms = torch.zeros((), dtype=torch.float64), {}, {}
        if cfg.use_caa:
            caa, ca_terms, reg_terms = loss_caa(assignments.completed, table, cfg.tau)

        report = loss_total(rec, ebm, caa, cfg.alpha, cfg.beta, ebm_terms, ca_terms, reg_terms)
        return BatchStep(report, bank, assignments, table)

    def _epoch_prototypes(self):
        completion = complete(self.bundle, self.dataset, self.config)
        return completion.prototypes

    def finetune_epoch(self):
        epoch = self.state.epoch
        prototypes = None
        if self.config.prototype_scope == "epoch":
            prototypes = self._epoch_prototypes()

        reports = []
        imputed = np.zeros((2, self.dataset.v_count), dtype=np.int64)
        step = None
        for b, batch in enumerate(self.batches(epoch)):
            try:
                with Tape(self.store) as tape:
                    step = self.objective(batch, tape, prototypes)
                grads = backward(tape, step.report.objective)
            except NumericError as e:
                raise NumericError(f"finetune epoch {epoch} batch {b}: {e}") from e
            adam_step(self.store, grads, self.config.lr)
            reports.append(step.report.to_dict())
            imputed += [step.assignments.imputed_counts(), step.latents.imputed_counts()]

        summary = {key: float(np.mean([r[key] for r in reports])) for key in reports[0]}
        self.state.history.append(summary)
        self.state.imputed_assignments = (np.array(self.state.imputed_assignments) + imputed[0]).tolist()
        self.state.imputed_features = (np.array(self.state.imputed_features) + imputed[1]).tolist()
        if self.state.best_total is None or summary["total"] < self.state.best_total:
            self.state.best_epoch, self.state.best_total = epoch, summary["total"]
        if self.config.debug_dump:
            self.state.debug.append(
                {"epoch": epoch, **step.table.to_dict(), "imputed_counts": imputed[0].tolist()}
            )
        self.state.epoch = epoch + 1

        tqdm.write(
            f"Finetune epoch: {epoch}, Rec: {summary['rec']}, EBM: {summary['ebm']}, "
            f"CAA: {summary['caa']}, Total: {summary['total']}"
        )
        log_metrics({f"finetune_{key}": value for key, value in summary.items()})
        return summary

    def finetune(self):
        for _ in tqdm(range(self.state.epoch, self.config.finetune_epochs), desc="Finetune epochs"):
            self.finetune_epoch()
        return self.bundle, self.state.history

    def save_state(self, path):
        torch.save(
            {
                "architecture": self.bundle.architecture.to_dict(),
                "config": self.config.to_dict(),
                "bundle": self.bundle.state_dict(),
                "pretrain_store": self.pretrain_store.state_dict(),
                "store": self.store.state_dict(),
                "state": asdict(self.state),
                "torch_rng_state": torch.get_rng_state(),
                "numpy_rng_state": np.random.get_state(),
            },
            path,
        )

    @classmethod
    def load_state(cls, path, dataset: ViewDataset):
        payload = torch.load(path, weights_only=False)
        bundle = ModelBundle(Architecture.from_dict(payload["architecture"]))
        bundle.load_state_dict(payload["bundle"])
        trainer = cls(
            bundle, dataset, TrainConfig.from_dict(payload["config"]), TrainState(**payload["state"])
        )
        trainer.pretrain_store.load_state_dict(payload["pretrain_store"])
        trainer.store.load_state_dict(payload["store"])
        torch.set_rng_state(payload["torch_rng_state"])
        np.random.set_state(payload["numpy_rng_state"])
        return trainer

    def get_metadata(self):
        return super().get_metadata() | {
            "config": self.config.get_metadata(),
            "model": self.bundle.get_metadata(),
            "data": self.dataset.get_metadata(),
        }


def prepare(config: TrainConfig, sources: DataSources):
    dataset = sources.load()
    if config.normalize:
        dataset = normalize(dataset)
    return config.resolved(dataset), dataset


def run(config: TrainConfig, sources: DataSources, out_dir, pretrained=None, finetune=True, command="train"):
    """
    Pretrains (unless a pretrained checkpoint is given), fine-tunes, extracts
    labels and writes every artifact to `out_dir`. Data is loaded before
    anything is written, so a bad input leaves no partial run behind.
    """
    config.validate()
    config, dataset = prepare(config, sources)
    bundle = load_checkpoint(pretrained) if pretrained else build_bundle(dataset.dims, config)
    if list(bundle.architecture.view_dims) != dataset.dims:
        raise DataError(
            f"checkpoint view widths {list(bundle.architecture.view_dims)} do not match data {dataset.dims}"
        )

    trainer = HierarchicalImputationTrainer(bundle, dataset, config)
    writer = RunWriter(out_dir)
    writer.write_run(
        command, config.to_dict(), sources.to_dict(),
        pretrained=pretrained, metadata=trainer.get_metadata(),
    )
    wandb_run = wandb.init(
        project="imvc", mode=config.wandb_mode, config=config.to_dict(), reinit=True
    )
    print(f"Model parameter count: {sum(p.numel() for p in bundle.parameters())}", flush=True)

    if not pretrained:
        trainer.pretrain()
    if finetune:
        trainer.finetune()

    writer.write_checkpoint(bundle)
    writer.write_losses(trainer.state.pretrain_history, trainer.state.history)
    trainer.save_state(writer.state_path)
    if config.debug_dump:
        writer.write_debug(trainer.state.debug)

    metrics = None
    if finetune:
        labels = final_labels(bundle, dataset, config)
        writer.write_labels(labels)
        if dataset.labels is not None:
            metrics = evaluate(labels, dataset.labels)
            writer.write_metrics(metrics)
            log_metrics({"acc": metrics.acc, "nmi": metrics.nmi, "pur": metrics.pur})
            print(f"ACC: {metrics.acc:.4f}, NMI: {metrics.nmi:.4f}, PUR: {metrics.pur:.4f}")
    wandb_run.finish()
    print(f"Wrote run artifacts to {out_dir}")
    return metrics


def cell_dir(out_dir, alpha, beta):
    return os.path.join(out_dir, f"alpha{alpha:g}_beta{beta:g}")


def _sweep_cell(args):
    config, sources, out_dir, alpha, beta = args
    cell_config = TrainConfig.from_dict(config.to_dict() | {"alpha": alpha, "beta": beta})
    metrics = run(cell_config, sources, cell_dir(out_dir, alpha, beta), command="sweep-cell")
    record = {"alpha": alpha, "beta": beta, "acc": metrics.acc, "nmi": metrics.nmi, "pur": metrics.pur}
    SweepIndexWriter(out_dir).write_metadata(record)
    return record


def sweep(config: TrainConfig, sources: DataSources, out_dir, alphas=SWEEP_GRID, betas=SWEEP_GRID, jobs=1):
    """
    Trains one model per (alpha, beta) cell, each in its own subdirectory,
    and writes the ACC/NMI/PUR grid to sweep.csv. Nothing is written until
    the data has loaded.
    """
    config.validate()
    _, dataset = prepare(config, sources)
    if dataset.labels is None:
        raise DataError("a sweep needs ground-truth labels to score cells")

    RunWriter(out_dir).write_run(
        "sweep", config.to_dict(), sources.to_dict(), alphas=list(alphas), betas=list(betas)
    )
    cells = [(config, sources, out_dir, a, b) for a in alphas for b in betas]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            records = list(pool.map(_sweep_cell, cells))
    else:
        records = [_sweep_cell(cell) for cell in cells]
    RunWriter(out_dir).write_sweep(records)
    return records


def export_embeddings(checkpoint, sources: DataSources, out_dir, config: TrainConfig):
    """
    Writes the completed latents of every view and a 2-D principal component
    projection of the view-averaged completed latents.
    """
    dataset = sources.load()
    if config.normalize:
        dataset = normalize(dataset)
    bundle = load_checkpoint(checkpoint)
    if list(bundle.architecture.view_dims) != dataset.dims:
        raise DataError(
            f"checkpoint view widths {list(bundle.architecture.view_dims)} do not match data {dataset.dims}"
        )

    completion = complete(bundle, dataset, config)
    bank = completion.latents
    usable = torch.stack([
        (p != int(Provenance.UNAVAILABLE)).to(torch.float64) for p in bank.provenance
    ])
    summed = sum(h * w[:, None] for h, w in zip(bank.completed, usable))
    pooled = (summed / usable.sum(dim=0)[:, None]).numpy()
    projection = project(pooled)
    predicted = labels_from_assignments(completion.assignments.completed)

    writer = RunWriter(out_dir)
    writer.write_embeddings(
        [h.numpy() for h in bank.completed],
        projection,
        dataset.labels if dataset.labels is not None else predicted,
        predicted,
    )
    return projection


def project(features, components=2):
    """
    Top principal components of the rows of `features`.
    """
    components = min(components, features.shape[1], len(features))
    return PCA(n_components=components).fit_transform(features)
