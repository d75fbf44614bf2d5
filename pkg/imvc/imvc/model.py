"""
The three network families: per-view autoencoders, the view-shared
clustering predictor and the cluster-specific energy networks.
"""
from dataclasses import asdict, dataclass
from enum import IntEnum
import json
import os

import torch
import torch.nn as nn

from .base import ConfigError, ContractError, DataError, MetadataBase
from .diffnet import Mlp, MlpSpec, read_tensors, write_tensors


class Provenance(IntEnum):
    OBSERVED = 0
    IMPUTED = 1
    # missing row of a view that had no observed rows to build prototypes from
    UNAVAILABLE = 2


@dataclass(frozen=True)
class Architecture:
    view_dims: tuple
    k: int
    latent_dim: int = 32
    encoder_hidden: tuple = (64, 128)
    predictor_hidden: tuple = (64,)
    energy_hidden: tuple = (64, 64, 64)

    def __post_init__(self):
        for name in ("view_dims", "encoder_hidden", "predictor_hidden", "energy_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        if self.k < 1:
            raise ConfigError(f"need at least one cluster, got k={self.k}")
        if not self.view_dims:
            raise ConfigError("need at least one view")

    def encoder_spec(self, v):
        return MlpSpec((self.view_dims[v], *self.encoder_hidden, self.latent_dim))

    def decoder_spec(self, v):
        return MlpSpec((self.latent_dim, *reversed(self.encoder_hidden), self.view_dims[v]))

    def predictor_spec(self):
        return MlpSpec(
            (self.latent_dim, *self.predictor_hidden, self.k), output_activation="softmax"
        )

    def energy_spec(self):
        return MlpSpec(
            (self.latent_dim, *self.energy_hidden, 1), output_activation="softplus"
        )

    def to_dict(self):
        return {key: list(value) if isinstance(value, tuple) else value
                for key, value in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class ModelBundle(nn.Module, MetadataBase):
    """
    All trainable parameters: V encoders and decoders, the shared predictor
    and K energy networks.
    """
    def __init__(self, architecture: Architecture):
        super().__init__()
        self.architecture = architecture
        views = range(len(architecture.view_dims))
        self.encoders = nn.ModuleList(Mlp(architecture.encoder_spec(v)) for v in views)
        self.decoders = nn.ModuleList(Mlp(architecture.decoder_spec(v)) for v in views)
        self.predictor = Mlp(architecture.predictor_spec())
        self.energy_nets = nn.ModuleList(
            Mlp(architecture.energy_spec()) for _ in range(architecture.k)
        )

    @property
    def k(self):
        return self.architecture.k

    @property
    def latent_dim(self):
        return self.architecture.latent_dim

    @property
    def v_count(self):
        return len(self.architecture.view_dims)

    def autoencoders(self):
        return [*self.encoders, *self.decoders]

    def encode_batch(self, x, v, tape=None):
        return self.encoders[v](x, tape)

    def decode_batch(self, h, v, tape=None):
        return self.decoders[v](h, tape)

    def predict_assignments(self, h, tape=None):
        return self.predictor(h, tape)

    def energy_of(self, k, h, tape=None):
        if not 0 <= k < self.k:
            raise ContractError(f"cluster {k} out of range [0, {self.k})")
        return self.energy_nets[k](h, tape).reshape(-1)

    def get_metadata(self):
        networks = [*self.encoders, *self.decoders, self.predictor, *self.energy_nets]
        return super().get_metadata() | self.architecture.to_dict() | {
            "parameter_count": sum(p.numel() for p in self.parameters()),
            "networks": [net.get_metadata() for net in networks],
        }


def hard_labels(q):
    """
    Row-wise argmax; ties go to the lowest cluster index.
    """
    return torch.argmax(q, dim=1)


@dataclass
class AssignmentMatrix:
    assignments: list
    completed: list
    labels: list
    provenance: list
    sources: list

    def imputed_counts(self):
        return [int((p == Provenance.IMPUTED).sum()) for p in self.provenance]

    def check_simplex(self, atol=1e-6):
        for q in [*self.assignments, *self.completed]:
            if (q < 0).any() or not torch.allclose(q.sum(dim=1), torch.ones_like(q[:, 0]), atol=atol):
                raise ContractError("assignment rows left the simplex")


@dataclass
class LatentBank:
    latents: list
    completed: list
    provenance: list

    def imputed_counts(self):
        return [int((p == Provenance.IMPUTED).sum()) for p in self.provenance]


def manifest_path(checkpoint_path):
    return os.path.splitext(checkpoint_path)[0] + ".json"


def save_checkpoint(bundle: ModelBundle, path):
    """
    Writes every parameter tensor to the flat container at `path` and a JSON
    manifest (architecture and tensor names) next to it.
    """
    names, tensors = zip(*bundle.state_dict().items())
    write_tensors(path, list(tensors))
    with open(manifest_path(path), "w") as f:
        json.dump(
            {"architecture": bundle.architecture.to_dict(), "tensors": list(names)},
            f,
            indent=2,
        )
        f.write("\n")


def load_checkpoint(path) -> ModelBundle:
    try:
        with open(manifest_path(path)) as f:
            manifest = json.load(f)
        tensors = read_tensors(path)
    except FileNotFoundError as e:
        raise DataError(f"{e.filename}: no such checkpoint file")

    bundle = ModelBundle(Architecture.from_dict(manifest["architecture"]))
    state = bundle.state_dict()
    if list(state) != manifest["tensors"] or len(tensors) != len(state):
        raise DataError(f"{path}: tensors do not match the manifest architecture")
    loaded = {}
    for (name, reference), array in zip(state.items(), tensors):
        if array.size != reference.numel():
            raise DataError(f"{path}: tensor {name} has {array.size} values, expected {reference.numel()}")
        loaded[name] = torch.from_numpy(array).reshape(reference.shape)
    bundle.load_state_dict(loaded)
    return bundle
