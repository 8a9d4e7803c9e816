from .base import LogDensity, Model
from .conjugate import ConjugateGaussianModel
from .data import (
    Dataset,
    Silo,
    contiguous_assignment,
    gen_conjugate,
    gen_glmm,
    gen_heterogeneous_classification,
    partition_by_group,
    random_assignment,
    read_classification_csv,
    read_glmm_csv,
    write_classification_csv,
    write_glmm_csv,
)
from .glmm import LogisticMixedModel
from .hierbnn import ToyHierBNNModel
from .multinom import MultinomRegModel

MODEL_IDS = ("conjugate", "glmm", "multinom", "hierbnn")


def make_model(model_id: str, **kwargs) -> Model:
    """Build a model from its id, e.g. ``make_model("hierbnn", d=4, hidden=8, K=4)``."""
    registry = {
        "conjugate": ConjugateGaussianModel,
        "glmm": LogisticMixedModel,
        "multinom": MultinomRegModel,
        "hierbnn": ToyHierBNNModel,
    }
    if model_id not in registry:
        raise ValueError(f"unknown model id {model_id!r}; expected one of {MODEL_IDS}")
    return registry[model_id](**kwargs)


__all__ = [
    "ConjugateGaussianModel",
    "Dataset",
    "LogDensity",
    "LogisticMixedModel",
    "MODEL_IDS",
    "Model",
    "MultinomRegModel",
    "Silo",
    "ToyHierBNNModel",
    "contiguous_assignment",
    "gen_conjugate",
    "gen_glmm",
    "gen_heterogeneous_classification",
    "make_model",
    "partition_by_group",
    "random_assignment",
    "read_classification_csv",
    "read_glmm_csv",
    "write_classification_csv",
    "write_glmm_csv",
]
