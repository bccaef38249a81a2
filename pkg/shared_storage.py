import copy
import os

import torch

import models
from data_pipeline import TensorFormatError, TensorShapeError, load_archive, save_archive

CHECKPOINT_KEYS = ("training_step", "lr", "epoch_losses", "denoiser", "schedule", "optimizer")


class SharedStorage:
    """
    Holds the current checkpoint (weights, optimizer state, training info) and
    persists it as a DMTA archive.
    """

    def __init__(self, checkpoint, config):
        self.config = config
        self.current_checkpoint = copy.deepcopy(checkpoint)

    def save_checkpoint(self, path=None):
        if not path:
            os.makedirs(self.config.results_path, exist_ok=True)
            path = os.path.join(self.config.results_path, "model.checkpoint")

        save_checkpoint(path, self.current_checkpoint)
        return path

    def get_checkpoint(self):
        return copy.deepcopy(self.current_checkpoint)

    def get_info(self, keys):
        if isinstance(keys, str):
            return self.current_checkpoint[keys]
        elif isinstance(keys, list):
            return {key: self.current_checkpoint[key] for key in keys}
        else:
            raise TypeError

    def set_info(self, keys, values=None):
        if isinstance(keys, str) and values is not None:
            self.current_checkpoint[keys] = values
        elif isinstance(keys, dict):
            self.current_checkpoint.update(keys)
        else:
            raise TypeError


def save_checkpoint(path, checkpoint):
    """
    Write a checkpoint dict as a DMTA archive. Parameter tensors are stored under
    "weights/<name>", optimizer tensors under "optimizer/<param index>/<key>"; the
    rest goes to the JSON header.
    """
    tensors = {}
    for name, tensor in checkpoint["weights"].items():
        tensors[f"weights/{name}"] = tensor.detach().cpu().numpy()

    optimizer_meta = None
    optimizer_state = checkpoint.get("optimizer_state")
    if optimizer_state is not None:
        optimizer_meta = {"param_groups": optimizer_state["param_groups"], "state": {}}
        for index, state in optimizer_state["state"].items():
            scalars = {}
            for key, value in state.items():
                if isinstance(value, torch.Tensor):
                    tensors[f"optimizer/{index}/{key}"] = value.detach().cpu().numpy()
                else:
                    scalars[key] = value
            optimizer_meta["state"][str(index)] = scalars

    meta = {
        "training_step": checkpoint["training_step"],
        "lr": checkpoint["lr"],
        "epoch_losses": list(checkpoint["epoch_losses"]),
        "denoiser": checkpoint["denoiser"],
        "schedule": checkpoint["schedule"],
        "optimizer": optimizer_meta,
    }
    save_archive(path, tensors, meta)


def load_checkpoint(path):
    """
    Read a checkpoint written by save_checkpoint, validating every parameter shape
    against the network described by the stored denoiser config.
    """
    tensors, meta = load_archive(path)
    missing = [key for key in CHECKPOINT_KEYS if not isinstance(meta, dict) or key not in meta]
    if missing:
        raise TensorFormatError(f"{path}: checkpoint header is missing {', '.join(missing)}")
    weights = {}
    optimizer_tensors = {}
    for name, array in tensors.items():
        kind, _, key = name.partition("/")
        if kind == "weights":
            weights[key] = torch.from_numpy(array)
        elif kind == "optimizer":
            index, _, field = key.partition("/")
            optimizer_tensors.setdefault(int(index), {})[field] = torch.from_numpy(array)

    try:
        denoiser_config = models.DenoiserConfig(**meta["denoiser"])
    except TypeError as err:
        raise TensorFormatError(f"{path}: invalid denoiser config {meta['denoiser']}") from err
    try:
        models.check_weights(models.DenoiserNetwork(denoiser_config), weights)
    except ValueError as err:
        raise TensorShapeError(f"{path}: {err}") from err

    optimizer_state = None
    if meta["optimizer"] is not None:
        state = {}
        for index, scalars in meta["optimizer"]["state"].items():
            state[int(index)] = {**scalars, **optimizer_tensors.get(int(index), {})}
        optimizer_state = {"state": state, "param_groups": meta["optimizer"]["param_groups"]}

    return {
        "weights": weights,
        "optimizer_state": optimizer_state,
        "training_step": meta["training_step"],
        "lr": meta["lr"],
        "epoch_losses": meta["epoch_losses"],
        "denoiser": meta["denoiser"],
        "schedule": meta["schedule"],
    }


def model_from_checkpoint(checkpoint, dtype="float32"):
    model = models.DenoiserNetwork(models.DenoiserConfig(**checkpoint["denoiser"]))
    if dtype == "float64":
        model.double()
    model.set_weights(
        {name: tensor.to(next(model.parameters()).dtype) for name, tensor in checkpoint["weights"].items()}
    )
    model.eval()
    return model
