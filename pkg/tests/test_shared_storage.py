import pytest
import torch

from conftest import make_config, toy_dataset
from data_pipeline import TensorFormatError, TensorShapeError, save_archive
from diffdc import DiffDC
from numerics import RandomSource
from shared_storage import SharedStorage, load_checkpoint, model_from_checkpoint, save_checkpoint
from trainer import Trainer


def trained_checkpoint(config, diffdc):
    checkpoint = diffdc.initial_checkpoint()
    state = Trainer(checkpoint, config).train(toy_dataset(), diffdc.schedule, 1, RandomSource(0))
    checkpoint.update(state.to_checkpoint())
    return checkpoint


def test_checkpoint_round_trip_keeps_optimizer_state(tmp_path):
    config = make_config(tmp_path)
    checkpoint = trained_checkpoint(config, DiffDC(config=config))
    save_checkpoint(tmp_path / "model.checkpoint", checkpoint)
    loaded = load_checkpoint(tmp_path / "model.checkpoint")

    assert loaded["training_step"] == checkpoint["training_step"] == 2
    assert loaded["epoch_losses"] == checkpoint["epoch_losses"]
    assert loaded["denoiser"] == checkpoint["denoiser"]
    assert loaded["schedule"] == checkpoint["schedule"]
    for name, tensor in checkpoint["weights"].items():
        assert torch.equal(loaded["weights"][name], tensor)
    for index, state in checkpoint["optimizer_state"]["state"].items():
        for key, value in state.items():
            stored = loaded["optimizer_state"]["state"][index][key]
            if isinstance(value, torch.Tensor):
                assert torch.equal(stored, value)
            else:
                assert stored == value

    resumed = Trainer(loaded, config)
    assert resumed.training_step == 2


def test_shape_mismatch_is_reported(tmp_path):
    config = make_config(tmp_path)
    checkpoint = DiffDC(config=config).initial_checkpoint()
    checkpoint["denoiser"] = {**checkpoint["denoiser"], "width": 8}
    save_checkpoint(tmp_path / "bad.checkpoint", checkpoint)
    with pytest.raises(TensorShapeError):
        load_checkpoint(tmp_path / "bad.checkpoint")


def test_model_from_checkpoint(tmp_path):
    config = make_config(tmp_path)
    checkpoint = DiffDC(config=config).initial_checkpoint()
    model = model_from_checkpoint(checkpoint, dtype="float64")
    assert next(model.parameters()).dtype == torch.float64
    assert not model.training


def test_shared_storage_saves_to_the_results_path(tmp_path):
    config = make_config(tmp_path)
    storage = SharedStorage(DiffDC(config=config).initial_checkpoint(), config)
    storage.set_info({"training_step": 5})
    assert storage.get_info("training_step") == 5
    path = storage.save_checkpoint()
    assert path.startswith(config.results_path)
    assert load_checkpoint(path)["training_step"] == 5


def test_incomplete_checkpoint_header(tmp_path):
    save_archive(tmp_path / "partial.checkpoint", {}, {"training_step": 0})
    with pytest.raises(TensorFormatError, match="denoiser"):
        load_checkpoint(tmp_path / "partial.checkpoint")


def test_unknown_denoiser_field(tmp_path):
    config = make_config(tmp_path)
    checkpoint = DiffDC(config=config).initial_checkpoint()
    checkpoint["denoiser"] = {**checkpoint["denoiser"], "heads": 2}
    save_checkpoint(tmp_path / "odd.checkpoint", checkpoint)
    with pytest.raises(TensorFormatError):
        load_checkpoint(tmp_path / "odd.checkpoint")
