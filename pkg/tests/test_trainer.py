import numpy
import pytest
import torch

from conftest import make_config, toy_dataset
from data_pipeline import PairedDataset
from models import DenoiserConfig, DenoiserNetwork
from numerics import RandomSource
from schedule import linear_beta_schedule
from trainer import Trainer, denoising_loss, draw_training_noise, loss_and_grad


def double_network(seed=0):
    torch.manual_seed(seed)
    model = DenoiserNetwork(DenoiserConfig(depth=2, width=4, alpha_embed_dim=4)).double()
    with torch.no_grad():
        torch.nn.init.normal_(model.conv_out.weight, std=0.1)
    return model


def random_batch(rng, n=3, size=8):
    return rng.normal((n, size, size)), rng.normal((n, size, size))


def initial_checkpoint(config):
    torch.manual_seed(config.seed)
    return {
        "weights": DenoiserNetwork(config).get_weights(),
        "optimizer_state": None,
        "training_step": 0,
        "epoch_losses": [],
    }


def test_gradient_matches_finite_differences():
    model = double_network()
    schedule = linear_beta_schedule(10, 0.01, 0.2)
    x, y0 = random_batch(RandomSource(0))
    loss, grads = loss_and_grad(model, (x, y0), schedule, RandomSource(1), 2)

    alpha_bars, eps = draw_training_noise(schedule, RandomSource(1), 3, (8, 8))
    tensors = [torch.as_tensor(array) for array in (x, y0, alpha_bars, eps)]
    with torch.no_grad():
        assert abs(denoising_loss(model, *tensors, 2).item() - loss) < 1e-10

    h = 1e-5
    checked = 0
    worst = 0.0
    with torch.no_grad():
        for name, param in model.named_parameters():
            flat = param.view(-1)
            analytic = grads[name].reshape(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + h
                plus = denoising_loss(model, *tensors, 2).item()
                flat[i] = original - h
                minus = denoising_loss(model, *tensors, 2).item()
                flat[i] = original
                numeric = (plus - minus) / (2 * h)
                exact = float(analytic[i])
                error = abs(numeric - exact) / max(abs(exact), abs(numeric), 1e-3)
                worst = max(worst, error)
                checked += 1
    assert checked == sum(param.numel() for param in model.parameters())
    assert worst < 1e-4


def test_perfect_prediction_has_zero_loss_and_gradient():
    torch.manual_seed(0)
    model = DenoiserNetwork(DenoiserConfig(depth=2, width=4)).double()
    with torch.no_grad():
        for param in model.parameters():
            param.zero_()
    rng = RandomSource(2)
    x, y0 = random_batch(rng)
    tensors = [torch.as_tensor(array) for array in (x, y0)]
    alpha_bars = torch.tensor([0.2, 0.5, 0.9], dtype=torch.float64)
    loss = denoising_loss(model, *tensors, alpha_bars, torch.zeros(3, 8, 8, dtype=torch.float64), 2)
    loss.backward()
    assert loss.item() == 0.0
    assert all(not param.grad.any() for param in model.parameters())


def test_l1_loss_is_non_negative():
    loss, _ = loss_and_grad(
        double_network(), random_batch(RandomSource(3)), linear_beta_schedule(5, 0.1, 0.3), RandomSource(4), 1
    )
    assert loss >= 0


def test_loss_is_permutation_invariant():
    model = double_network()
    rng = RandomSource(5)
    x, y0 = random_batch(rng, n=4)
    alpha_bars = numpy.array([0.1, 0.4, 0.7, 0.95])
    eps = rng.normal((4, 8, 8))
    order = [2, 0, 3, 1]
    with torch.no_grad():
        first = denoising_loss(model, *(torch.as_tensor(a) for a in (x, y0, alpha_bars, eps)), 2)
        second = denoising_loss(
            model, *(torch.as_tensor(a[order]) for a in (x, y0, alpha_bars, eps)), 2
        )
    assert abs(first.item() - second.item()) < 1e-10


def test_empty_batch_is_rejected():
    with pytest.raises(ValueError):
        loss_and_grad(
            double_network(),
            (numpy.zeros((0, 8, 8)), numpy.zeros((0, 8, 8))),
            linear_beta_schedule(5, 0.1, 0.3),
            RandomSource(0),
            2,
        )


def test_zero_epochs_leave_parameters_unchanged(tmp_path):
    config = make_config(tmp_path)
    checkpoint = initial_checkpoint(config)
    trainer = Trainer(checkpoint, config)
    state = trainer.train(toy_dataset(), linear_beta_schedule(8, 0.05, 0.5), 0, RandomSource(0))
    assert state.step_count == 0
    assert state.epoch_losses == []
    for name, tensor in checkpoint["weights"].items():
        assert torch.equal(state.params[name], tensor)


def test_empty_dataset_is_rejected(tmp_path):
    config = make_config(tmp_path)
    trainer = Trainer(initial_checkpoint(config), config)
    empty = PairedDataset(numpy.zeros((0, 16, 16)), numpy.zeros((0, 16, 16)))
    with pytest.raises(ValueError):
        trainer.train(empty, linear_beta_schedule(8, 0.05, 0.5), 1, RandomSource(0))


def test_training_is_deterministic(tmp_path):
    config = make_config(tmp_path)
    schedule = linear_beta_schedule(8, 0.05, 0.5)
    states = [
        Trainer(initial_checkpoint(config), config).train(toy_dataset(), schedule, 2, RandomSource(7))
        for _ in range(2)
    ]
    assert states[0].epoch_losses == states[1].epoch_losses
    assert states[0].step_count == states[1].step_count == 4
    for name, tensor in states[0].params.items():
        assert torch.equal(states[1].params[name], tensor)


@pytest.mark.slow
def test_training_reduces_the_loss(tmp_path):
    config = make_config(tmp_path, batch_size=8, width=8, lr_init=1e-2)
    schedule = linear_beta_schedule(8, 0.05, 0.5)
    state = Trainer(initial_checkpoint(config), config).train(
        toy_dataset(n=8), schedule, 100, RandomSource(8)
    )
    assert len(state.epoch_losses) == 100
    assert state.step_count == 100
    assert numpy.mean(state.epoch_losses[-10:]) < 0.9 * state.epoch_losses[0]


def test_learning_rate_decays_with_steps(tmp_path):
    config = make_config(tmp_path, lr_init=0.1, lr_decay_rate=0.5, lr_decay_steps=2)
    trainer = Trainer(initial_checkpoint(config), config)
    trainer.training_step = 4
    trainer.update_lr()
    assert trainer.optimizer.param_groups[0]["lr"] == pytest.approx(0.025)
