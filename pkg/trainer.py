import copy
from dataclasses import dataclass, field

import numpy
import torch

import models
from numerics import gaussian_image
from schedule import sample_alpha_bar


@dataclass
class TrainState:
    """
    Training loop state: parameters, Adam moments and the loss history.
    """

    params: dict
    step_count: int = 0
    optimizer_state: dict = None
    learning_rate: float = 1e-3
    epoch_losses: list = field(default_factory=list)

    def to_checkpoint(self):
        return {
            "weights": copy.deepcopy(self.params),
            "optimizer_state": copy.deepcopy(self.optimizer_state),
            "training_step": self.step_count,
            "lr": self.learning_rate,
            "epoch_losses": list(self.epoch_losses),
        }


def draw_training_noise(schedule, rng, batch_size, shape):
    """
    Per item noise level and noise field of the training objective, drawn in item order.

    Returns:
        (alpha_bars (batch,), eps (batch, h, w))
    """
    alpha_bars = numpy.empty(batch_size)
    eps = numpy.empty((batch_size,) + tuple(shape))
    for i in range(batch_size):
        alpha_bars[i], _ = sample_alpha_bar(schedule, rng)
        eps[i] = gaussian_image(rng, *shape)
    return alpha_bars, eps


def denoising_loss(model, x_cond, y0, alpha_bars, eps, p_norm):
    """
    Mean over the batch of ||f(x, sqrt(a) y0 + sqrt(1 - a) eps, a) - eps||_p^p.

    All inputs are tensors in the model dtype.
    """
    scale = alpha_bars[:, None, None]
    y_noisy = torch.sqrt(scale) * y0 + torch.sqrt(1 - scale) * eps
    error = model(x_cond, y_noisy, alpha_bars) - eps
    if p_norm == 2:
        per_item = torch.square(error)
    elif p_norm == 1:
        per_item = torch.abs(error)
    else:
        raise ValueError(f"p_norm should be 1 or 2, got {p_norm}")
    return per_item.flatten(1).sum(dim=1).mean()


def loss_and_grad(model, batch, schedule, rng, p_norm):
    """
    Evaluate the training loss on a batch and its gradient with respect to every parameter.

    Args:
        model: Denoiser network, left with the gradients in its .grad fields.
        batch: Pair of arrays (x_cond, y0), each (batch, h, w).
        schedule: NoiseSchedule the noise levels are drawn from.
        rng: RandomSource for the noise levels and noise fields.
        p_norm: 1 or 2.

    Returns:
        (loss, grads) with grads a dict of parameter name to tensor.
    """
    x_cond, y0 = (numpy.asarray(array, dtype=numpy.float64) for array in batch)
    if len(x_cond) == 0:
        raise ValueError("Batch should not be empty")
    if x_cond.shape != y0.shape or x_cond.ndim != 3:
        raise ValueError(
            f"Batch conditions {x_cond.shape} and targets {y0.shape} should share a (batch, h, w) shape"
        )
    alpha_bars, eps = draw_training_noise(schedule, rng, len(x_cond), x_cond.shape[1:])

    parameter = next(model.parameters())
    options = {"dtype": parameter.dtype, "device": parameter.device}
    model.zero_grad()
    loss = denoising_loss(
        model,
        torch.as_tensor(x_cond, **options),
        torch.as_tensor(y0, **options),
        torch.as_tensor(alpha_bars, **options),
        torch.as_tensor(eps, **options),
        p_norm,
    )
    loss.backward()
    grads = {
        name: param.grad.detach().clone()
        if param.grad is not None
        else torch.zeros_like(param)
        for name, param in model.named_parameters()
    }
    return loss.item(), grads


class Trainer:
    """
    Owns the denoiser and its optimizer, and runs the supervised training loop.

    Args:
        initial_checkpoint (dict): weights, optimizer_state, training_step, epoch_losses.
        config: Configuration with the denoiser and trainer sections.
    """

    def __init__(self, initial_checkpoint, config):
        self.config = config

        # Fix random generator seed
        torch.manual_seed(self.config.seed)

        # Initialize the network
        self.model = models.DenoiserNetwork(self.config)
        if self.config.dtype == "float64":
            self.model.double()
        self.model.set_weights(copy.deepcopy(initial_checkpoint["weights"]))
        self.model.train()

        self.training_step = initial_checkpoint["training_step"]
        self.epoch_losses = list(initial_checkpoint.get("epoch_losses", []))

        # Initialize the optimizer
        if self.config.optimizer == "SGD":
            self.optimizer = torch.optim.SGD(
                self.model.parameters(),
                lr=self.config.lr_init,
                momentum=self.config.momentum,
                weight_decay=self.config.weight_decay,
            )
        elif self.config.optimizer == "Adam":
            self.optimizer = torch.optim.Adam(
                self.model.parameters(),
                lr=self.config.lr_init,
                betas=tuple(self.config.adam_betas),
                weight_decay=self.config.weight_decay,
            )
        else:
            raise NotImplementedError(
                f"{self.config.optimizer} is not implemented. You can change the optimizer manually in trainer.py."
            )

        if initial_checkpoint["optimizer_state"] is not None:
            print("Loading optimizer...\n")
            self.optimizer.load_state_dict(
                copy.deepcopy(initial_checkpoint["optimizer_state"])
            )
        self.update_lr()

    def train(self, dataset, schedule, epochs, rng, writer=None):
        """
        Run `epochs` passes over the dataset, shuffled per epoch from rng.

        Returns:
            TrainState after the last epoch.
        """
        if len(dataset) == 0:
            raise ValueError("Training dataset is empty")
        for _ in range(epochs):
            losses = []
            for batch in dataset.batches(rng, self.config.batch_size):
                self.update_lr()
                losses.append(self.update_weights(batch, schedule, rng))
            self.epoch_losses.append(float(numpy.mean(losses)))
            epoch = len(self.epoch_losses)
            print(
                f"Epoch {epoch}: mean loss {self.epoch_losses[-1]:.5f}, "
                f"lr {self.optimizer.param_groups[0]['lr']:.2e}, step {self.training_step}"
            )
            if writer is not None:
                writer.add_scalar("1.Loss/epoch_mean", self.epoch_losses[-1], epoch)
                writer.add_scalar(
                    "2.Optimizer/lr", self.optimizer.param_groups[0]["lr"], epoch
                )
        return self.get_state()

    def update_weights(self, batch, schedule, rng):
        """
        Perform one training step.
        """
        loss, _ = loss_and_grad(self.model, batch, schedule, rng, self.config.p_norm)
        self.optimizer.step()
        self.training_step += 1
        return loss

    def update_lr(self):
        """
        Update learning rate
        """
        lr = self.config.lr_init * self.config.lr_decay_rate ** (
            self.training_step / self.config.lr_decay_steps
        )
        for param_group in self.optimizer.param_groups:
            param_group["lr"] = lr

    def get_state(self):
        return TrainState(
            params=copy.deepcopy(self.model.get_weights()),
            step_count=self.training_step,
            optimizer_state=copy.deepcopy(models.dict_to_cpu(self.optimizer.state_dict())),
            learning_rate=self.optimizer.param_groups[0]["lr"],
            epoch_losses=list(self.epoch_losses),
        )
