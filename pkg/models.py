import math
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass

import numpy
import torch

from numerics import as_real_image


@dataclass
class DenoiserConfig:
    depth: int = 6  # Number of residual conv blocks
    width: int = 32  # Channels in every block
    kernel: int = 3  # Odd convolution kernel size
    p_norm: int = 2  # Norm of the training objective, 1 or 2
    alpha_embed_dim: int = 16  # Size of the sinusoidal alpha_bar embedding

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth should be >= 1, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"width should be >= 1, got {self.width}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError(f"kernel should be a positive odd integer, got {self.kernel}")
        if self.p_norm not in (1, 2):
            raise ValueError(f"p_norm should be 1 or 2, got {self.p_norm}")
        if self.alpha_embed_dim < 1:
            raise ValueError(f"alpha_embed_dim should be >= 1, got {self.alpha_embed_dim}")

    @classmethod
    def from_config(cls, config):
        return cls(config.depth, config.width, config.kernel, config.p_norm, config.alpha_embed_dim)

    def to_dict(self):
        return asdict(self)


class DenoiserNetwork:
    def __new__(cls, config):
        network = getattr(config, "network", "resnet")
        if network == "resnet":
            denoiser_config = (
                config if isinstance(config, DenoiserConfig) else DenoiserConfig.from_config(config)
            )
            return ResidualDenoiser(
                denoiser_config.depth,
                denoiser_config.width,
                denoiser_config.kernel,
                denoiser_config.alpha_embed_dim,
            )
        else:
            raise NotImplementedError('The network parameter should be "resnet".')


def dict_to_cpu(dictionary):
    cpu_dict = {}
    for key, value in dictionary.items():
        if isinstance(value, torch.Tensor):
            cpu_dict[key] = value.cpu()
        elif isinstance(value, dict):
            cpu_dict[key] = dict_to_cpu(value)
        else:
            cpu_dict[key] = value
    return cpu_dict


class AbstractNetwork(ABC, torch.nn.Module):
    def __init__(self):
        super().__init__()
        pass

    @abstractmethod
    def forward(self, x_cond, y_noisy, alpha_bar):
        pass

    def get_weights(self):
        return dict_to_cpu(self.state_dict())

    def set_weights(self, weights):
        check_weights(self, weights)
        self.load_state_dict(weights)


def check_weights(model, weights):
    """
    Raise ValueError naming the first tensor whose name or shape disagrees with the model.
    """
    expected = model.state_dict()
    missing = set(expected) - set(weights)
    unexpected = set(weights) - set(expected)
    if missing or unexpected:
        raise ValueError(
            f"Weights do not match the network: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )
    for name, tensor in expected.items():
        if tuple(weights[name].shape) != tuple(tensor.shape):
            raise ValueError(
                f"Weight {name} has shape {tuple(weights[name].shape)}, network expects {tuple(tensor.shape)}"
            )


##################################
############# ResNet #############


def conv_same(in_channels, out_channels, kernel_size):
    return torch.nn.Conv2d(
        in_channels, out_channels, kernel_size=kernel_size, padding=kernel_size // 2
    )


class AlphaBarEmbedding(torch.nn.Module):
    """
    Sinusoidal features of the continuous noise level alpha_bar in (0, 1].
    """

    def __init__(self, dim):
        super().__init__()
        self.dim = dim
        half = max(1, dim // 2)
        self.register_buffer(
            "frequencies",
            torch.exp(torch.linspace(0.0, math.log(1000.0), half)),
            persistent=False,
        )

    def forward(self, alpha_bar):
        angles = alpha_bar[:, None] * self.frequencies[None, :]
        embedding = torch.cat((torch.sin(angles), torch.cos(angles)), dim=1)
        return embedding[:, : self.dim]


# Residual block with the noise level injected as a per-channel bias
class ResidualBlock(torch.nn.Module):
    def __init__(self, num_channels, kernel_size, embed_dim):
        super().__init__()
        self.conv = conv_same(num_channels, num_channels, kernel_size)
        self.alpha_bias = torch.nn.Linear(embed_dim, num_channels)

    def forward(self, x, embedding):
        out = self.conv(x) + self.alpha_bias(embedding)[:, :, None, None]
        out = torch.nn.functional.silu(out)
        return x + out


class ResidualDenoiser(AbstractNetwork):
    """
    Conditional noise predictor f(x, y_noisy, alpha_bar) -> eps.

    The condition and the noisy image enter as two channels, pass a stem conv and
    `depth` residual blocks, and a zero-initialized 1-channel conv reads out the noise,
    so a fresh network predicts zero noise.
    """

    def __init__(self, depth, width, kernel_size, alpha_embed_dim):
        super().__init__()
        self.embedding = AlphaBarEmbedding(alpha_embed_dim)
        self.conv_in = conv_same(2, width, kernel_size)
        self.resblocks = torch.nn.ModuleList(
            [ResidualBlock(width, kernel_size, alpha_embed_dim) for _ in range(depth)]
        )
        self.conv_out = conv_same(width, 1, kernel_size)
        torch.nn.init.zeros_(self.conv_out.weight)
        torch.nn.init.zeros_(self.conv_out.bias)

    def forward(self, x_cond, y_noisy, alpha_bar):
        # x_cond, y_noisy: batch, height, width
        # alpha_bar: batch
        embedding = self.embedding(alpha_bar)
        features = torch.nn.functional.silu(
            self.conv_in(torch.stack((x_cond, y_noisy), dim=1))
        )
        x = features
        for block in self.resblocks:
            x = block(x, embedding)
        # Global skip from the stem features
        x = x + features
        return self.conv_out(x).squeeze(1)


########### End ResNet ###########
##################################


def predict_noise(model, x_cond, y_noisy, alpha_bar):
    """
    Evaluate the noise predictor on one image pair.

    Args:
        model: Denoiser network.
        x_cond: Zero-filled condition image (h, w).
        y_noisy: Noisy image (h, w).
        alpha_bar (float): Noise level in (0, 1].

    Returns:
        Predicted noise as a float64 (h, w) array.
    """
    x_cond = as_real_image(x_cond, "condition")
    y_noisy = as_real_image(y_noisy, "noisy image")
    if x_cond.shape != y_noisy.shape:
        raise ValueError(
            f"Condition shape {x_cond.shape} does not match noisy image shape {y_noisy.shape}"
        )
    if not 0 < alpha_bar <= 1:
        raise ValueError(f"alpha_bar should be in (0, 1], got {alpha_bar}")
    parameter = next(model.parameters())
    options = {"dtype": parameter.dtype, "device": parameter.device}
    with torch.no_grad():
        eps = model(
            torch.as_tensor(x_cond, **options)[None],
            torch.as_tensor(y_noisy, **options)[None],
            torch.tensor([alpha_bar], **options),
        )
    return eps[0].cpu().numpy().astype(numpy.float64)
