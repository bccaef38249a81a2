from configs.phantom import DiffDCConfig
from data_pipeline import PairedDataset
from numerics import RandomSource


def make_config(tmp_path=None, **overrides):
    """
    Desk-scale config: 16x16 images, 8 diffusion steps, a 2 block network.
    """
    config = DiffDCConfig()
    config.update(
        {
            "T": 8,
            "beta_start": 0.05,
            "beta_end": 0.5,
            "image_size": 16,
            "ellipse_count": (1, 2),
            "num_pairs": 4,
            "depth": 2,
            "width": 4,
            "alpha_embed_dim": 4,
            "batch_size": 2,
            "epochs": 1,
            "acceleration": 4.0,
            "center_fraction": 0.125,
            "log_in_tensorboard": False,
            "data_range": 1.0,
            "ssim_window": 3,
        }
    )
    if tmp_path is not None:
        config.results_path = str(tmp_path / "results")
    config.update(overrides)
    return config.validate()


def toy_dataset(n=4, size=16):
    rng = RandomSource(99)
    truths = rng.uniform(0, 1, (n, size, size))
    conditions = truths + 0.1 * rng.normal((n, size, size))
    return PairedDataset(conditions, truths)
