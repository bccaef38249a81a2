import matplotlib.pyplot as plt
import numpy
import seaborn

import metrics
import shared_storage
from forward_model import MeasurementOp
from sampler import SamplerConfig, sample_dc, sample_plain


def error_map(reference, image):
    """
    Square root of the absolute difference, which lifts small errors to a visible level.
    """
    return numpy.sqrt(numpy.abs(numpy.asarray(image) - numpy.asarray(reference)))


class DiagnoseModel:
    """
    Tools to understand the behavior of a trained denoiser on one acquisition.

    Args:
        checkpoint: checkpoint dict of the model to diagnose.

        config: configuration class instance related to the checkpoint.
    """

    def __init__(self, checkpoint, config, schedule):
        self.config = config
        self.schedule = schedule
        self.model = shared_storage.model_from_checkpoint(checkpoint, config.dtype)

    def compare_reconstructions(self, measurement, truth, seed, plot=True):
        """
        Reconstruct one measurement with zero-filling, the plain sampler and the DC
        sampler, recording the DC residual trajectory.
        """
        info = ReconstructionInfo("Acceleration x{:g} ".format(measurement.mask.acceleration), truth)
        x_cond = MeasurementOp(measurement.mask).zero_fill(measurement)
        info.store_image("Zero-filling", x_cond)

        plain_config = SamplerConfig(self.schedule, self.config.dc_step, False, seed)
        info.store_image("Diffusion", sample_plain(self.model, x_cond, plain_config))

        dc_config = SamplerConfig(self.schedule, self.config.dc_step, True, seed, True)
        image, trajectory = sample_dc(
            self.model, x_cond, measurement, dc_config, return_trajectory=True
        )
        info.store_image("DiffDC", image)
        info.residuals = trajectory

        if plot:
            info.plot_error_maps()
            info.plot_residuals()
        return info

    def close_all(self):
        plt.close("all")


class ReconstructionInfo:
    """
    Store the reconstructions of one acquisition and plot their error maps.
    """

    def __init__(self, title, truth):
        self.title = title
        self.truth = numpy.asarray(truth, dtype=numpy.float64)
        self.images = {}
        self.residuals = []

    def store_image(self, name, image):
        self.images[name] = numpy.asarray(image, dtype=numpy.float64)

    def scores(self, data_range=1.0):
        return {
            name: {
                "psnr": metrics.psnr(self.truth, image, data_range),
                "ssim": metrics.ssim(self.truth, image, data_range),
            }
            for name, image in self.images.items()
        }

    def plot_error_maps(self, path=None):
        name = "Error maps"
        maps = {label: error_map(self.truth, image) for label, image in self.images.items()}
        vmax = max(float(error.max()) for error in maps.values()) if maps else 1.0
        figure, axes = plt.subplots(
            1, len(maps) + 1, figsize=(4 * (len(maps) + 1), 4), num=self.title + name
        )
        axes = numpy.atleast_1d(axes)
        axes[0].imshow(self.truth, cmap="gray")
        axes[0].set_title("Ground truth")
        axes[0].axis("off")
        for ax, (label, error) in zip(axes[1:], maps.items()):
            seaborn.heatmap(
                error, ax=ax, vmin=0, vmax=vmax, cmap="magma", square=True,
                xticklabels=False, yticklabels=False,
            )
            ax.set_title(label)
        figure.suptitle(self.title + name)
        if path:
            figure.savefig(path, bbox_inches="tight")
        else:
            plt.show(block=False)
        return figure

    def plot_residuals(self, path=None):
        name = "Data-consistency residuals"
        figure = plt.figure(self.title + name)
        if self.residuals:
            steps = [record["t"] for record in self.residuals]
            ax = seaborn.lineplot(
                x=steps, y=[record["residual_before"] for record in self.residuals], label="before DC"
            )
            seaborn.lineplot(
                x=steps, y=[record["residual_after"] for record in self.residuals], label="after DC", ax=ax
            )
            ax.set(xlabel="Timestep", ylabel="||A y - b||", yscale="symlog")
            ax.invert_xaxis()
            ax.set_title(name)
        if path:
            figure.savefig(path, bbox_inches="tight")
        else:
            plt.show(block=False)
        return figure
