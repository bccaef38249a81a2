import datetime
import os

from .abstract_config import AbstractConfig


class DiffDCConfig(AbstractConfig):
    def __init__(self):
        self.seed = 0  # Seed for torch and every RandomSource of the run



        ### Schedule
        self.T = 200  # Number of diffusion steps
        self.beta_start = 1e-3  # Linear beta schedule start
        self.beta_end = 0.2  # Linear beta schedule end. With T = 200 the final alpha_bar is below 1e-8



        ### Mask
        self.patterns = ["g1d"]  # "g1d", "g2d", "uniform1d" and/or "poisson". Datasets cycle through the list
        self.acceleration = 8.0  # Acceleration factor R, about 1 / R of k-space is sampled
        self.center_fraction = 0.04  # Fraction of each axis fully sampled at the k-space center
        self.g1d_sigma_fraction = 1 / 6  # Gaussian 1D profile width, as a fraction of the width
        self.g2d_sigma_fraction = 1 / 6  # Gaussian 2D profile width, as a fraction of the shorter side
        self.poisson_density_slope = 2.0  # Poisson exclusion radius grows to (1 + slope) times its center value at the corners
        self.poisson_tolerance = 0.1  # Accepted relative deviation of the Poisson sampled fraction from 1 / R
        self.poisson_max_attempts = 40  # Bisection steps on the Poisson radius before giving up
        self.shared_mask = False  # Use one mask for the whole dataset instead of one per pair



        ### Phantom
        self.image_size = 64  # Square image size
        self.ellipse_count = (4, 8)  # Inclusive range of random ellipses per phantom
        self.ellipse_intensity = (0.1, 0.5)  # Range of intensity added by each ellipse
        self.ring_intensity = 0.8  # Skull-like bounding ring
        self.tissue_intensity = 0.2  # Background inside the ring
        self.noise_std = 0.0  # Per-entry std of the complex k-space noise
        self.num_pairs = 500  # Default number of pairs generated by simulate



        ### Denoiser
        self.network = "resnet"  # Only "resnet" is implemented
        self.depth = 6  # Number of residual blocks
        self.width = 32  # Number of channels in every block
        self.kernel = 3  # Convolution kernel size, odd
        self.p_norm = 2  # Norm of the training objective, 1 or 2
        self.alpha_embed_dim = 16  # Size of the sinusoidal alpha_bar embedding
        self.dtype = "float32"  # "float32" or "float64" network arithmetic



        ### Training
        self.results_path = os.path.join(os.path.dirname(os.path.realpath(__file__)), "../results", os.path.basename(__file__)[:-3], datetime.datetime.now().strftime("%Y-%m-%d--%H-%M-%S"))  # Path to store the checkpoints, reports and TensorBoard logs
        self.optimizer = "Adam"  # "Adam" or "SGD"
        self.weight_decay = 0  # L2 weights regularization
        self.momentum = 0.9  # Used only if optimizer is SGD
        self.adam_betas = (0.9, 0.999)  # Used only if optimizer is Adam
        self.batch_size = 16  # Number of pairs per optimizer step
        self.epochs = 20  # Passes over the training set
        self.log_in_tensorboard = True  # Write the epoch losses and the hyperparameters with a SummaryWriter

        # Exponential learning rate schedule
        self.lr_init = 1e-3  # Initial learning rate
        self.lr_decay_rate = 1  # Set it to 1 to use a constant learning rate
        self.lr_decay_steps = 1000



        ### Sampler
        self.dc_step = 1.0  # Data-consistency step size in [0, 1], 0 turns the correction off
        self.enable_dc = True  # False uses the plain conditional sampler
        self.record_trajectory = False  # Store per-step k-space residuals in the reconstruction report
        self.jobs = 1  # Parallel reconstructions (ray workers) when reconstructing a dataset



        ### Metrics
        self.data_range = 1.0  # Dynamic range for PSNR / SSIM, None uses the reference max - min
        self.ssim_window = 7  # Uniform SSIM window size
        self.ssim_gaussian = False  # Use the 11x11 Gaussian (sigma 1.5) SSIM window instead
