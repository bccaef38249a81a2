import math


class ConfigError(ValueError):
    def __init__(self, violations):
        super().__init__("Invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


class AbstractConfig:
    """
    Inherit this class to declare a DiffDC experiment configuration.

    Every tunable is a plain attribute set in __init__; SECTIONS groups them for the
    nested config file format and the report echo.
    """

    SECTIONS = {
        "general": ["seed"],
        "schedule": ["T", "beta_start", "beta_end"],
        "mask": [
            "patterns",
            "acceleration",
            "center_fraction",
            "g1d_sigma_fraction",
            "g2d_sigma_fraction",
            "poisson_density_slope",
            "poisson_tolerance",
            "poisson_max_attempts",
            "shared_mask",
        ],
        "phantom": [
            "image_size",
            "ellipse_count",
            "ellipse_intensity",
            "ring_intensity",
            "tissue_intensity",
            "noise_std",
            "num_pairs",
        ],
        "denoiser": ["network", "depth", "width", "kernel", "p_norm", "alpha_embed_dim", "dtype"],
        "trainer": [
            "optimizer",
            "lr_init",
            "lr_decay_rate",
            "lr_decay_steps",
            "momentum",
            "weight_decay",
            "adam_betas",
            "batch_size",
            "epochs",
            "log_in_tensorboard",
        ],
        "sampler": ["dc_step", "enable_dc", "record_trajectory", "jobs"],
        "metrics": ["data_range", "ssim_window", "ssim_gaussian"],
        "paths": ["results_path"],
    }

    def attribute_names(self):
        return [name for names in self.SECTIONS.values() for name in names]

    def update(self, overrides):
        """
        Overwrite attributes from a nested {"section": {"key": value}} or flat {"key": value} dict.
        """
        known = set(self.attribute_names())
        unknown = []
        for key, value in overrides.items():
            if key in self.SECTIONS and isinstance(value, dict):
                for param, param_value in value.items():
                    if param in self.SECTIONS[key]:
                        setattr(self, param, param_value)
                    else:
                        unknown.append(f"{key}.{param}")
            elif key in known:
                setattr(self, key, value)
            else:
                unknown.append(key)
        if unknown:
            raise ConfigError([f"Unknown config key {name}" for name in unknown])
        return self

    def to_dict(self):
        return {
            section: {name: _plain(getattr(self, name)) for name in names}
            for section, names in self.SECTIONS.items()
        }

    def validate(self):
        """
        Check every field against the preconditions of the module consuming it.
        Raises ConfigError listing all violations.
        """
        violations = []

        def check(condition, message):
            if not condition:
                violations.append(message)

        check(isinstance(self.seed, int), f"seed should be an integer, got {self.seed!r}")
        check(isinstance(self.T, int) and self.T >= 1, f"T should be an integer >= 1, got {self.T}")
        check(
            0 < self.beta_start <= self.beta_end < 1,
            f"Expected 0 < beta_start <= beta_end < 1, got {self.beta_start} and {self.beta_end}",
        )

        patterns = [self.patterns] if isinstance(self.patterns, str) else list(self.patterns)
        check(len(patterns) > 0, "patterns should not be empty")
        for pattern in patterns:
            check(
                pattern in ("g1d", "g2d", "uniform1d", "poisson"),
                f'Unknown mask pattern {pattern!r}, expected "g1d", "g2d", "uniform1d" or "poisson"',
            )
        check(
            math.isfinite(self.acceleration) and self.acceleration >= 1,
            f"acceleration should be >= 1, got {self.acceleration}",
        )
        check(0 < self.center_fraction < 1, f"center_fraction should be in (0, 1), got {self.center_fraction}")
        check(self.g1d_sigma_fraction > 0, f"g1d_sigma_fraction should be > 0, got {self.g1d_sigma_fraction}")
        check(self.g2d_sigma_fraction > 0, f"g2d_sigma_fraction should be > 0, got {self.g2d_sigma_fraction}")
        check(self.poisson_density_slope >= 0, f"poisson_density_slope should be >= 0, got {self.poisson_density_slope}")
        check(self.poisson_tolerance > 0, f"poisson_tolerance should be > 0, got {self.poisson_tolerance}")
        check(self.poisson_max_attempts >= 1, f"poisson_max_attempts should be >= 1, got {self.poisson_max_attempts}")

        check(self.image_size >= 16, f"image_size should be >= 16, got {self.image_size}")
        check(
            0 <= self.ellipse_count[0] <= self.ellipse_count[1],
            f"Invalid ellipse_count range {self.ellipse_count}",
        )
        check(
            self.ellipse_intensity[0] <= self.ellipse_intensity[1],
            f"Invalid ellipse_intensity range {self.ellipse_intensity}",
        )
        check(self.noise_std >= 0, f"noise_std should be >= 0, got {self.noise_std}")
        check(self.num_pairs >= 1, f"num_pairs should be >= 1, got {self.num_pairs}")

        check(self.network == "resnet", f'network should be "resnet", got {self.network!r}')
        check(self.depth >= 1, f"depth should be >= 1, got {self.depth}")
        check(self.width >= 1, f"width should be >= 1, got {self.width}")
        check(self.kernel >= 1 and self.kernel % 2 == 1, f"kernel should be a positive odd integer, got {self.kernel}")
        check(self.p_norm in (1, 2), f"p_norm should be 1 or 2, got {self.p_norm}")
        check(self.alpha_embed_dim >= 1, f"alpha_embed_dim should be >= 1, got {self.alpha_embed_dim}")
        check(self.dtype in ("float32", "float64"), f'dtype should be "float32" or "float64", got {self.dtype!r}')

        check(self.optimizer in ("Adam", "SGD"), f'optimizer should be "Adam" or "SGD", got {self.optimizer!r}')
        check(self.lr_init > 0, f"lr_init should be > 0, got {self.lr_init}")
        check(self.lr_decay_rate > 0, f"lr_decay_rate should be > 0, got {self.lr_decay_rate}")
        check(self.lr_decay_steps > 0, f"lr_decay_steps should be > 0, got {self.lr_decay_steps}")
        check(len(self.adam_betas) == 2 and all(0 <= b < 1 for b in self.adam_betas), f"Invalid adam_betas {self.adam_betas}")
        check(self.batch_size >= 1, f"batch_size should be >= 1, got {self.batch_size}")
        check(self.epochs >= 0, f"epochs should be >= 0, got {self.epochs}")

        check(0 <= self.dc_step <= 1, f"dc_step should be in [0, 1], got {self.dc_step}")
        check(self.jobs >= 1, f"jobs should be >= 1, got {self.jobs}")

        check(self.data_range is None or self.data_range > 0, f"data_range should be > 0, got {self.data_range}")
        check(self.ssim_window >= 3 and self.ssim_window % 2 == 1, f"ssim_window should be an odd integer >= 3, got {self.ssim_window}")

        if violations:
            raise ConfigError(violations)
        self.patterns = patterns
        return self


def _plain(value):
    if isinstance(value, tuple):
        return list(value)
    return value
