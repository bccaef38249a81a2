import argparse
import copy
import importlib
import json
import os
import sys

import ray
import torch
from torch.utils.tensorboard import SummaryWriter

import diagnose_model
import models
import shared_storage
import trainer
from configs.abstract_config import ConfigError
from data_pipeline import (
    DatasetManifest,
    MaskParams,
    PairedDataset,
    PhantomSpec,
    TensorFileError,
    build_dataset,
    gen_phantom,
    load_image_file,
    load_tensor,
    save_pgm,
    save_tensor,
)
from forward_model import KSpaceMeasurement, MeasurementOp
from masks import MaskGenerationError, MaskPattern, generate_mask, mask_from_keep, sampled_fraction
from metrics import evaluate_batch
from numerics import RandomSource
from sampler import SamplerConfig, reconstruct
from schedule import linear_beta_schedule

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

# Benchmark phantoms are drawn away from the training seed stream
HELD_OUT_SEED_OFFSET = 1_000_003


class DatasetMismatchError(RuntimeError):
    def __init__(self, unmatched):
        super().__init__("Unmatched files: " + ", ".join(unmatched))
        self.unmatched = unmatched


class DiffDC:
    """
    Main class to manage DiffDC experiments: masks, simulated datasets, denoiser
    training, data-consistent reconstruction and evaluation.

    Args:
        config_name (str): Name of the config module, it should match the name of a .py file
        in the "./configs" directory.

        config (dict, DiffDCConfig, optional): Override the default config.

    Example:
        >>> diffdc = DiffDC("phantom", {"epochs": 5})
        >>> diffdc.simulate("data/train", n=200)
        >>> diffdc.train("data/train/manifest.json", "results/model.checkpoint")
    """

    def __init__(self, config_name="phantom", config=None):
        # Load the config from the module with the config name
        try:
            config_module = importlib.import_module("configs." + config_name)
            self.config = config_module.DiffDCConfig()
        except ModuleNotFoundError as err:
            print(
                f'{config_name} is not a supported config name, try "phantom" or "fastmri_scale".'
            )
            raise err

        # Overwrite the config
        if config:
            if isinstance(config, dict):
                self.config.update(config)
            else:
                self.config = config
        self.config.validate()

        # Fix random generator seed
        torch.manual_seed(self.config.seed)

        self.schedule = linear_beta_schedule(
            self.config.T, self.config.beta_start, self.config.beta_end
        )

    def make_mask(self, height=None, width=None):
        height = height or self.config.image_size
        width = width or self.config.image_size
        return generate_mask(
            self.config.patterns[0],
            height,
            width,
            self.config.acceleration,
            self.config.seed,
            self.config,
        )

    def phantom_spec(self):
        return PhantomSpec(
            self.config.image_size,
            tuple(self.config.ellipse_count),
            tuple(self.config.ellipse_intensity),
            self.config.ring_intensity,
            self.config.tissue_intensity,
            self.config.seed,
        )

    def simulate(self, out_dir, n=None, truths=None):
        """
        Build a paired dataset from phantoms (or the given ground-truth images).
        """
        if truths is not None:
            n = len(truths)
        n = n if n is not None else self.config.num_pairs
        return build_dataset(
            n,
            self.phantom_spec(),
            MaskParams.from_config(self.config),
            self.config.noise_std,
            out_dir,
            RandomSource(self.config.seed),
            truths,
        )

    def initial_checkpoint(self):
        torch.manual_seed(self.config.seed)
        model = models.DenoiserNetwork(self.config)
        return {
            "weights": copy.deepcopy(model.get_weights()),
            "optimizer_state": None,
            "training_step": 0,
            "lr": self.config.lr_init,
            "epoch_losses": [],
            "denoiser": models.DenoiserConfig.from_config(self.config).to_dict(),
            "schedule": self.schedule.metadata(),
        }

    def train(self, manifest_path, checkpoint_out=None, resume=None):
        """
        Train the denoiser on a dataset and save the checkpoint and the loss log.

        Args:
            manifest_path (str): Dataset manifest written by simulate.
            checkpoint_out (str, optional): Checkpoint path, results_path/model.checkpoint by default.
            resume (str, optional): Checkpoint to continue training from.

        Returns:
            TrainState
        """
        manifest = DatasetManifest.load(manifest_path)
        manifest.validate()
        dataset = PairedDataset.from_manifest(manifest)

        if resume:
            checkpoint = shared_storage.load_checkpoint(resume)
            expected = models.DenoiserConfig.from_config(self.config).to_dict()
            if checkpoint["denoiser"] != expected:
                raise ValueError(
                    f"Checkpoint denoiser {checkpoint['denoiser']} does not match the config {expected}"
                )
        else:
            checkpoint = self.initial_checkpoint()
        checkpoint["schedule"] = self.schedule.metadata()
        storage = shared_storage.SharedStorage(checkpoint, self.config)

        writer = None
        if self.config.log_in_tensorboard:
            os.makedirs(self.config.results_path, exist_ok=True)
            writer = SummaryWriter(self.config.results_path)
            print(
                "\nTraining...\nRun tensorboard --logdir ./results and go to http://localhost:6006/ to see the training performance.\n"
            )
            # Save hyperparameters to TensorBoard
            hp_table = [
                f"| {section}.{key} | {value} |"
                for section, values in self.config.to_dict().items()
                for key, value in values.items()
            ]
            writer.add_text(
                "Hyperparameters",
                "| Parameter | Value |\n|-------|-------|\n" + "\n".join(hp_table),
            )

        training_worker = trainer.Trainer(storage.get_checkpoint(), self.config)
        rng = RandomSource(self.config.seed + storage.get_info("training_step"))
        state = training_worker.train(dataset, self.schedule, self.config.epochs, rng, writer)
        if writer is not None:
            writer.close()

        storage.set_info(state.to_checkpoint())
        path = storage.save_checkpoint(checkpoint_out)
        with open(path + ".losses.json", "w") as f:
            json.dump(storage.get_info(["epoch_losses", "training_step"]), f, indent=2)
        print(f"Checkpoint saved to {path}")
        return state

    def load_checkpoint(self, checkpoint_path):
        checkpoint = shared_storage.load_checkpoint(checkpoint_path)
        if checkpoint["schedule"] != self.schedule.metadata():
            print(
                f"Warning: checkpoint was trained with schedule {checkpoint['schedule']}, "
                f"sampling with {self.schedule.metadata()}"
            )
        return checkpoint

    def reconstruct(self, checkpoint, measurement, seed=None):
        worker = ReconstructionWorker(checkpoint, self.config)
        return worker.reconstruct(measurement, self.config.seed if seed is None else seed)

    def reconstruct_files(self, checkpoint_path, kspace_path, mask_path, out_prefix):
        """
        Reconstruct one acquisition stored as DMT1 tensors and write
        <out_prefix>.dmt, .pgm and .json.
        """
        checkpoint = self.load_checkpoint(checkpoint_path)
        mask = mask_from_keep(load_tensor(mask_path))
        measurement = KSpaceMeasurement(load_tensor(kspace_path), mask, self.config.noise_std)
        image, report = self.reconstruct(checkpoint, measurement)
        write_reconstruction(out_prefix, image, report)
        return image, report

    def reconstruct_dataset(self, checkpoint_path, manifest_path, out_dir):
        """
        Reconstruct every entry of a dataset into out_dir/<name>.{dmt,pgm,json}, using
        `jobs` ray workers when jobs > 1. Entry i is sampled with seed + i.
        """
        checkpoint = self.load_checkpoint(checkpoint_path)
        manifest = DatasetManifest.load(manifest_path)
        manifest.validate()
        measurements = [manifest.load_measurement(entry) for entry in manifest.entries]
        seeds = [self.config.seed + index for index in range(len(measurements))]
        os.makedirs(out_dir, exist_ok=True)

        if self.config.jobs > 1:
            ray.init(num_cpus=self.config.jobs, ignore_reinit_error=True)
            RemoteWorker = ray.remote(ReconstructionWorker)
            workers = [
                RemoteWorker.options(num_cpus=1).remote(checkpoint, self.config)
                for _ in range(min(self.config.jobs, len(measurements)))
            ]
            results = ray.get(
                [
                    workers[index % len(workers)].reconstruct.remote(measurement, seed)
                    for index, (measurement, seed) in enumerate(zip(measurements, seeds))
                ]
            )
            ray.shutdown()
        else:
            worker = ReconstructionWorker(checkpoint, self.config)
            results = [
                worker.reconstruct(measurement, seed)
                for measurement, seed in zip(measurements, seeds)
            ]

        for entry, (image, report) in zip(manifest.entries, results):
            write_reconstruction(os.path.join(out_dir, entry.name), image, report)
            print(f"{entry.name}: final residual {report['final_residual']:.3e}")
        return results

    def evaluate(self, recon_dir, truth_dir):
        """
        Pair the images of two directories by file name and score them.

        Returns:
            MetricReport
        """
        recon_files = image_files(recon_dir)
        truth_files = image_files(truth_dir)
        unmatched = sorted(set(recon_files) ^ set(truth_files))
        if unmatched:
            raise DatasetMismatchError(unmatched)
        names = sorted(truth_files)
        pairs = [
            (load_image_file(truth_files[name]), load_image_file(recon_files[name]))
            for name in names
        ]
        return evaluate_batch(
            pairs, self.config.data_range, self.config.ssim_window, self.config.ssim_gaussian, names
        )

    def benchmark(self, checkpoint_path, patterns, accelerations, n):
        """
        Score zero-filling, the plain sampler and the DC sampler on n held-out phantoms
        for every (pattern, acceleration). Phantoms and mask seeds are shared across
        accelerations, so a checkpoint trained at one factor can be compared across factors.
        """
        checkpoint = self.load_checkpoint(checkpoint_path)
        worker = ReconstructionWorker(checkpoint, self.config)
        spec = self.phantom_spec()
        items = []
        for item_rng in RandomSource(self.config.seed + HELD_OUT_SEED_OFFSET).spawn(n):
            phantom_rng, noise_rng, mask_rng = item_rng.spawn(3)
            items.append((gen_phantom(spec, phantom_rng), noise_rng.seed, mask_rng.seed))

        rows = []
        for pattern in patterns:
            for acceleration in accelerations:
                pairs = {"zero_filling": [], "diffusion": [], "diffdc": []}
                for index, (truth, noise_seed, mask_seed) in enumerate(items):
                    mask = generate_mask(
                        pattern, spec.size, spec.size, acceleration, mask_seed, self.config
                    )
                    op = MeasurementOp(mask)
                    measurement = op.undersample(
                        truth, self.config.noise_std, RandomSource(noise_seed)
                    )
                    seed = self.config.seed + index
                    pairs["zero_filling"].append((truth, op.zero_fill(measurement)))
                    pairs["diffusion"].append(
                        (truth, worker.reconstruct(measurement, seed, enable_dc=False)[0])
                    )
                    pairs["diffdc"].append(
                        (truth, worker.reconstruct(measurement, seed, enable_dc=True)[0])
                    )
                for method, method_pairs in pairs.items():
                    report = evaluate_batch(
                        method_pairs,
                        self.config.data_range,
                        self.config.ssim_window,
                        self.config.ssim_gaussian,
                    )
                    rows.append(
                        {
                            "method": method,
                            "pattern": MaskPattern(pattern).value,
                            "acceleration": float(acceleration),
                            "psnr_mean": report.psnr_mean,
                            "psnr_std": report.psnr_std,
                            "ssim_mean": report.ssim_mean,
                            "ssim_std": report.ssim_std,
                        }
                    )
                    print(f"{pattern} x{acceleration:g} {method}: {report.summary()}")
        return {"config": self.config.to_dict(), "count": n, "results": rows}

    def diagnose(self, checkpoint_path, kspace_path, mask_path, truth_path, out_prefix):
        """
        Error maps of zero-filling, plain and DC reconstructions against the truth,
        plus the DC residual trajectory, saved as PNG figures.
        """
        checkpoint = self.load_checkpoint(checkpoint_path)
        mask = mask_from_keep(load_tensor(mask_path))
        measurement = KSpaceMeasurement(load_tensor(kspace_path), mask, self.config.noise_std)
        truth = load_image_file(truth_path)

        diagnose_model.plt.switch_backend("Agg")
        diagnosis = diagnose_model.DiagnoseModel(checkpoint, self.config, self.schedule)
        info = diagnosis.compare_reconstructions(measurement, truth, self.config.seed, plot=False)
        info.plot_error_maps(out_prefix + "_errors.png")
        info.plot_residuals(out_prefix + "_residuals.png")
        diagnosis.close_all()
        scores = info.scores(self.config.data_range)
        with open(out_prefix + "_scores.json", "w") as f:
            json.dump(scores, f, indent=2)
        return scores


class ReconstructionWorker:
    """
    Holds a read-only model and reconstructs acquisitions. Wrapped with ray.remote
    to fan reconstructions out across processes.
    """

    def __init__(self, checkpoint, config):
        self.config = config
        self.schedule = linear_beta_schedule(config.T, config.beta_start, config.beta_end)
        self.model = shared_storage.model_from_checkpoint(checkpoint, config.dtype)

    def reconstruct(self, measurement, seed, enable_dc=None):
        sampler_config = SamplerConfig(
            self.schedule,
            self.config.dc_step,
            self.config.enable_dc if enable_dc is None else enable_dc,
            seed,
            self.config.record_trajectory,
        )
        return reconstruct(
            self.model, measurement, measurement.mask, sampler_config, self.config.to_dict()
        )


def write_reconstruction(out_prefix, image, report):
    directory = os.path.dirname(out_prefix)
    if directory:
        os.makedirs(directory, exist_ok=True)
    save_tensor(out_prefix + ".dmt", image)
    save_pgm(out_prefix + ".pgm", image)
    with open(out_prefix + ".json", "w") as f:
        json.dump(report, f, indent=2)


def image_files(directory):
    """
    Map file stem to path for the images of a directory, DMT1 preferred over PGM.
    """
    files = {}
    for filename in sorted(os.listdir(directory)):
        stem, extension = os.path.splitext(filename)
        if extension == ".dmt" or (extension == ".pgm" and stem not in files):
            files[stem] = os.path.join(directory, filename)
    return files


##################################
############## CLI ###############


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = ArgumentParser(
        prog="diffdc",
        description="Conditional diffusion MRI reconstruction with data consistency.",
    )
    commands = parser.add_subparsers(dest="command", required=True)
    pattern_names = [pattern.value for pattern in MaskPattern]

    def command(name, help_text):
        sub = commands.add_parser(name, help=help_text)
        sub.add_argument("--config-name", default="phantom", help="Module of ./configs")
        sub.add_argument("--config", help="JSON file overriding the config")
        sub.add_argument("--seed", type=int)
        return sub

    sub = command("mask", "Generate a sampling mask")
    sub.add_argument("--pattern", choices=pattern_names, required=True)
    sub.add_argument("--accel", type=float, required=True)
    sub.add_argument("--size", type=int)
    sub.add_argument("--height", type=int)
    sub.add_argument("--width", type=int)
    sub.add_argument("--center-fraction", type=float)
    sub.add_argument("--out", required=True)

    sub = command("simulate", "Build a paired dataset of simulated acquisitions")
    sub.add_argument("--n", type=int)
    sub.add_argument("--pattern", choices=pattern_names, nargs="+")
    sub.add_argument("--accel", type=float)
    sub.add_argument("--size", type=int)
    sub.add_argument("--noise-std", type=float)
    sub.add_argument("--shared-mask", action="store_true", default=None)
    sub.add_argument("--truth", nargs="+", help="Ground-truth images (PGM or DMT1) instead of phantoms")
    sub.add_argument("--out-dir", required=True)

    sub = command("train", "Train the denoiser")
    sub.add_argument("--dataset", required=True, help="Dataset manifest")
    sub.add_argument("--out", help="Checkpoint path")
    sub.add_argument("--resume", help="Checkpoint to resume from")
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--lr", type=float)
    sub.add_argument("--optimizer", choices=["Adam", "SGD"])
    sub.add_argument("--depth", type=int)
    sub.add_argument("--width", type=int)
    sub.add_argument("--kernel", type=int)
    sub.add_argument("--p-norm", type=int)
    sub.add_argument("--dtype", choices=["float32", "float64"])
    sub.add_argument("--T", type=int)
    sub.add_argument("--beta-start", type=float)
    sub.add_argument("--beta-end", type=float)
    sub.add_argument("--no-tensorboard", action="store_true")

    sub = command("reconstruct", "Reconstruct undersampled k-space")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--kspace")
    sub.add_argument("--mask")
    sub.add_argument("--manifest", help="Reconstruct every entry of a dataset")
    sub.add_argument("--out", required=True, help="Output prefix, or directory with --manifest")
    sub.add_argument("--dc-step", type=float)
    sub.add_argument("--no-dc", action="store_true")
    sub.add_argument("--trace", action="store_true")
    sub.add_argument("--jobs", type=int)
    sub.add_argument("--T", type=int)
    sub.add_argument("--beta-start", type=float)
    sub.add_argument("--beta-end", type=float)

    sub = command("evaluate", "Score reconstructions against ground truth")
    sub.add_argument("--recon-dir", required=True)
    sub.add_argument("--truth-dir", required=True)
    sub.add_argument("--data-range", type=float)
    sub.add_argument("--ssim-gaussian", action="store_true", default=None)
    sub.add_argument("--out", help="JSON report path")

    sub = command("benchmark", "Compare zero-filling, plain and DC sampling")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--patterns", choices=pattern_names, nargs="+", default=["g1d"])
    sub.add_argument("--accels", type=float, nargs="+", default=[4.0, 8.0])
    sub.add_argument("--n", type=int, default=10)
    sub.add_argument("--dc-step", type=float)
    sub.add_argument("--out", help="JSON report path")

    sub = command("diagnose", "Plot error maps and DC residuals")
    sub.add_argument("--checkpoint", required=True)
    sub.add_argument("--kspace", required=True)
    sub.add_argument("--mask", required=True)
    sub.add_argument("--truth", required=True)
    sub.add_argument("--out", required=True, help="Output prefix of the figures")
    return parser


# Flag name -> config attribute
FLAG_TO_CONFIG = {
    "seed": "seed",
    "accel": "acceleration",
    "size": "image_size",
    "center_fraction": "center_fraction",
    "noise_std": "noise_std",
    "n": "num_pairs",
    "shared_mask": "shared_mask",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "lr_init",
    "optimizer": "optimizer",
    "depth": "depth",
    "kernel": "kernel",
    "p_norm": "p_norm",
    "dtype": "dtype",
    "T": "T",
    "beta_start": "beta_start",
    "beta_end": "beta_end",
    "dc_step": "dc_step",
    "jobs": "jobs",
    "data_range": "data_range",
    "ssim_gaussian": "ssim_gaussian",
}


def config_overrides(args):
    overrides = {}
    if args.config:
        with open(args.config) as f:
            overrides.update(json.load(f))
    flags = vars(args)
    for flag, attribute in FLAG_TO_CONFIG.items():
        if flags.get(flag) is not None:
            overrides[attribute] = flags[flag]
    if args.command == "train" and args.width is not None:
        overrides["width"] = args.width
    if flags.get("pattern") is not None:
        pattern = flags["pattern"]
        overrides["patterns"] = [pattern] if isinstance(pattern, str) else pattern
    if args.command == "benchmark":
        overrides["patterns"] = args.patterns
    if flags.get("no_dc"):
        overrides["enable_dc"] = False
    if flags.get("trace"):
        overrides["record_trajectory"] = True
    if flags.get("no_tensorboard"):
        overrides["log_in_tensorboard"] = False
    return overrides


def run_command(diffdc, args):
    if args.command == "mask":
        mask = diffdc.make_mask(args.height, args.width)
        save_tensor(args.out, mask.keep)
        print(f"sampled_fraction={sampled_fraction(mask):.6f}")

    elif args.command == "simulate":
        truths = [load_image_file(path) for path in args.truth] if args.truth else None
        diffdc.simulate(args.out_dir, truths=truths)
        print(os.path.join(args.out_dir, "manifest.json"))

    elif args.command == "train":
        diffdc.train(args.dataset, args.out, args.resume)

    elif args.command == "reconstruct":
        if args.manifest:
            diffdc.reconstruct_dataset(args.checkpoint, args.manifest, args.out)
        elif args.kspace and args.mask:
            _, report = diffdc.reconstruct_files(args.checkpoint, args.kspace, args.mask, args.out)
            print(f"Reconstruction written to {args.out}.dmt ({report['wall_time']:.2f} s)")
        else:
            raise ValueError("reconstruct needs --kspace and --mask, or --manifest")

    elif args.command == "evaluate":
        report = diffdc.evaluate(args.recon_dir, args.truth_dir)
        print(report.summary())
        output = json.dumps({"config": diffdc.config.to_dict(), **report.to_dict()}, indent=2)
        if args.out:
            with open(args.out, "w") as f:
                f.write(output)
        else:
            print(output)

    elif args.command == "benchmark":
        results = diffdc.benchmark(args.checkpoint, args.patterns, args.accels, args.n)
        if args.out:
            with open(args.out, "w") as f:
                json.dump(results, f, indent=2)

    elif args.command == "diagnose":
        scores = diffdc.diagnose(args.checkpoint, args.kspace, args.mask, args.truth, args.out)
        for name, values in scores.items():
            print(f"{name}: PSNR {values['psnr']:.2f} dB, SSIM {values['ssim']:.4f}")


def main(argv=None):
    args = build_parser().parse_args(argv)

    # Every config error surfaces here, before any file is written
    try:
        diffdc = DiffDC(args.config_name, config_overrides(args))
    except (ConfigError, ValueError, TypeError, OSError, ModuleNotFoundError) as err:
        print(f"diffdc: config error: {err}", file=sys.stderr)
        return EXIT_USAGE

    try:
        run_command(diffdc, args)
    except (
        TensorFileError,
        MaskGenerationError,
        DatasetMismatchError,
        OSError,
        ValueError,
    ) as err:
        print(f"diffdc: error: {err}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
