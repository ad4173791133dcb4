#!/usr/bin/python3
# -*- coding:utf-8 -*-
# Main rmoe class to run

import argparse
import logging
import os
import sys

import numpy

from rmoe import numkit
from rmoe.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from rmoe.config_wrapper import Configs
from rmoe.constants import ConfigConst, FormatConst, GradConst, Modality, SurgeryConst
from rmoe.errors import RmoeError, ShapeError, SurgeryError
from rmoe.expert_surgery import ActivationStats, decompose_modality, densify, profile_activations, profiling_batches, \
    sparse_prune
from rmoe.file_operations import FileOperations
from rmoe.harness import gradcheck_suite, pretrain
from rmoe.image_functions import ImageFunctions
from rmoe.modal_data import NormStats, SyntheticCorpus, assemble_batch, ingest_manifest, ingest_raw, unpatchify


class Rmoe:
    """
    Object used to run rmoe from the command line

    Methods
    -------
    parse_args(argv)
        Parses command line arguments 'argv' (default sys.argv[1:]). Returns the argparse namespace.

    load_config(config_path)
        Loads config from the file provided to it or sets defaults, then sets up logging.

    run()
        Runs the selected subcommand. Returns the process exit status.

    pretrain() / gradcheck() / route_stats() / prune() / decompose() / reconstruct() / synth()
        One method per subcommand.
    """

    def __init__(self, argv=None, file_path=os.getcwd()):
        self.file_path = file_path
        self.args = self.parse_args(argv)
        self.config = self.load_config(getattr(self.args, "config", None))
        return

    @staticmethod
    def parse_args(argv=None):
        parser = argparse.ArgumentParser(
            prog="rmoe",
            description="Desk-scale hierarchical mixture of modality experts: masked pretraining, gradient checks, "
                        "routing statistics and expert surgery")
        parser.add_argument("--log-file", dest="log_file", type=str,
                            help="Log file, overrides config. Empty string logs to stderr")
        commands = parser.add_subparsers(dest="command", required=True)

        command = commands.add_parser("pretrain", help="Masked pretraining on a synthetic corpus")
        command.add_argument("--config", dest="config", type=str, help="Path to a JSON or INI config file")
        command.add_argument("--out", dest="out", type=str, required=True, help="Checkpoint to write")
        command.add_argument("--steps", dest="steps", type=int, help="Override config steps")
        command.add_argument("--seed", dest="seed", type=int, help="Override config seed")

        command = commands.add_parser("gradcheck", help="Analytic vs finite-difference gradient suite")
        command.add_argument("--eps", dest="eps", type=float, default=GradConst.EPS.value)
        command.add_argument("--tol", dest="tol", type=float, default=GradConst.TOL.value)
        command.add_argument("--seeds", dest="seeds", type=int, default=GradConst.SEEDS.value)

        command = commands.add_parser("route-stats", help="Collaborative activation frequencies over a corpus")
        command.add_argument("--ckpt", dest="ckpt", type=str, required=True)
        command.add_argument("--corpus", dest="corpus", type=str, required=True, help="Manifest of RAW images")
        command.add_argument("--out", dest="out", type=str, required=True, help="JSON statistics to write")

        command = commands.add_parser("prune", help="Sparse expert pruning or dense knowledge integration")
        command.add_argument("--ckpt", dest="ckpt", type=str, required=True)
        command.add_argument("--strategy", dest="strategy", choices=SurgeryConst.STRATEGIES.value, required=True)
        command.add_argument("--percentile", dest="percentile", type=float, default=SurgeryConst.PERCENTILE.value)
        command.add_argument("--threshold", dest="threshold", type=float,
                             help="Fixed activation-frequency threshold instead of the percentile")
        command.add_argument("--stats", dest="stats", type=str, help="JSON statistics from route-stats (ep)")
        command.add_argument("--modality", dest="modality", type=str,
                             help="Target modality for ks/ka/kc on a multi-modal checkpoint")
        command.add_argument("--report", dest="report", type=str, help="Prune report JSON (default <out>.json)")
        command.add_argument("--out", dest="out", type=str, required=True)

        command = commands.add_parser("decompose", help="Single-modality sub-model")
        command.add_argument("--ckpt", dest="ckpt", type=str, required=True)
        command.add_argument("--modality", dest="modality", choices=[m.value for m in Modality], required=True)
        command.add_argument("--out", dest="out", type=str, required=True)

        command = commands.add_parser("reconstruct", help="Masked reconstruction of one RAW image")
        command.add_argument("--ckpt", dest="ckpt", type=str, required=True)
        command.add_argument("--input", dest="input", type=str, required=True)
        command.add_argument("--out", dest="out", type=str, required=True)
        command.add_argument("--csv", dest="csv", type=str, help="Per-patch error CSV (default <out>.csv)")
        command.add_argument("--preview", dest="preview", type=str, help="PNG of input and reconstruction")
        command.add_argument("--seed", dest="seed", type=int, help="Mask seed (default from the checkpoint)")

        command = commands.add_parser("synth", help="Write synthetic RAW scenes and a manifest")
        command.add_argument("--modality", dest="modality", choices=[m.value for m in Modality], required=True)
        command.add_argument("--count", dest="count", type=int, required=True)
        command.add_argument("--seed", dest="seed", type=int, default=ConfigConst.SEED.value)
        command.add_argument("--size", dest="size", type=int, default=ConfigConst.IMAGE_SIZE.value)
        command.add_argument("--out", dest="out", type=str, required=True)
        command.add_argument("--preview", dest="preview", action="store_true", help="Also write PNG quick-looks")

        return parser.parse_args(argv)

    def load_config(self, config_path=None):
        # Loads config from file provided to it or sets defaults
        config = Configs(path=self.file_path, config_path=config_path)
        if config_path is not None:
            config.read_config()

        log_file = config.log_file
        if self.args is not None and self.args.log_file is not None:
            log_file = self.args.log_file
        # Set up logging
        if log_file is not None and log_file != "":
            log_file = os.path.join(self.file_path, log_file)
        else:
            log_file = None

        logging.basicConfig(level=config.log_level, filename=log_file,
                            format='%(asctime)s %(levelname)-8s %(message)s', datefmt='%Y-%m-%d %H:%M:%S')
        logging.info("Config loaded")
        return config

    def run(self):
        logging.info(f"rmoe {self.args.command} has begun")
        commands = {
            "pretrain": self.pretrain,
            "gradcheck": self.gradcheck,
            "route-stats": self.route_stats,
            "prune": self.prune,
            "decompose": self.decompose,
            "reconstruct": self.reconstruct,
            "synth": self.synth,
        }
        try:
            return commands[self.args.command]()

        except RmoeError as e:
            logging.error(f"{type(e).__name__}: {e}")
            print(f"rmoe: {e}", file=sys.stderr)
            return 2

        except IOError as e:
            logging.error(e)
            print(f"rmoe: {e}", file=sys.stderr)
            return 3

        except KeyboardInterrupt:
            logging.info("ctrl + c:")
            return 130

    # Subcommands

    def pretrain(self):
        config = self.config
        if self.args.steps is not None:
            config.steps = self.args.steps
        if self.args.seed is not None:
            config.seed = self.args.seed
        state = pretrain(config)
        save_checkpoint(Checkpoint.from_state(state), self.args.out)
        if state.history:
            last = state.history[-1]
            print(f"step {state.step}: recon {last['recon']:.6f} balance {last['balance']:.6f}")
        return 0

    def gradcheck(self):
        reports = gradcheck_suite(self.args.eps, self.args.tol, self.args.seeds)
        failed = 0
        for name, report in reports.items():
            status = "ok" if report.passed else "FAIL"
            failed += 0 if report.passed else 1
            print(f"{status:4} {name:28} max rel error {report.max_error:.3e}")
        print(f"{len(reports) - failed}/{len(reports)} gradient checks passed")
        return 1 if failed else 0

    def route_stats(self):
        checkpoint = load_checkpoint(self.args.ckpt)
        config = checkpoint.config or self.config
        norm = checkpoint.norm_stats or NormStats.identity(checkpoint.model.modalities)
        batches = profiling_batches(ingest_manifest(self.args.corpus), checkpoint.model.modalities,
                                    config.patch_size, norm)
        stats = profile_activations(checkpoint.model, batches)
        FileOperations.write_json(self.args.out, stats.to_dict())
        print(f"Wrote activation statistics for {len(stats.blocks)} blocks to {self.args.out}")
        return 0

    def prune(self):
        checkpoint = load_checkpoint(self.args.ckpt)
        config = checkpoint.config
        if self.args.strategy == SurgeryConst.STRATEGY_EP.value:
            if self.args.stats is not None:
                stats = ActivationStats.from_dict(FileOperations.read_json(self.args.stats))
            elif checkpoint.activation_stats is not None:
                stats = checkpoint.activation_stats
            else:
                raise SurgeryError("Expert pruning needs --stats or statistics stored in the checkpoint")
            model, report = sparse_prune(checkpoint.model, stats, self.args.percentile, self.args.threshold)
            stats = stats.retain({block: layer["retained"] for block, layer in report.layers.items()})
            report_path = self.args.report or f"{self.args.out}.json"
            FileOperations.write_json(report_path, report.to_dict())
            print(f"Kept {report.params_after} of {report.params_before} parameters ({report.retention:.3f})")
        else:
            model = densify(checkpoint.model, self.args.strategy, self.args.modality)
            config = narrowed_config(config, model.modalities)
            stats = None
            print(f"Dense model with {model.count_parameters()} parameters")
        save_checkpoint(Checkpoint(model, config, checkpoint.step, None, stats, checkpoint.norm_stats), self.args.out)
        return 0

    def decompose(self):
        checkpoint = load_checkpoint(self.args.ckpt)
        model = decompose_modality(checkpoint.model, self.args.modality)
        save_checkpoint(Checkpoint(model, narrowed_config(checkpoint.config, model.modalities), checkpoint.step, None,
                                   None, checkpoint.norm_stats), self.args.out)
        print(f"{self.args.modality} sub-model with {model.count_parameters()} parameters")
        return 0

    def reconstruct(self):
        checkpoint = load_checkpoint(self.args.ckpt)
        model = checkpoint.model.set_training(False)
        config = checkpoint.config or self.config
        cfg = model.cfg
        image = ingest_raw(self.args.input)
        if image.height != cfg.image_size or image.width != cfg.image_size:
            raise ShapeError(f"Model expects {cfg.image_size}x{cfg.image_size} images, got "
                             f"{image.height}x{image.width}")
        norm = checkpoint.norm_stats or NormStats.identity(model.modalities)
        seed = self.args.seed if self.args.seed is not None else config.seed
        batch = assemble_batch([image], cfg.patch_size, config.mask_ratio, seed, norm)
        prediction = model.forward(batch).predictions[image.modality].value

        target = batch.targets[image.modality]
        tokens = prediction.reshape(target.target.shape)[0]
        errors = numpy.mean((tokens.astype(numkit.VERIFY_DTYPE) - target.target[0]) ** 2, axis=-1)
        channels = image.modality.target_channels
        pixels = norm.untarget(image.modality, unpatchify(tokens, image.height, image.width, channels,
                                                          cfg.patch_size))
        # SAR_L1 reconstructions are one real power value per pixel
        out_modality = Modality.SAR_L2 if image.modality is Modality.SAR_L1 else image.modality
        FileOperations.write_raw(self.args.out, out_modality, pixels)

        grid = image.width // cfg.patch_size
        mask = target.mask[0]
        rows = [[p, p // grid, p % grid, int(mask[p]), f"{errors[p]:.8g}"] for p in range(errors.shape[0])]
        csv_path = self.args.csv or f"{self.args.out}.csv"
        FileOperations.write_csv(csv_path, FormatConst.CSV_HEADER.value, rows)

        if self.args.preview:
            original = norm.untarget(image.modality, unpatchify(target.target[0], image.height, image.width,
                                                                channels, cfg.patch_size))
            ImageFunctions.side_by_side([ImageFunctions.preview(out_modality, original),
                                         ImageFunctions.preview(out_modality, pixels)]).save(self.args.preview)
        masked = errors[mask]
        print(f"Masked-patch MSE {float(numpy.mean(masked)) if masked.size else 0.0:.6f} over {masked.size} patches")
        return 0

    def synth(self):
        modality = Modality.parse(self.args.modality)
        FileOperations.ensure_folder(self.args.out)
        corpus = SyntheticCorpus([modality], self.args.count, self.args.seed, self.args.size)
        entries = []
        for i, image in enumerate(corpus.images.get(modality, [])):
            path = os.path.join(self.args.out, f"{modality.value}_{i:04d}.{FormatConst.RAW_EXTENSION.value}")
            FileOperations.write_raw(path, modality, image.pixels)
            entries.append((os.path.abspath(path), modality))
            if self.args.preview:
                ImageFunctions.save_preview(f"{os.path.splitext(path)[0]}.{FormatConst.PREVIEW_EXTENSION.value}",
                                            modality, image.pixels)
        FileOperations.write_manifest(os.path.join(self.args.out, FormatConst.MANIFEST_FILE.value), entries)
        print(f"Wrote {len(entries)} {modality.value} scenes to {self.args.out}")
        return 0


def narrowed_config(config, modalities):
    # Copy of 'config' restricted to the modalities a surgically derived model keeps
    if config is None:
        return None
    narrowed = Configs.from_dict(config.to_dict())
    narrowed.modalities = [Modality.parse(m).value for m in modalities]
    return narrowed


def main(argv=None):
    instance = Rmoe(argv)
    status = instance.run()
    logging.shutdown()
    return status


if __name__ == "__main__":
    sys.exit(main())
