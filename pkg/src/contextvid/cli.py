"""Command-line interface for the synthetic video-diffusion pipeline.

Subcommands mirror the pipeline stages; all artifact paths live under the
directory given by ``--out``. Settings come from an INI config file (see
``ExperimentConfig``) and can be overridden by the ablation flags below.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from . import harness
from .experiment import Experiment, ExperimentConfig, merge_reports
from .geometry import write_mask_pgm

__all__ = ["main", "build_parser"]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="contextvid",
        description="Camera-controllable video diffusion on synthetic posed scenes.")
    parser.add_argument("--config", help="INI config file; defaults apply when omitted")
    parser.add_argument("--out", default="out", help="artifact directory (default: out)")
    parser.add_argument("--seed", type=int, help="override the training/data seed")
    parser.add_argument("--ctx-strategy", choices=harness.CONTEXT_STRATEGIES,
                        help="context frame sampling strategy")
    parser.add_argument("--ctx-n", type=int, choices=range(1, 5),
                        help="number of context frames (1-4)")
    parser.add_argument("--cfg-scale", type=float, help="classifier-free guidance scale")
    parser.add_argument("--ddim-steps", type=int, help="number of DDIM sampling steps")
    parser.add_argument("--no-epipolar-mask", action="store_true",
                        help="ablation: all-ones attention mask in the visual stream")
    parser.add_argument("--no-temporal-embedding", action="store_true",
                        help="ablation: drop frame-index embeddings from context tokens")
    parser.add_argument("--stream", choices=("both", "semantic", "visual"),
                        help="ablation: restrict the context encoder to one stream")
    parser.add_argument("--freeze-backbone", action="store_true",
                        help="train only the context-encoder parameters")

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="render ground-truth eval clips and pose files")
    sub.add_parser("train", help="fit the patch codec and the diffusion model")
    sub.add_parser("sample", help="DDIM-sample eval clips from the trained model")
    sub.add_parser("eval", help="score generated clips against ground truth")
    viz = sub.add_parser("mask-viz", help="emit epipolar-mask PGM slices for one clip")
    viz.add_argument("--scene-seed", type=int, default=100)
    rep = sub.add_parser("report", help="merge metric CSVs into a summary")
    rep.add_argument("csvs", nargs="*", help="report CSVs (default: <out>/reports/*.csv)")
    return parser


def apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.ctx_strategy:
        updates["strategy"] = args.ctx_strategy
    if args.ctx_n:
        updates["context_n"] = args.ctx_n
    if args.cfg_scale is not None:
        updates["cfg_scale"] = args.cfg_scale
    if args.ddim_steps is not None:
        updates["ddim_steps"] = args.ddim_steps
    if args.no_epipolar_mask:
        updates["use_mask"] = False
    if args.no_temporal_embedding:
        updates["temporal"] = False
    if args.stream:
        updates["streams"] = args.stream
    if args.freeze_backbone:
        updates["freeze_backbone"] = True
    return dataclasses.replace(cfg, **updates)


def cmd_mask_viz(exp: Experiment, scene_seed: int) -> None:
    cfg = exp.cfg
    spec = harness.ClipSpec(
        scene_seed=scene_seed, trajectory=cfg.trajectory, frames=cfg.frames,
        stride=cfg.stride, strategy=cfg.strategy, context_n=cfg.context_n,
        video_frames=cfg.video_frames)
    codec = harness.PatchCodec(cfg.latent_patch, cfg.latent_channels)
    sample, _, _ = harness.assemble_clip(spec, codec, exp.K,
                                         cfg.latent_size, cfg.latent_size,
                                         delta=cfg.delta)
    mask_dir = exp.out / "masks" / str(scene_seed)
    mask_dir.mkdir(parents=True, exist_ok=True)
    for t in range(cfg.frames):
        for j in range(cfg.context_n):
            write_mask_pgm(sample.mask, t, j, mask_dir / f"mask_t{t:02d}_j{j}.pgm")
    print(f"wrote {cfg.frames * cfg.context_n} mask slices to {mask_dir}")


def cmd_report(exp: Experiment, csvs: list[str]) -> None:
    paths = [Path(p) for p in csvs]
    if not paths:
        paths = sorted(p for p in (exp.out / "reports").glob("*.csv")
                       if p.name != "summary.csv")
    summary = merge_reports(paths)
    summary.write_csv(exp.out / "reports" / "summary.csv")
    print("report            value")
    print(f"mse_total         {summary.mse.sum():.4f}")
    print(f"mse_late(9..15)   {summary.mse[9:].mean():.4f}" if len(summary.mse) > 9
          else f"mse_mean          {summary.mse.mean():.4f}")
    print(f"ssim_mean         {summary.ssim.mean():.4f}")
    print(f"rot_err           {summary.rot_err:.6f}")
    print(f"trans_err         {summary.trans_err:.6f}")
    print(f"cam_mc            {summary.cam_mc:.6f}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExperimentConfig.from_ini(args.config) if args.config else ExperimentConfig()
    cfg = apply_overrides(cfg, args)
    exp = Experiment(cfg, args.out)

    if args.command == "synth":
        exp.synth()
        print(f"wrote ground truth for seeds {cfg.eval_seeds} to {exp.out / 'gt'}")
    elif args.command == "train":
        exp.fit_codec()
        trace = exp.fit_model()
        print(f"trained {cfg.steps} steps; final loss {trace[-1][1]:.6f}; "
              f"checkpoints in {exp.out}")
    elif args.command == "sample":
        videos = exp.sample()
        print(f"sampled {len(videos)} clips into {exp.out / 'gen'}")
    elif args.command == "eval":
        reports = exp.evaluate()
        for seed, rep in reports.items():
            print(f"seed {seed}: mse_mean={rep.mse.mean():.2f} "
                  f"ssim_mean={rep.ssim.mean():.4f}")
    elif args.command == "mask-viz":
        cmd_mask_viz(exp, args.scene_seed)
    elif args.command == "report":
        cmd_report(exp, args.csvs)
    return 0


if __name__ == "__main__":
    sys.exit(main())
