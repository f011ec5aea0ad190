"""End-to-end experiment driver: synth -> codec -> train -> sample -> eval.

An experiment is fully described by an INI config file. Every artifact
(checkpoints, PPM frames, pose files, metric CSVs) is a deterministic
function of the config and its seeds, so identical invocations produce
byte-identical outputs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import harness
from .checkpoint import load_checkpoint, save_checkpoint
from .diffusion import (
    ContextDiffusionModel,
    Denoiser,
    DenoiserConfig,
    TrainConfig,
    build_schedule,
    ddim_sample,
    train,
)
from .encoder import ContextEncoder, EncoderConfig
from .geometry import PoseFileEntry, read_pose_file, write_pose_file
from .metrics import (
    MetricReport,
    TrajectoryPair,
    cam_mc,
    mse_per_frame,
    normalize_trajectory,
    rot_err,
    ssim_per_frame,
    trans_err,
)
from .nn import PatchCodec

__all__ = ["ExperimentError", "ExperimentConfig", "Experiment", "run_experiment",
           "merge_reports"]


class ExperimentError(RuntimeError):
    """A pipeline stage failed; the message names the stage."""


def _parse_range(text: str) -> list[int]:
    """'a:b' -> [a, b); 'a,b,c' -> [a, b, c]; 'a' -> [a]."""
    text = text.strip()
    if ":" in text:
        lo, hi = text.split(":")
        return list(range(int(lo), int(hi)))
    return [int(p) for p in text.split(",")]


@dataclass
class ExperimentConfig:
    # data
    image_size: int = 32
    latent_patch: int = 4
    latent_channels: int = 8
    frames: int = 16
    video_frames: int = 64
    trajectory: str = "pan"
    strategy: str = "range_after_end"
    context_n: int = 1
    stride: int = 1
    epipolar_delta: float = 0.0  # 0 = geometry-module default (half diagonal)
    train_seeds: list[int] = field(default_factory=lambda: list(range(24)))
    eval_seeds: list[int] = field(default_factory=lambda: list(range(100, 106)))
    # model
    vis_dim: int = 32
    sem_dim: int = 32
    sem_queries: int = 16
    sem_layers: int = 2
    vis_layers: int = 1
    heads: int = 2
    dim: int = 48
    blocks: int = 2
    temb_dim: int = 16
    t_diff: int = 1000
    use_context: bool = True
    use_mask: bool = True
    temporal: bool = True
    streams: str = "both"
    # train
    steps: int = 400
    batch: int = 4
    lr: float = 1e-4
    loss: str = "log"
    cond_dropout: float = 0.1
    freeze_backbone: bool = False
    seed: int = 0
    codec_steps: int = 400
    # sample
    ddim_steps: int = 25
    cfg_scale: float = 3.5
    sample_seed: int = 0

    _SECTIONS = {
        "data": ("image_size", "latent_patch", "latent_channels", "frames",
                 "video_frames", "trajectory", "strategy", "context_n", "stride",
                 "epipolar_delta", "train_seeds", "eval_seeds"),
        "model": ("vis_dim", "sem_dim", "sem_queries", "sem_layers", "vis_layers",
                  "heads", "dim", "blocks", "temb_dim", "t_diff",
                  "use_context", "use_mask", "temporal", "streams"),
        "train": ("steps", "batch", "lr", "loss", "cond_dropout",
                  "freeze_backbone", "seed", "codec_steps"),
        "sample": ("ddim_steps", "cfg_scale", "sample_seed"),
    }

    @classmethod
    def from_ini(cls, path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ExperimentError(f"config file not found: {path}")
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for section, keys in cls._SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key in parser[section]:
                if key not in keys:
                    raise ExperimentError(f"unknown key [{section}] {key}")
                if key.endswith("_seeds"):
                    kwargs[key] = _parse_range(parser[section][key])
                elif types[key] == "int":
                    kwargs[key] = parser.getint(section, key)
                elif types[key] == "float":
                    kwargs[key] = parser.getfloat(section, key)
                elif types[key] == "bool":
                    kwargs[key] = parser.getboolean(section, key)
                else:
                    kwargs[key] = parser[section][key]
        return cls(**kwargs)

    @property
    def latent_size(self) -> int:
        return self.image_size // self.latent_patch

    @property
    def delta(self) -> float | None:
        return self.epipolar_delta if self.epipolar_delta > 0 else None

    def header_lines(self) -> list[str]:
        """Ablation-relevant settings recorded at the top of metric reports."""
        return [
            f"use_context={self.use_context}",
            f"use_mask={self.use_mask}",
            f"temporal={self.temporal}",
            f"streams={self.streams}",
            f"strategy={self.strategy}",
            f"context_n={self.context_n}",
            f"cfg_scale={self.cfg_scale}",
            f"ddim_steps={self.ddim_steps}",
            f"seed={self.seed}",
        ]

    def encoder_config(self) -> EncoderConfig:
        s = self.latent_size
        return EncoderConfig(
            latent_h=s, latent_w=s, latent_channels=self.latent_channels,
            frames=self.frames, vis_dim=self.vis_dim, vis_layers=self.vis_layers,
            vis_heads=self.heads, sem_dim=self.sem_dim, sem_queries=self.sem_queries,
            sem_layers=self.sem_layers, sem_heads=self.heads,
            sem_patch=self.image_size // 4, image_size=self.image_size,
            vocab_size=32, temb_dim=self.temb_dim)

    def denoiser_config(self) -> DenoiserConfig:
        s = self.latent_size
        return DenoiserConfig(
            frames=self.frames, latent_h=s, latent_w=s,
            channels=self.latent_channels, dim=self.dim, heads=self.heads,
            blocks=self.blocks, sem_dim=self.sem_dim)


def _stage(name):
    def deco(fn):
        def wrapped(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except ExperimentError:
                raise
            except Exception as exc:
                raise ExperimentError(f"stage {name!r} failed: {exc}") from exc
        wrapped.__name__ = fn.__name__
        wrapped.__doc__ = fn.__doc__
        return wrapped
    return deco


class Experiment:
    """Staged pipeline over one config; every stage writes into ``out_dir``."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.K = harness.default_intrinsics(cfg.image_size, cfg.image_size)
        self.codec: PatchCodec | None = None
        self.model: ContextDiffusionModel | None = None
        self.schedule = build_schedule(cfg.t_diff)

    # -- synth ---------------------------------------------------------------

    @_stage("synth")
    def synth(self) -> None:
        """Emit ground-truth clip frames (PPM) and pose files for eval scenes."""
        cfg = self.cfg
        for seed in cfg.eval_seeds:
            spec = self._clip_spec(seed)
            scene = harness.generate_scene(seed)
            poses = harness.trajectory_for_scene(spec)
            idx = spec.clip_indices()
            gt_dir = self.out / "gt" / str(seed)
            gt_dir.mkdir(parents=True, exist_ok=True)
            entries = []
            for k, i in enumerate(idx):
                frame = harness.render_view(scene, poses[i], self.K)
                harness.write_ppm(frame, gt_dir / f"frame{k:02d}.ppm")
                entries.append(PoseFileEntry(float(i), self.K, poses[i]))
            write_pose_file(self.out / "gt" / f"{seed}.poses.txt", entries)

    def _clip_spec(self, seed: int) -> harness.ClipSpec:
        cfg = self.cfg
        return harness.ClipSpec(
            scene_seed=seed, trajectory=cfg.trajectory, frames=cfg.frames,
            stride=cfg.stride, strategy=cfg.strategy, context_n=cfg.context_n,
            video_frames=cfg.video_frames)

    # -- codec ---------------------------------------------------------------

    @_stage("codec")
    def fit_codec(self) -> PatchCodec:
        """Train the patch codec on frames rendered from the training scenes."""
        cfg = self.cfg
        codec = PatchCodec(cfg.latent_patch, cfg.latent_channels,
                           rng=np.random.default_rng(cfg.seed))
        frames = []
        for seed in cfg.train_seeds[:12]:
            spec = self._clip_spec(seed)
            scene = harness.generate_scene(seed)
            poses = harness.trajectory_for_scene(spec)
            for i in spec.clip_indices()[::4]:
                frames.append(harness.render_view(scene, poses[i], self.K))
        codec.train(np.stack(frames), steps=cfg.codec_steps, seed=cfg.seed)
        save_checkpoint(self.out / "codec.ckpt", codec.state_dict())
        self.codec = codec
        return codec

    def load_codec(self) -> PatchCodec:
        cfg = self.cfg
        codec = PatchCodec(cfg.latent_patch, cfg.latent_channels)
        codec.load_state_dict(load_checkpoint(self.out / "codec.ckpt")[0])
        self.codec = codec
        return codec

    # -- train ---------------------------------------------------------------

    def build_model(self) -> ContextDiffusionModel:
        cfg = self.cfg
        rng = np.random.default_rng(cfg.seed)
        model = ContextDiffusionModel(
            ContextEncoder(cfg.encoder_config(), rng),
            Denoiser(cfg.denoiser_config(), rng),
            use_context=cfg.use_context, use_mask=cfg.use_mask,
            temporal=cfg.temporal, streams=cfg.streams)
        self.model = model
        return model

    @_stage("train")
    def fit_model(self) -> list[tuple]:
        cfg = self.cfg
        if self.codec is None:
            self.fit_codec()
        dataset = harness.build_dataset(
            cfg.train_seeds, self.codec, self.K, cfg.latent_size, cfg.latent_size,
            trajectory=cfg.trajectory, strategy=cfg.strategy,
            context_n=cfg.context_n, stride=cfg.stride, frames=cfg.frames,
            video_frames=cfg.video_frames, delta=cfg.delta,
            with_mask=cfg.use_mask)
        model = self.build_model()
        trace = train(model, dataset,
                      TrainConfig(steps=cfg.steps, batch=cfg.batch, lr=cfg.lr,
                                  loss=cfg.loss, cond_dropout=cfg.cond_dropout,
                                  freeze_backbone=cfg.freeze_backbone, seed=cfg.seed),
                      schedule=self.schedule,
                      trace_path=self.out / "train_trace.csv")
        save_checkpoint(self.out / "model.ckpt", model.state_dict())
        return trace

    def load_model(self) -> ContextDiffusionModel:
        model = self.build_model()
        model.load_state_dict(load_checkpoint(self.out / "model.ckpt")[0])
        return model

    # -- sample --------------------------------------------------------------

    @_stage("sample")
    def sample(self) -> dict[int, np.ndarray]:
        """DDIM-sample one clip per eval seed; frames land in out/gen/<seed>/."""
        cfg = self.cfg
        if self.codec is None:
            self.load_codec()
        if self.model is None:
            model = self.load_model()
        else:
            model = self.model
        videos = {}
        for seed in cfg.eval_seeds:
            spec = self._clip_spec(seed)
            sample, _, _ = harness.assemble_clip(
                spec, self.codec, self.K, cfg.latent_size, cfg.latent_size,
                delta=cfg.delta, with_mask=cfg.use_mask)
            cond = model.conditions(sample)
            uncond = model.conditions(sample, unconditional=True)

            def model_fn(x, t):
                return model.predict_cfg(x, t, cond, uncond, cfg.cfg_scale)

            z = ddim_sample(model_fn, sample.z0.shape, self.schedule,
                            cfg.ddim_steps, seed=cfg.sample_seed + seed)
            frames = np.clip(np.stack([self.codec.decode(zi) for zi in z]), 0.0, 1.0)
            gen_dir = self.out / "gen" / str(seed)
            gen_dir.mkdir(parents=True, exist_ok=True)
            for k, frame in enumerate(frames):
                harness.write_ppm(frame, gen_dir / f"frame{k:02d}.ppm")
            videos[seed] = frames
        return videos

    # -- eval ----------------------------------------------------------------

    @_stage("eval")
    def evaluate(self) -> dict[int, MetricReport]:
        """Compare out/gen against out/gt; one MetricReport CSV per eval seed."""
        cfg = self.cfg
        reports = {}
        rep_dir = self.out / "reports"
        rep_dir.mkdir(parents=True, exist_ok=True)
        for seed in cfg.eval_seeds:
            gt = self._read_video(self.out / "gt" / str(seed))
            gen = self._read_video(self.out / "gen" / str(seed))
            entries = read_pose_file(self.out / "gt" / f"{seed}.poses.txt",
                                     cfg.image_size, cfg.image_size)
            spec = self._clip_spec(seed)
            poses = harness.trajectory_for_scene(spec)
            ref = [poses[i] for i in spec.clip_indices()]
            tp = normalize_trajectory(TrajectoryPair([e.pose for e in entries], ref))
            report = MetricReport(
                mse_per_frame(gen * 255.0, gt * 255.0),
                ssim_per_frame(gen * 255.0, gt * 255.0),
                rot_err(tp), trans_err(tp), cam_mc(tp),
                header_lines=cfg.header_lines())
            report.write_csv(rep_dir / f"{seed}.csv")
            reports[seed] = report
        return reports

    def _read_video(self, directory: Path) -> np.ndarray:
        paths = sorted(Path(directory).glob("frame*.ppm"))
        if not paths:
            raise FileNotFoundError(f"no frames under {directory}")
        return np.stack([harness.read_ppm(p) for p in paths])

    # -- report --------------------------------------------------------------

    @_stage("report")
    def report(self) -> MetricReport:
        """Average the per-seed reports into out/reports/summary.csv."""
        rep_dir = self.out / "reports"
        paths = sorted(p for p in rep_dir.glob("*.csv") if p.name != "summary.csv")
        summary = merge_reports(paths)
        summary.write_csv(rep_dir / "summary.csv")
        return summary


def merge_reports(paths) -> MetricReport:
    """Mean of per-frame curves and trajectory scalars over several reports."""
    reports = [MetricReport.read_csv(p) for p in paths]
    if not reports:
        raise ExperimentError("no reports to merge")
    header = reports[0].header_lines + [f"merged={len(reports)}"]
    return MetricReport(
        np.mean([r.mse for r in reports], axis=0),
        np.mean([r.ssim for r in reports], axis=0),
        float(np.mean([r.rot_err for r in reports])),
        float(np.mean([r.trans_err for r in reports])),
        float(np.mean([r.cam_mc for r in reports])),
        header_lines=header)


def run_experiment(config, out_dir) -> MetricReport:
    """Full pipeline from an INI path or an ExperimentConfig."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_ini(config)
    exp = Experiment(cfg, out_dir)
    exp.synth()
    exp.fit_codec()
    exp.fit_model()
    exp.sample()
    exp.evaluate()
    return exp.report()
