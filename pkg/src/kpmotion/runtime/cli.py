"""Command line entry point.

Every subcommand takes ``--config FILE`` (``key=value`` lines) and ``--seed``;
flags override file values. Artifacts carry ``version``, ``seed`` and
``config_hash`` so each one can be regenerated from its own header.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from kpmotion import __version__, audiofeat, motiongen, stage1
from kpmotion.kpspace import read_kp, unpack_sequence, write_kp
from kpmotion.motiongen import EmotionDescriptor, emotion_descriptor
from kpmotion.rng import derive_seed
from kpmotion.runtime import evaluate, gradsuite
from kpmotion.runtime import stream as streaming
from kpmotion.runtime.config import POSE_SOURCES, UNDERRUN_POLICIES, PipelineConfig
from kpmotion.synthrig import Rig, RigConfig, load_episode

log = logging.getLogger("kpmotion")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- provenance ------------------------------------------------------------------

def run_hash(cfg: PipelineConfig, **extra) -> str:
    items = {k: v for k, v in asdict(cfg).items() if k != "output"}
    items.update(extra)
    return motiongen.config_hash(items)


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def provenance(cfg: PipelineConfig, **extra) -> dict[str, object]:
    return {"version": __version__, "seed": cfg.seed, "config_hash": run_hash(cfg, **extra)}


def _write_text(path: str | Path | None, text: str) -> None:
    sys.stdout.write(text)
    if path:
        Path(path).write_text(text)


def _header(meta: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in meta.items())


# -- emotion and pose inputs --------------------------------------------------------

def write_emotion(path: str | Path, descriptor: EmotionDescriptor, **meta) -> None:
    write_kp(path, descriptor.vector[None], descriptor.K, kind="emotion", **meta)


def read_emotion(path: str | Path) -> EmotionDescriptor:
    data, _ = read_kp(path)
    return EmotionDescriptor(data[0])


def load_emotion(cfg: PipelineConfig) -> EmotionDescriptor | None:
    if cfg.emotion_source == "descriptor":
        return read_emotion(cfg.emotion_path)
    if cfg.emotion_source == "episode":
        ep = load_episode(cfg.emotion_path)
        return emotion_descriptor(ep.expression, center=ep.T // 2)
    return None


def load_pose(cfg: PipelineConfig) -> np.ndarray | None:
    if cfg.pose_source != "file":
        return None
    data, _ = read_kp(cfg.pose_path)
    return unpack_sequence(data)[0]


# -- subcommands -----------------------------------------------------------------

def cmd_rig_gen(args, cfg: PipelineConfig) -> int:
    cfg.validate("output")
    extra = {"identities": args.identities, "episodes": args.episodes, "frames": args.frames,
             "speech": args.speech}
    meta = provenance(cfg, **extra)
    rig = Rig.build(args.identities, args.episodes, args.frames, cfg.seed,
                    RigConfig(K=cfg.K), speech=args.speech)
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    for i, row in enumerate(rig.episodes):
        for e, ep in enumerate(row):
            d = out / f"id{i:03d}_ep{e:02d}"
            ep.save(d, **meta)
            if ep.pcm is not None:
                audiofeat.write_wav(d / "audio.wav", ep.pcm)
    (out / "rig.meta").write_text(_header({**meta, **extra, "K": cfg.K}))
    print(f"rig.episodes={sum(len(r) for r in rig.episodes)}")
    return EXIT_OK


def cmd_train_stage1(args, cfg: PipelineConfig) -> int:
    cfg.validate("output")
    tc = stage1.TrainConfig(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
                            clip_norm=args.clip_norm, use_canonical=cfg.use_canonical,
                            use_landmark=cfg.use_landmark, seed=cfg.seed, K=cfg.K,
                            hidden=cfg.hidden, n_identities=args.identities)
    meta = provenance(cfg, clip_norm=args.clip_norm, identities=args.identities)

    def report(step, parts):
        if (step + 1) % args.log_every == 0:
            log.info("step %d total=%.6g", step + 1, parts["total"])

    model, history = stage1.train(tc, callback=report)
    stage1.save_model(model, cfg.output, **meta)
    print(f"train.final_loss={history[-1]['total']:.9g}")
    return EXIT_OK


def cmd_train_stage2(args, cfg: PipelineConfig) -> int:
    cfg.validate("output")
    sc = motiongen.Stage2Config(steps=cfg.steps, batch_size=cfg.batch_size, lr=cfg.lr,
                                seed=cfg.seed, profile=cfg.profile)
    extra = {"identities": args.identities, "episodes": args.episodes, "frames": args.frames}
    meta = provenance(cfg, **extra)
    rig = Rig.build(args.identities, args.episodes, args.frames,
                    derive_seed(cfg.seed, "stage2-rig"), RigConfig(K=cfg.K), speech=True)
    data = motiongen.MotionDataset.from_rig(rig)

    def report(step, loss):
        if (step + 1) % args.log_every == 0:
            log.info("step %d loss=%.6g", step + 1, loss)

    model, history = motiongen.train(sc, data, callback=report)
    model.save(cfg.output, profile=cfg.profile, **meta)
    print(f"train.final_loss={history[-1]:.9g}")
    return EXIT_OK


def _sequence_meta(cfg: PipelineConfig, audio: str | None, **extra) -> dict:
    if audio:
        extra["audio_sha"] = file_digest(audio)
    for name in ("stage2_ckpt", "emotion_path", "pose_path"):
        path = getattr(cfg, name)
        if path:
            extra[name + "_sha"] = file_digest(path)
    return provenance(cfg, **extra)


def cmd_generate(args, cfg: PipelineConfig) -> int:
    cfg.validate("stage2_ckpt", "output")
    model = motiongen.DenoiserModel.load(cfg.stage2_ckpt)
    pcm = audiofeat.read_wav(args.audio)
    seq = motiongen.generate(model, pcm, emotion=load_emotion(cfg), seed=cfg.seed,
                             n_steps=cfg.ddim_steps, eta=cfg.eta, pose=load_pose(cfg))
    seq.save(cfg.output, **_sequence_meta(cfg, args.audio))
    print(f"generate.frames={seq.T}")
    return EXIT_OK


def cmd_stream(args, cfg: PipelineConfig) -> int:
    cfg.validate("stage2_ckpt", "output")
    if bool(args.audio) == (args.synthetic is not None):
        raise UsageError("stream needs exactly one of --audio or --synthetic")
    model = motiongen.DenoiserModel.load(cfg.stage2_ckpt)
    source = (streaming.PcmSource(audiofeat.read_wav(args.audio)) if args.audio
              else streaming.SyntheticSource(args.synthetic, seed=cfg.seed))
    res = streaming.stream(model, source, emotion=load_emotion(cfg), seed=cfg.seed,
                           n_steps=cfg.ddim_steps, eta=cfg.eta, policy=cfg.underrun_policy,
                           prebuffer_s=cfg.prebuffer_s, queue_frames=cfg.queue_frames,
                           paced_input=args.live, paced_output=cfg.paced,
                           pose=load_pose(cfg))
    meta = _sequence_meta(cfg, args.audio, synthetic=args.synthetic, live=args.live)
    motiongen.MotionSequence(res.frames).save(cfg.output, **meta)
    report = res.report()
    sys.stdout.write(report.to_text(**meta, dropped=res.dropped, frozen=res.frozen))
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    cfg.validate()
    if cfg.stage2_ckpt:
        model = motiongen.DenoiserModel.load(cfg.stage2_ckpt)
    else:
        base, _ = motiongen.PROFILES[cfg.profile]
        model = motiongen.DenoiserModel(replace(base, K=cfg.K), seed=cfg.seed)
    report = streaming.bench(model, cfg.bench_frames, seed=cfg.seed, n_steps=cfg.ddim_steps,
                             queue_frames=cfg.queue_frames)
    _write_text(cfg.output, report.to_text(**provenance(cfg)))
    return EXIT_OK


def cmd_grad_check(args, cfg: PipelineConfig) -> int:
    targets = None if args.target == "all" else [args.target]
    results = gradsuite.run(targets, args.points, cfg.seed)
    text = "".join(r.to_text() for r in results)
    text += "".join(f"grad.{r.target}.passed={r.passed}\n" for r in results)
    _write_text(cfg.output, text + _header({f"grad.{k}": v for k, v in provenance(
        cfg, points=args.points, target=args.target).items()}))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_eval(args, cfg: PipelineConfig) -> int:
    cfg.validate()
    if not (cfg.stage1_ckpt or cfg.stage2_ckpt):
        raise UsageError("eval needs --stage1 and/or --stage2")
    extra = {"n": args.n, "identities": args.identities}
    for name in ("stage1_ckpt", "stage2_ckpt"):
        if getattr(cfg, name):
            extra[name + "_sha"] = file_digest(getattr(cfg, name))
    table: dict[str, float] = {}
    if cfg.stage1_ckpt:
        model = stage1.load_model(cfg.stage1_ckpt)
        rig = Rig.build(args.identities, 2, 50, derive_seed(cfg.seed, "eval-rig"),
                        RigConfig(K=model.K))
        table.update(evaluate.eval_reenactment(
            model, rig, args.n, stage1.subtle_rig(derive_seed(cfg.seed, "eval-subtle"),
                                                  K=model.K), seed=cfg.seed))
    if cfg.stage2_ckpt:
        model2 = motiongen.DenoiserModel.load(cfg.stage2_ckpt)
        rig = Rig.build(args.clips, 1, 250, derive_seed(cfg.seed, "eval-speech"),
                        RigConfig(K=model2.config.K), speech=True)
        rs, shuffled = [], []
        for j, ep in enumerate(rig.all_episodes()):
            seq = motiongen.generate(model2, ep.pcm, seed=cfg.seed, n_steps=cfg.ddim_steps)
            canon = ep.identity.canonical.points
            rs.append(evaluate.eval_sync(seq, ep.pcm, canon).r)
            shuffled.append(evaluate.shuffled_sync(seq, ep.pcm, canon,
                                                   derive_seed(cfg.seed, "shuffle", j)).r)
        table["sync_r"] = float(np.median(rs))
        table["sync_shuffled_r"] = float(np.median(shuffled))
    _write_text(cfg.output, evaluate.format_table(table, **provenance(cfg, **extra)))
    return EXIT_OK


# -- parser ----------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--seed", type=int, help="seed controlling all randomness")
    p.add_argument("--out", dest="output", help="output path")


def _training(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--log-every", type=int, default=500)


def _generation(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ckpt", dest="stage2_ckpt", help="stage-2 checkpoint")
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--emotion", dest="emotion_path", help="emotion descriptor .kp file")
    p.add_argument("--emotion-episode", help="rig episode directory to take emotion from")
    p.add_argument("--pose", dest="pose_path", help="latent .kp file supplying head pose")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kpmotion", description="Keypoint motion pipeline.")
    parser.add_argument("--version", action="version", version=f"kpmotion {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("rig-gen", help="write a synthetic rig")
    _common(p)
    p.add_argument("--identities", type=int, default=4)
    p.add_argument("--episodes", type=int, default=2)
    p.add_argument("--frames", type=int, default=250)
    p.add_argument("--speech", action="store_true", help="audio-driven episodes")
    p.set_defaults(func=cmd_rig_gen)

    p = sub.add_parser("train-stage1", help="train the keypoint decomposer")
    _common(p)
    _training(p)
    p.add_argument("--hidden", type=int)
    p.add_argument("--identities", type=int, default=stage1.TrainConfig.n_identities)
    p.add_argument("--clip-norm", type=float, default=stage1.TrainConfig.clip_norm)
    p.add_argument("--no-canonical", dest="use_canonical", action="store_const", const=False)
    p.add_argument("--no-landmark", dest="use_landmark", action="store_const", const=False)
    p.set_defaults(func=cmd_train_stage1, config_defaults={
        "lr": stage1.TrainConfig.lr, "batch_size": stage1.TrainConfig.batch_size,
        "hidden": stage1.TrainConfig.hidden})

    p = sub.add_parser("train-stage2", help="train the motion diffusion model")
    _common(p)
    _training(p)
    p.add_argument("--profile", choices=sorted(motiongen.PROFILES))
    p.add_argument("--identities", type=int, default=16)
    p.add_argument("--episodes", type=int, default=2)
    p.add_argument("--frames", type=int, default=250)
    p.set_defaults(func=cmd_train_stage2, config_defaults={
        "lr": motiongen.Stage2Config.lr, "batch_size": motiongen.Stage2Config.batch_size})

    p = sub.add_parser("generate", help="motion latents for an audio file")
    _common(p)
    _generation(p)
    p.add_argument("--audio", required=True, help="16 kHz mono wav")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stream", help="run the paced streaming pipeline")
    _common(p)
    _generation(p)
    p.add_argument("--audio", help="16 kHz mono wav")
    p.add_argument("--synthetic", type=float, help="seconds of synthetic speech")
    p.add_argument("--live", action="store_true", help="feed audio at real time")
    p.add_argument("--policy", dest="underrun_policy", choices=UNDERRUN_POLICIES)
    p.add_argument("--prebuffer", dest="prebuffer_s", type=float)
    p.add_argument("--queue-frames", dest="queue_frames", type=int)
    p.add_argument("--unpaced", dest="paced", action="store_const", const=False)
    p.set_defaults(func=cmd_stream)

    p = sub.add_parser("bench", help="unpaced throughput benchmark")
    _common(p)
    p.add_argument("--ckpt", dest="stage2_ckpt", help="stage-2 checkpoint (default: fresh model)")
    p.add_argument("--profile", choices=sorted(motiongen.PROFILES))
    p.add_argument("--frames", dest="bench_frames", type=int)
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int)
    p.add_argument("--queue-frames", dest="queue_frames", type=int)
    p.set_defaults(func=cmd_bench, config_defaults={"profile": "rt", "ddim_steps": 10})

    p = sub.add_parser("grad-check", help="finite-difference gradient suite")
    _common(p)
    p.add_argument("--target", default="all", choices=["all", *gradsuite.TARGETS])
    p.add_argument("--points", type=int, default=20)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("eval", help="reenactment and lip-sync metrics")
    _common(p)
    p.add_argument("--stage1", dest="stage1_ckpt", help="stage-1 checkpoint")
    p.add_argument("--stage2", dest="stage2_ckpt", help="stage-2 checkpoint")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--identities", type=int, default=40)
    p.add_argument("--clips", type=int, default=5)
    p.add_argument("--ddim-steps", dest="ddim_steps", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


_CONFIG_KEYS = set(PipelineConfig.__dataclass_fields__)


def make_config(args) -> PipelineConfig:
    overrides = {k: v for k, v in vars(args).items() if k in _CONFIG_KEYS}
    if getattr(args, "emotion_episode", None):
        if overrides.get("emotion_path"):
            raise UsageError("--emotion and --emotion-episode are exclusive")
        overrides["emotion_path"] = args.emotion_episode
        overrides["emotion_source"] = "episode"
    elif overrides.get("emotion_path"):
        overrides["emotion_source"] = "descriptor"
    if overrides.get("pose_path"):
        overrides["pose_source"] = POSE_SOURCES[1]
    defaults = getattr(args, "config_defaults", {})
    file_values = PipelineConfig.parse(Path(args.config).read_text()) if args.config else {}
    merged = {**defaults, **file_values}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**merged)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help and --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = make_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"kpmotion {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # reported, not raised, so scripts see exit code 1
        log.debug("failure", exc_info=True)
        print(f"kpmotion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
