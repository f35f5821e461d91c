"""Command-line pipeline: make-corpus, build-pretext, train-vae, train,
stylize, evaluate, plot, ablate. One JSON event per line on stderr; exit
code 0 only on full success.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .audio import Waveform, read_wav, write_wav
from .config import RunConfig, resolve_config, save_config
from .corpus import (
    Manifest,
    build_corpus,
    collect_mels,
    generate_scene,
    ingest_speech,
    load_clip,
    load_manifest,
    make_scene,
)
from .diffusion import TrainConfig, file_sha256, load_stylizer, train_diffusion
from .metrics import (
    EvalReport,
    SceneClassifier,
    evaluate_pair,
    scene_kl,
    train_scene_classifier,
)
from .pipeline import stylize_batch, stylize_waveform
from .pretext import PretextDataset, build_pretext_index
from .speech import generate_utterance
from .vae import VaeConfig, load_vae, train_vae

CFG_SWEEP_SCALES = (1.0, 2.5, 3.5, 4.5, 5.5, 6.5)


def emit(stage: str, event: str, **fields) -> None:
    print(json.dumps({"ts": round(time.time(), 3), "stage": stage, "event": event, **fields}),
          file=sys.stderr, flush=True)


def _speech_sources(cfg: RunConfig, speech_dir: str | None) -> list[Waveform]:
    if speech_dir:
        emit("make-corpus", "ingest_speech", dir=speech_dir)
        return ingest_speech(speech_dir)
    emit("make-corpus", "synth_speech", n=cfg.corpus_speech_files)
    rng = np.random.default_rng(cfg.stage_seed("speech"))
    return [
        generate_utterance(rng, rng.uniform(4.0, 8.0))
        for _ in range(cfg.corpus_speech_files)
    ]


def two_family_scenes(n_scenes: int, seed: int) -> tuple[list, dict]:
    """Controlled corpus: a dry/quiet family vs a reverberant/rainy family.

    Returns (scenes, stratified splits) with test scenes in both families.
    """
    rng = np.random.default_rng(seed)
    scenes, splits = [], {}
    half = max(2, n_scenes // 2)
    for fam, name in ((0, "dry"), (1, "rain")):
        for k in range(half):
            sid = f"{name}_{k:02d}"
            if fam == 0:
                scene = make_scene(
                    sid,
                    rt60=float(rng.uniform(0.04, 0.07)),
                    texture_class="none",
                    ambient_snr_db=20.0,
                    seed=int(rng.integers(1 << 31)),
                    direct_ratio=float(rng.uniform(0.85, 0.95)),
                )
            else:
                scene = make_scene(
                    sid,
                    rt60=float(rng.uniform(0.75, 0.85)),
                    texture_class="rain",
                    ambient_snr_db=float(rng.uniform(10.0, 14.0)),
                    seed=int(rng.integers(1 << 31)),
                    direct_ratio=float(rng.uniform(0.35, 0.5)),
                )
            scenes.append(scene)
            splits[sid] = "test" if k >= half - max(1, half // 4) else "train"
    return scenes, splits


def cmd_make_corpus(args) -> None:
    cfg = resolve_config(args.config, {
        "seed": args.seed, "corpus_scenes": args.scenes,
        "corpus_sessions_per_scene": args.sessions,
    })
    out = Path(args.out)
    sources = _speech_sources(cfg, args.speech)
    seed = cfg.stage_seed("corpus")
    if args.preset == "two-family":
        scenes, splits = two_family_scenes(cfg.corpus_scenes, seed)
    else:
        rng = np.random.default_rng(seed)
        scenes = [generate_scene(int(rng.integers(1 << 31))) for _ in range(cfg.corpus_scenes)]
        splits = None
    emit("make-corpus", "render_start", scenes=len(scenes), out=str(out))
    manifest = build_corpus(
        out, scenes, sources, seed,
        sessions_per_scene=cfg.corpus_sessions_per_scene,
        session_seconds=cfg.corpus_session_seconds,
        test_fraction=cfg.corpus_test_fraction,
        scene_splits=splits,
    )
    save_config(out, cfg, {"command": "make-corpus", "preset": args.preset})
    emit("make-corpus", "done", clips=len(manifest.clips))


def cmd_build_pretext(args) -> None:
    cfg = resolve_config(args.config, {
        "seed": args.seed, "input_sigma": args.sigma, "drop_rate": args.drop_rate,
    })
    emit("build-pretext", "start", corpus=args.corpus)
    index = build_pretext_index(
        args.corpus, args.out,
        sigma=cfg.input_sigma, drop_rate=cfg.drop_rate,
        seed=cfg.stage_seed("pretext"),
    )
    save_config(args.out, cfg, {"command": "build-pretext"})
    emit("build-pretext", "done",
         sessions=len(index["sessions"]), skipped=index["skipped_sessions"])


def cmd_train_vae(args) -> None:
    cfg = resolve_config(args.config, {
        "seed": args.seed, "vae_epochs": args.epochs, "vae_batch": args.batch,
    })
    corpus_dir = Path(args.corpus)
    manifest = load_manifest(corpus_dir / "manifest.jsonl")
    emit("train-vae", "collect_mels", corpus=args.corpus)
    mels, _ = collect_mels(corpus_dir, manifest, split="train",
                           seed=cfg.stage_seed("vae-data"))
    emit("train-vae", "train_start", mels=len(mels), epochs=cfg.vae_epochs)
    _, history = train_vae(
        mels, args.out,
        VaeConfig(width=cfg.vae_width, beta_kl=cfg.vae_beta_kl),
        epochs=cfg.vae_epochs, batch_size=cfg.vae_batch, lr=cfg.vae_lr,
        seed=cfg.stage_seed("vae"),
    )
    save_config(Path(args.out).parent, cfg, {"command": "train-vae"})
    emit("train-vae", "done", holdout_mae=history["holdout_mae"][-1])


def cmd_train(args) -> None:
    cfg = resolve_config(args.config, {
        "seed": args.seed, "guidance": getattr(args, "lambda"),
        "train_epochs": args.epochs, "train_batch": args.batch,
        "train_steps_per_epoch": args.steps_per_epoch,
    })
    dataset = PretextDataset(args.pretext)
    vae, _ = load_vae(args.vae)
    emit("train", "start", examples=len(dataset), epochs=cfg.train_epochs)
    _, _, history = train_diffusion(
        dataset, vae, file_sha256(args.vae), args.out,
        TrainConfig(
            epochs=cfg.train_epochs,
            steps_per_epoch=cfg.train_steps_per_epoch,
            batch_size=cfg.train_batch,
            lr=cfg.train_lr,
            guidance=cfg.guidance,
            n_steps=cfg.diffusion_steps,
            beta_start=cfg.beta_start,
            beta_end=cfg.beta_end,
            n_sample_steps=cfg.sample_steps,
        ),
        seed=cfg.stage_seed("train"),
        resume_from=args.resume,
    )
    save_config(Path(args.out).parent, cfg, {"command": "train"})
    emit("train", "done", final_loss=history["epoch_mean_loss"][-1])


def cmd_stylize(args) -> None:
    cfg = resolve_config(args.config, {"seed": args.seed})
    bundle = load_stylizer(args.ckpt, vae_path=args.vae)
    vae, _ = load_vae(args.vae)
    input_wf = read_wav(args.input)
    cond_audio = read_wav(args.cond_audio) if args.cond_audio else None
    cond_desc = None
    if args.cond_desc:
        with open(args.cond_desc, "r", encoding="utf-8") as fh:
            cond_desc = np.asarray(json.load(fh), dtype=np.float64)
    lam = getattr(args, "lambda")
    emit("stylize", "start", input=args.input,
         lam=lam if lam is not None else bundle.guidance)
    out = stylize_waveform(
        input_wf, bundle, vae,
        cond_audio=cond_audio, cond_descriptor=cond_desc,
        lam=lam, seed=cfg.stage_seed("sample"),
        phase_iterations=cfg.phase_iterations,
    )
    write_wav(args.out, out)
    sidecar = {
        "input": str(args.input), "cond_audio": args.cond_audio,
        "cond_desc": args.cond_desc, "ckpt": str(args.ckpt), "vae": str(args.vae),
        "lambda": lam if lam is not None else bundle.guidance,
        "seed": cfg.stage_seed("sample"), "root_seed": cfg.seed,
    }
    with open(str(args.out) + ".json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
    emit("stylize", "done", out=str(args.out))


def _load_classifier(args, manifest: Manifest | None = None) -> SceneClassifier:
    if args.classifier and Path(args.classifier).exists():
        payload = torch.load(args.classifier, map_location="cpu", weights_only=False)
        clf = SceneClassifier()
        clf.load_state_dict(payload["state_dict"])
        clf.eval()
        return clf
    if not args.corpus:
        raise ValueError("need --classifier FILE or --corpus DIR to train one")
    corpus_dir = Path(args.corpus)
    manifest = manifest or load_manifest(corpus_dir / "manifest.jsonl")
    cache = corpus_dir / "scene_classifier.pt"
    if cache.exists():
        payload = torch.load(cache, map_location="cpu", weights_only=False)
        clf = SceneClassifier()
        clf.load_state_dict(payload["state_dict"])
        clf.eval()
        return clf
    emit("evaluate", "train_classifier", corpus=str(corpus_dir))
    mels, labels = collect_mels(corpus_dir, manifest, split="train",
                                include_clean_fraction=0.0)
    clf, acc = train_scene_classifier(mels, labels)
    torch.save({"state_dict": clf.state_dict(), "holdout_accuracy": acc}, cache)
    emit("evaluate", "classifier_ready", accuracy=acc)
    return clf


def _paired_wavs(gen_dir: str, ref_dir: str) -> list[tuple[str, Waveform, Waveform]]:
    gen_dir, ref_dir = Path(gen_dir), Path(ref_dir)
    pairs = []
    for gen_path in sorted(gen_dir.glob("*.wav")):
        ref_path = ref_dir / gen_path.name
        if ref_path.exists():
            pairs.append((gen_path.stem, read_wav(gen_path), read_wav(ref_path)))
    if not pairs:
        raise ValueError(f"no filename-matched WAV pairs between {gen_dir} and {ref_dir}")
    return pairs


def cmd_evaluate(args) -> None:
    classifier = _load_classifier(args)
    pairs = _paired_wavs(args.gen, args.ref)
    emit("evaluate", "start", pairs=len(pairs))
    report = EvalReport()
    for clip_id, gen, ref in pairs:
        rec = evaluate_pair(gen, ref)
        rec["kl"] = scene_kl([gen], [ref], classifier)
        report.add(clip_id, **rec)
    report.write(args.report)
    emit("evaluate", "done", report=str(args.report),
         **{k: v["mean"] for k, v in report.aggregate().items()
            if isinstance(v, dict) and "mean" in v})


def cmd_plot(args) -> None:
    from .plots import plot_decay_curves, plot_spectrogram_pair

    pairs = _paired_wavs(args.gen, args.ref)[: args.max_pairs]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for clip_id, gen, ref in pairs:
        plot_decay_curves({"generated": gen, "reference": ref},
                          out_dir / f"{clip_id}_decay.png")
        plot_spectrogram_pair(gen, ref, out_dir / f"{clip_id}_mel.png")
    emit("plot", "done", figures=2 * len(pairs), out=str(out_dir))


# --- ablation suites ---------------------------------------------------------


def build_eval_set(
    corpus_dir: Path, manifest: Manifest, n_clips: int, seed: int
) -> list[dict]:
    """Held-out evaluation tuples from test-split scenes.

    Each entry pairs a clip's clean stem (stylize input) with a different
    clip of the same session as conditioning and the original mixture as
    the reference, mirroring the pretext task at test time.
    """
    rng = np.random.default_rng(seed)
    from .pretext import vad_gate

    by_session: dict[str, list[dict]] = {}
    for rec in manifest.clip_records("test"):
        by_session.setdefault(rec["session_id"], []).append(rec)
    entries = []
    session_ids = sorted(by_session)
    rng.shuffle(session_ids)
    for session_id in session_ids:
        recs = [r for r in by_session[session_id]
                if vad_gate(load_clip(corpus_dir, r))]
        if len(recs) < 2:
            continue
        order = rng.permutation(len(recs))
        for k in range(0, len(order) - 1, 2):
            target = recs[int(order[k])]
            cond = recs[int(order[k + 1])]
            entries.append({"target": target, "cond": cond,
                            "scene_id": target["scene_id"]})
            if len(entries) >= n_clips:
                return entries
    return entries


def _eval_outputs(
    outputs: list[Waveform],
    refs: list[Waveform],
    classifier: SceneClassifier,
) -> dict:
    report = EvalReport()
    for i, (gen, ref) in enumerate(zip(outputs, refs)):
        rec = evaluate_pair(gen, ref)
        rec["kl"] = scene_kl([gen], [ref], classifier)
        report.add(f"clip{i:03d}", **rec)
    return report.aggregate()


def run_ablation(
    corpus_dir: Path,
    ckpt: Path,
    vae_path: Path,
    out_dir: Path,
    suite: str = "conditioning",
    n_clips: int = 32,
    seed: int = 0,
    variant_ckpts: dict | None = None,
) -> dict:
    """Evaluate checkpoint variants sharing one held-out set.

    Suites: 'cfg_sweep' (guidance scales), 'conditioning' (full, no-CFG,
    no-conditioning, random-conditioning). Variants that need retraining
    (clean-input, loudness-norm conditioning) run only when a checkpoint is
    supplied; otherwise they are reported as not run.
    """
    manifest = load_manifest(corpus_dir / "manifest.jsonl")
    bundle = load_stylizer(ckpt, vae_path=vae_path)
    vae, _ = load_vae(vae_path)
    classifier_args = argparse.Namespace(classifier=None, corpus=str(corpus_dir))
    classifier = _load_classifier(classifier_args, manifest)

    entries = build_eval_set(corpus_dir, manifest, n_clips, seed)
    if not entries:
        raise ValueError("no eligible held-out clips for ablation")
    inputs, conds, descs, refs = [], [], [], []
    for e in entries:
        target_clip = load_clip(corpus_dir, e["target"])
        cond_clip = load_clip(corpus_dir, e["cond"])
        inputs.append(target_clip.components["speech_clean"])
        conds.append(cond_clip.waveform)
        descs.append(manifest.scenes[e["scene_id"]].descriptor)
        refs.append(target_clip.waveform)

    def stylize_variant(lam, cond_list, desc_list, unconditional=False):
        return stylize_batch(
            inputs, bundle, vae,
            cond_audios=cond_list, cond_descriptors=desc_list,
            lam=lam, seed=seed, unconditional=unconditional,
        )

    rows = {}
    if suite == "cfg_sweep":
        for lam in CFG_SWEEP_SCALES:
            emit("ablate", "run", variant=f"lambda={lam}")
            rows[f"lambda={lam}"] = _eval_outputs(
                stylize_variant(lam, conds, descs), refs, classifier
            )
    elif suite == "conditioning":
        emit("ablate", "run", variant="full")
        rows["full"] = _eval_outputs(stylize_variant(None, conds, descs), refs, classifier)
        emit("ablate", "run", variant="no_cfg")
        rows["no_cfg"] = _eval_outputs(stylize_variant(1.0, conds, descs), refs, classifier)
        emit("ablate", "run", variant="random_cond")
        rng = np.random.default_rng(seed + 1)
        shuffle = rng.permutation(len(conds))
        shuffle = np.roll(np.arange(len(conds)), 1) if np.all(shuffle == np.arange(len(conds))) else shuffle
        rows["random_cond"] = _eval_outputs(
            stylize_variant(None, [conds[i] for i in shuffle], [descs[i] for i in shuffle]),
            refs, classifier,
        )
        emit("ablate", "run", variant="no_cond")
        rows["no_cond"] = _eval_outputs(
            stylize_variant(None, None, None, unconditional=True), refs, classifier
        )
        for name in ("clean_input", "loudness_norm_cond"):
            variant_path = (variant_ckpts or {}).get(name)
            if variant_path is None:
                rows[name] = {"status": "not run (requires a retrained variant checkpoint)"}
                continue
            vb = load_stylizer(variant_path, vae_path=vae_path)
            emit("ablate", "run", variant=name)
            outs = stylize_batch(inputs, vb, vae, cond_audios=conds,
                                 cond_descriptors=descs, lam=None, seed=seed)
            rows[name] = _eval_outputs(outs, refs, classifier)
    else:
        raise ValueError(f"unknown suite {suite!r} (use cfg_sweep or conditioning)")

    out_dir.mkdir(parents=True, exist_ok=True)
    result = {"suite": suite, "n_clips": len(inputs), "seed": seed, "rows": rows}
    with (out_dir / f"ablation_{suite}.json").open("w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=1)
    _write_ablation_table(result, out_dir / f"ablation_{suite}.txt")
    return result


def _write_ablation_table(result: dict, path: Path) -> None:
    metrics = ("rte", "mel_mse", "ms_snr_db", "ambient_distance", "kl")
    lines = [f"suite: {result['suite']}  (n={result['n_clips']})"]
    header = f"{'variant':24s}" + "".join(f"{m:>18s}" for m in metrics)
    lines.append(header)
    for name, row in result["rows"].items():
        if "status" in row:
            lines.append(f"{name:24s}  {row['status']}")
            continue
        cells = []
        for m in metrics:
            v = row.get(m)
            cells.append(f"{v['mean']:>18.4f}" if isinstance(v, dict) else f"{'n/a':>18s}")
        lines.append(f"{name:24s}" + "".join(cells))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_ablate(args) -> None:
    variant_ckpts = {}
    for spec in args.variant_ckpt or []:
        name, _, path = spec.partition("=")
        variant_ckpts[name] = path
    cfg = resolve_config(args.config, {"seed": args.seed})
    result = run_ablation(
        Path(args.corpus), Path(args.ckpt), Path(args.vae), Path(args.out),
        suite=args.suite, n_clips=args.eval_clips,
        seed=cfg.stage_seed("ablate"), variant_ckpts=variant_ckpts,
    )
    save_config(args.out, cfg, {"command": "ablate", "suite": args.suite})
    emit("ablate", "done", suite=args.suite, variants=len(result["rows"]))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="soundscaper",
                                description="Scene-conditioned speech restyling pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--seed", type=int, default=None, help="root seed")

    sp = sub.add_parser("make-corpus", help="render a synthetic scene corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=None)
    sp.add_argument("--sessions", type=int, default=None)
    sp.add_argument("--speech", default=None, help="directory of clean speech WAVs")
    sp.add_argument("--preset", choices=("random", "two-family"), default="random")
    common(sp)
    sp.set_defaults(func=cmd_make_corpus)

    sp = sub.add_parser("build-pretext", help="gate clips and index training pairs")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--sigma", type=float, default=None)
    sp.add_argument("--drop-rate", type=float, default=None)
    common(sp)
    sp.set_defaults(func=cmd_build_pretext)

    sp = sub.add_parser("train-vae", help="train the mel autoencoder")
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_train_vae)

    sp = sub.add_parser("train", help="train the conditional diffusion model")
    sp.add_argument("--pretext", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--lambda", type=float, default=None, help="guidance scale")
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--steps-per-epoch", type=int, default=None)
    sp.add_argument("--batch", type=int, default=None)
    sp.add_argument("--resume", default=None, help="checkpoint to resume from")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("stylize", help="restyle one clip")
    sp.add_argument("--input", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--cond-audio", default=None)
    sp.add_argument("--cond-desc", default=None, help="JSON file with the descriptor vector")
    sp.add_argument("--lambda", type=float, default=None)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_stylize)

    sp = sub.add_parser("evaluate", help="pairwise metrics between two WAV directories")
    sp.add_argument("--gen", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--classifier", default=None)
    sp.add_argument("--corpus", default=None, help="corpus used to train/cache the classifier")
    common(sp)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("plot", help="decay-curve and spectrogram comparison images")
    sp.add_argument("--gen", required=True)
    sp.add_argument("--ref", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--max-pairs", type=int, default=8)
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("ablate", help="run an ablation suite")
    sp.add_argument("--suite", required=True, choices=("cfg_sweep", "conditioning"))
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--vae", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--eval-clips", type=int, default=32)
    sp.add_argument("--variant-ckpt", action="append", default=None,
                    metavar="NAME=PATH", help="checkpoint for a retrained variant")
    common(sp)
    sp.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:
        emit(args.command, "error", error=f"{type(exc).__name__}: {exc}")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
