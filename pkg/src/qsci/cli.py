"""Command-line entry points for reproducible desk-scale experiments.

Commands: gen-data, train, eval, ablate, pack, infer-int, report, bench.
Every command is deterministic given its config and seeds; binary outputs
round-trip bit-exactly and CSV outputs are byte-identical across reruns.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .containers import ExperimentConfig, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, QsciError
from .evaluation import count_efficiency, psnr, ssim
from .network import QNet, QNetConfig, make_variant, parse_fingerprint
from .packed import infer_packed, kernel_bench, pack_model, read_packed, write_packed
from .sci import MaskSet, Measurement, VideoClip, encode, generate_masks, synth_video
from .training import (Dataset, TrainConfig, evaluate_psnr, make_synth_dataset, train)

# seed offsets shared with training.make_synth_dataset
MASK_SEED_OFFSET = 99_000
HOLDOUT_SEED_OFFSET = 50_000


def worker_count() -> int:
    """Worker cap from QSCI_THREADS (default 1: fully serial runs)."""
    try:
        return max(1, int(os.environ.get("QSCI_THREADS", "1")))
    except ValueError:
        return 1


def _resolve(workdir: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else workdir / path


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _write_pgm(path: Path, frame: np.ndarray):
    """8-bit binary PGM, values scaled from [0,1]."""
    h, w = frame.shape
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def _net_config(cfg: ExperimentConfig) -> QNetConfig:
    return make_variant(
        cfg.net_variant,
        base_channels=cfg.net_base_channels,
        resdnet_blocks=cfg.net_resdnet_blocks,
        cformer_per_block=cfg.net_cformer_per_block,
        heads=cfg.net_heads,
        cr=cfg.net_cr,
    )


def _train_config(cfg: ExperimentConfig) -> TrainConfig:
    return TrainConfig(
        lr_phase1=cfg.train_lr_phase1,
        lr_phase2=cfg.train_lr_phase2,
        epochs_phase1=cfg.train_epochs_phase1,
        epochs_phase2=cfg.train_epochs_phase2,
        batch_size=cfg.train_batch_size,
        crop=cfg.train_crop,
        aug_crop=cfg.train_aug_crop,
        aug_flip=cfg.train_aug_flip,
        aug_scale=cfg.train_aug_scale,
        noise_sigma=cfg.data_noise_sigma,
        seed=cfg.train_seed,
    )


def _dataset(cfg: ExperimentConfig) -> Dataset:
    return make_synth_dataset(cfg.data_seed, cfg.data_count, cfg.data_holdout,
                              cfg.net_cr, cfg.data_clip_hw, cfg.train_crop,
                              cfg.data_mask_p)


def _write_loss_csv(path: Path, curve):
    lines = ["epoch,phase,lr,train_loss,val_psnr"]
    for row in curve:
        lines.append(f"{row['epoch']},{row['phase']},{row['lr']:.8g},"
                     f"{row['train_loss']:.8f},{row['val_psnr']:.6f}")
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args, workdir: Path) -> int:
    out = _resolve(workdir, args.out)
    out.mkdir(parents=True, exist_ok=True)
    mask_seed = args.mask_seed if args.mask_seed is not None else args.seed + MASK_SEED_OFFSET
    masks = generate_masks(mask_seed, args.T, args.H, args.W, args.p)
    np.save(out / "masks.npy", masks.masks)
    rows = ["index,clip,measurement,clip_sha256,meas_sha256"]
    for i in range(args.count):
        clip = synth_video(args.seed + i, args.T, args.H, args.W)
        meas = encode(clip, masks, args.noise_sigma, noise_seed=args.seed + i)
        clip_path = out / f"clip_{i:04d}.npy"
        meas_path = out / f"meas_{i:04d}.npy"
        np.save(clip_path, clip.frames)
        np.save(meas_path, meas.y)
        rows.append(f"{i},{clip_path.name},{meas_path.name},"
                    f"{_sha256(clip_path)},{_sha256(meas_path)}")
    (out / "manifest.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
    print(f"wrote {args.count} clips to {out}")
    return 0


def _load_data_dir(path: Path):
    manifest = path / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"no manifest.csv in {path}")
    masks_path = path / "masks.npy"
    if not masks_path.exists():
        raise DataError(f"no masks.npy in {path}")
    masks_arr = np.load(masks_path).astype(np.float32)
    masks = MaskSet(masks=masks_arr, seed=-1, density=float(masks_arr.mean()))
    entries = []
    for line in manifest.read_text(encoding="ascii").splitlines()[1:]:
        if not line.strip():
            continue
        idx, clip_name, meas_name = line.split(",")[:3]
        clip = VideoClip(frames=np.load(path / clip_name).astype(np.float32))
        meas = Measurement(y=np.load(path / meas_name).astype(np.float32), cr=masks.t)
        entries.append((int(idx), clip, meas))
    return masks, entries


def cmd_train(args, workdir: Path) -> int:
    cfg = ExperimentConfig.load(_resolve(workdir, args.config))
    netcfg = _net_config(cfg)
    out = _resolve(workdir, cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.txt").write_text(cfg.echo(), encoding="ascii")

    init_state = None
    init_geometry = None
    if args.init is not None:
        fp, init_state = load_checkpoint(_resolve(workdir, args.init))
        init_geometry = parse_fingerprint(fp).backbone_geometry()
    elif netcfg.quantized:
        raise ConfigError(
            "quantized variant requires --init pointing at a full-precision "
            "checkpoint with identical geometry"
        )

    result = train(_train_config(cfg), netcfg, _dataset(cfg), init_state, init_geometry)
    save_checkpoint(out / "checkpoint.qsc", result.fingerprint, result.state)
    _write_loss_csv(out / "loss.csv", result.curve)
    final = result.curve[-1]["val_psnr"] if result.curve else float("nan")
    print(f"trained {netcfg.fingerprint()} -> {out / 'checkpoint.qsc'} "
          f"(final holdout PSNR {final:.3f} dB)")
    return 0


def _load_net(ckpt_path: Path) -> QNet:
    fp, state = load_checkpoint(ckpt_path)
    net = QNet(parse_fingerprint(fp), seed=0)
    net.load_state(state)
    return net


def cmd_eval(args, workdir: Path) -> int:
    net = _load_net(_resolve(workdir, args.ckpt))
    masks, entries = _load_data_dir(_resolve(workdir, args.data))
    if masks.t != net.cfg.cr:
        raise DataError(f"data compression ratio {masks.t} vs model {net.cfg.cr}")

    def one(entry):
        idx, clip, meas = entry
        rec = net.reconstruct(meas, masks)
        return idx, psnr(rec.frames, clip.frames), ssim(rec.frames, clip.frames), rec

    workers = worker_count()
    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]

    out = _resolve(workdir, args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["index,psnr_db,ssim"]
    for idx, p, s, rec in results:
        rows.append(f"{idx},{p:.6f},{s:.6f}")
        if args.dump_frames:
            for t in range(rec.frames.shape[0]):
                _write_pgm(out / f"recon_{idx:04d}_f{t}.pgm", rec.frames[t])
    if results:
        rows.append(f"average,{np.mean([r[1] for r in results]):.6f},"
                    f"{np.mean([r[2] for r in results]):.6f}")
    (out / "metrics.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
    print((out / "metrics.csv").read_text(encoding="ascii"), end="")
    return 0


def _ladder_configs(base_kwargs: dict, bits: int):
    """Break-down ladder: exactly one flag changes per step."""
    rows = [
        ("baseline", QNetConfig(body_bits=bits, shortcut_bits=8, **base_kwargs)),
        ("+shift", QNetConfig(body_bits=bits, shortcut_bits=8, use_qk_shift=True,
                              **base_kwargs)),
        ("+shift+fem", QNetConfig(body_bits=bits, shortcut_bits=8, use_qk_shift=True,
                                  use_fem_shortcuts=True, **base_kwargs)),
        ("+shift+fem+vrm", QNetConfig(body_bits=bits, shortcut_bits=8, use_qk_shift=True,
                                      use_fem_shortcuts=True, use_vrm_shortcuts=True,
                                      **base_kwargs)),
    ]
    return rows


def _grid_configs(base_kwargs: dict, bits: int):
    """Per-stage bit-width grid on the plain 8-bit baseline."""
    return [
        ("all_8bit", QNetConfig(body_bits=8, shortcut_bits=8, **base_kwargs)),
        ("fem_4bit", QNetConfig(body_bits=8, shortcut_bits=8, fem_bits=bits, **base_kwargs)),
        ("enh_4bit", QNetConfig(body_bits=8, shortcut_bits=8, enh_bits=bits, **base_kwargs)),
        ("vrm_4bit", QNetConfig(body_bits=8, shortcut_bits=8, vrm_bits=bits, **base_kwargs)),
    ]


def cmd_ablate(args, workdir: Path) -> int:
    cfg = ExperimentConfig.load(_resolve(workdir, args.config))
    out = _resolve(workdir, cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_echo.txt").write_text(cfg.echo(), encoding="ascii")
    dataset = _dataset(cfg)
    tcfg = _train_config(cfg)
    base_kwargs = dict(base_channels=cfg.net_base_channels,
                       resdnet_blocks=cfg.net_resdnet_blocks,
                       cformer_per_block=cfg.net_cformer_per_block,
                       heads=cfg.net_heads, cr=cfg.net_cr)

    # shared full-precision backbone, identical seeds for every row
    fp32_cfg = QNetConfig(body_bits=32, shortcut_bits=32, **base_kwargs)
    fp32 = train(tcfg, fp32_cfg, dataset)
    save_checkpoint(out / "fp32_init.qsc", fp32.fingerprint, fp32.state)
    geometry = fp32_cfg.backbone_geometry()

    def run_rows(rows, csv_path):
        lines = ["row,psnr_db,ssim,params_m,ops_g"]
        for name, rowcfg in rows:
            res = train(tcfg, rowcfg, dataset, fp32.state, geometry)
            net = QNet(rowcfg, seed=tcfg.seed)
            net.load_state(res.state)
            vals = []
            for c in dataset.holdout_clips:
                rec = net.reconstruct(encode(c, dataset.masks), dataset.masks)
                vals.append((psnr(rec.frames, c.frames), ssim(rec.frames, c.frames)))
            rep = count_efficiency(net, (tcfg.crop, tcfg.crop))
            lines.append(f"{name},{np.mean([v[0] for v in vals]):.6f},"
                         f"{np.mean([v[1] for v in vals]):.6f},"
                         f"{rep.params_m:.6f},{rep.ops_g:.6f}")
        csv_path.write_text("\n".join(lines) + "\n", encoding="ascii")
        print(csv_path.read_text(encoding="ascii"), end="")

    run_rows(_ladder_configs(base_kwargs, args.bits), out / "ladder.csv")
    run_rows(_grid_configs(base_kwargs, args.bits), out / "grid.csv")
    return 0


def cmd_pack(args, workdir: Path) -> int:
    net = _load_net(_resolve(workdir, args.ckpt))
    model = pack_model(net)
    out = _resolve(workdir, args.out)
    write_packed(model, out)
    n_codes = sum(pl.code_count for pl in model.layers)
    print(f"packed {len(model.layers)} layers / {n_codes} codes -> {out}")
    return 0


def cmd_infer_int(args, workdir: Path) -> int:
    model = read_packed(_resolve(workdir, args.packed))
    masks, entries = _load_data_dir(_resolve(workdir, args.data))
    out = _resolve(workdir, args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = ["index,psnr_db"]
    for idx, clip, meas in entries:
        rec = infer_packed(model, meas, masks)
        np.save(out / f"recon_{idx:04d}.npy", rec.frames)
        rows.append(f"{idx},{psnr(rec.frames, clip.frames):.6f}")
    (out / "int_metrics.csv").write_text("\n".join(rows) + "\n", encoding="ascii")
    print((out / "int_metrics.csv").read_text(encoding="ascii"), end="")
    return 0


def cmd_report(args, workdir: Path) -> int:
    if args.ckpt:
        net = _load_net(_resolve(workdir, args.ckpt))
    else:
        net = QNet(make_variant(args.variant), seed=0)
    rep = count_efficiency(net, (args.input_hw, args.input_hw))
    rows = ["layer,kind,geometry,w_bits,a_bits,raw_params,adj_params,flops,adj_ops"]
    for r in rep.rows:
        rows.append(f"{r['name']},{r['kind']},{r['geometry']},{r['w_bits']},{r['a_bits']},"
                    f"{r['weight_params'] + r['bias_params']},{r['adj_params']:.1f},"
                    f"{r['flops']},{r['adj_ops']:.1f}")
    rows.append(f"total,,,,,,{rep.params_m * 1e6:.1f},,{rep.ops_g * 1e9:.1f}")
    text = "\n".join(rows) + "\n"
    if args.out:
        _resolve(workdir, args.out).write_text(text, encoding="ascii")
    print(text, end="")
    return 0


def cmd_bench(args, workdir: Path) -> int:
    in_shape = tuple(int(x) for x in args.in_shape.split(","))
    w_shape = tuple(int(x) for x in args.w_shape.split(","))
    rep = kernel_bench(in_shape, w_shape, args.bits, args.reps)
    print(f"geometry {in_shape} * {w_shape} @ {args.bits}-bit")
    print(f"float FLOPs:        {rep['float_flops']:.3e}")
    print(f"bit-adjusted OPs:   {rep['theoretical_ops']:.3e}")
    if rep["calls"]:
        print(f"wall clock per call: {rep['wall_clock_s'] * 1e3:.3f} ms")
        print(f"achieved OPs/s:      {rep['achieved_ops_per_s']:.3e}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qsci", description=__doc__)
    ap.add_argument("--workdir", default=".", help="root for relative paths")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="emit synthetic clips, masks and measurements")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--T", type=int, default=4)
    g.add_argument("--H", type=int, default=32)
    g.add_argument("--W", type=int, default=32)
    g.add_argument("--p", type=float, default=0.5)
    g.add_argument("--noise-sigma", type=float, default=0.0, dest="noise_sigma")
    g.add_argument("--mask-seed", type=int, default=None, dest="mask_seed")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model from an experiment config")
    t.add_argument("--config", required=True)
    t.add_argument("--init", default=None, help="full-precision init checkpoint")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="PSNR/SSIM table for a checkpoint on a data dir")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--dump-frames", action="store_true", dest="dump_frames")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("ablate", help="break-down ladder and per-stage bit grid")
    a.add_argument("--config", required=True)
    a.add_argument("--bits", type=int, default=4)
    a.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("pack", help="bit-pack a checkpoint for integer inference")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pack)

    i = sub.add_parser("infer-int", help="integer-path inference from a packed model")
    i.add_argument("--packed", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(fn=cmd_infer_int)

    r = sub.add_parser("report", help="bit-adjusted Params/OPs table")
    r.add_argument("--ckpt", default=None)
    r.add_argument("--variant", default="fp32")
    r.add_argument("--input-hw", type=int, default=32, dest="input_hw")
    r.add_argument("--out", default=None)
    r.set_defaults(fn=cmd_report)

    b = sub.add_parser("bench", help="time the integer conv kernel")
    b.add_argument("--in-shape", required=True, dest="in_shape",
                   help="N,C,T,H,W")
    b.add_argument("--w-shape", required=True, dest="w_shape",
                   help="O,C,kt,kh,kw")
    b.add_argument("--bits", type=int, default=4)
    b.add_argument("--reps", type=int, default=5)
    b.set_defaults(fn=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    workdir = Path(args.workdir)
    try:
        return args.fn(args, workdir)
    except QsciError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
