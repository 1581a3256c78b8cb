"""Command-line entry point: ``flowplane <subcommand> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

OUT_ENV = "FLOWPLANE_OUT"
DEFAULT_OUT = "flowplane-out"

# flag name -> (TrainConfig field, type, default shown in --help)
NAV_DEFAULTS = {
    "state_dims": ("state_dims", "dims", (31, 84, 84)),
    "omega_max": ("omega_max", float, 5.0),
    "d_max": ("d_max", float, 5.0),
    "t_max": ("t_max", int, 100),
    "lam": ("lam", float, 0.025),
    "eta": ("eta", float, 0.01),
    "k_a": ("k_a", int, 8),
}
TRAIN_FLAGS = {
    "workers": ("workers", int, 4),
    "lr": ("lr", float, 1e-5),
    "gamma": ("gamma", float, 0.99),
    "steps": ("steps", int, 200_000),
    "val_interval": ("val_interval", int, 5_000),
    "grad_clip": ("grad_clip", float, 40.0),
    "state_spacing": ("state_spacing", float, 2.0),
    "widths": ("widths", "dims", (16, 32, 32, 64)),
    "latent": ("latent", int, 1024),
    "lstm": ("lstm", int, 256),
}


class CliError(Exception):
    pass


def _dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.replace("x", ",").split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fmt(v) -> str:
    return ",".join(str(x) for x in v) if isinstance(v, tuple) else str(v)


def _add_flags(p: argparse.ArgumentParser, table: dict) -> None:
    for flag, (_, typ, default) in table.items():
        p.add_argument("--" + flag.replace("_", "-"), dest=flag, type=_dims if typ == "dims" else typ,
                       default=None, help=f"(default: {_fmt(default)})")


def _out_dir(args) -> Path:
    out = Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, rows: list[dict], fields: list[str]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})


def _sidecar(vol_path: Path) -> Path:
    return vol_path.with_suffix(".json")


def _load_case(vol_path, gt_path=None):
    from .phantom import GroundTruth
    from .volume_store import read_f4d

    vol_path = Path(vol_path)
    if not vol_path.exists():
        raise CliError(f"missing input file: {vol_path}")
    gt_path = Path(gt_path) if gt_path else _sidecar(vol_path)
    if not gt_path.exists():
        raise CliError(f"missing ground-truth sidecar: {gt_path}")
    side = json.loads(gt_path.read_text())
    return read_f4d(vol_path), GroundTruth.from_json(side.get("ground_truth", side))


def _load_model(path):
    from .evaluation import Model

    path = Path(path)
    if not path.exists():
        raise CliError(f"missing model checkpoint: {path}")
    return Model.from_checkpoint(path)


# --------------------------------------------------------------------------
# subcommands


def cmd_phantom(args) -> int:
    from .phantom import PhantomSpec, make_phantom, random_spec
    from .volume_store import write_f4d

    rng = np.random.default_rng(args.seed)
    count = args.count
    out = Path(args.out) if args.out else _out_dir(args) / ("phantoms" if count > 1 else "phantom.f4d")
    if count > 1:
        out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        if args.random or count > 1:
            spec = random_spec(rng, kind=args.kind)
        else:
            kw = {"kind": args.kind or "straight_tube"}
            for name in ("radius", "v_max", "venc", "noise"):
                if getattr(args, name) is not None:
                    kw[name] = getattr(args, name)
            spec = PhantomSpec(**kw)
        vol, gt = make_phantom(spec, int(rng.integers(2 ** 31)))
        path = out / f"phantom_{i:03d}.f4d" if count > 1 else out
        path.parent.mkdir(parents=True, exist_ok=True)
        write_f4d(vol, path)
        _write_json(_sidecar(path), {"ground_truth": gt.to_json(), "spec": spec.to_json()})
        print(f"wrote {path}")
    return 0


def cmd_preprocess(args) -> int:
    from .preproc import build_env
    from .volume_store import FlowVolume4D, read_f4d, write_f4d, write_s3d

    vol_path = Path(args.vol)
    if not vol_path.exists():
        raise CliError(f"missing input file: {vol_path}")
    vol = read_f4d(vol_path)
    from .preproc import resample_isotropic

    iso = resample_isotropic(vol)
    env = build_env(vol, use_clahe=not args.no_clahe)
    out = _out_dir(args)
    stem = vol_path.stem
    write_f4d(iso, out / f"{stem}_iso.f4d")
    write_s3d(env.pcmra, out / f"{stem}_pcmra.s3d")
    sys_vol = FlowVolume4D(np.ones((1,) + env.dims), env.v_sys[None], env.spacing, env.venc)
    write_f4d(sys_vol, out / f"{stem}_vsys.f4d")
    _write_json(out / f"{stem}_preprocess.json",
                {"sys_index": env.sys_index, "venc": env.venc, "dims": list(env.dims),
                 "spacing": list(env.spacing), "clahe": not args.no_clahe})
    print(f"systolic frame {env.sys_index}; outputs in {out}")
    return 0


def _train_config(args):
    from .trainer import TrainConfig

    values: dict = {}
    if args.config:
        cfg_path = Path(args.config)
        if not cfg_path.exists():
            raise CliError(f"missing config file: {cfg_path}")
        try:
            values.update(json.loads(cfg_path.read_text()))
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}") from None
    for table in (NAV_DEFAULTS, TRAIN_FLAGS):
        for flag, (name, _, _) in table.items():
            v = getattr(args, flag, None)
            if v is not None:
                values[name] = v
    if args.seed is not None:
        values["seed"] = args.seed
    for key in ("n_train", "n_val", "family_seed"):
        values.pop(key, None)
    try:
        return TrainConfig.from_json(values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid training config: {exc}") from None


def _pick(flag, raw_cfg: dict, key: str, default: int) -> int:
    return int(flag) if flag is not None else int(raw_cfg.get(key, default))


def _train_cases(args, raw_cfg: dict):
    from .preproc import build_env
    from .trainer import make_cases

    n_val = _pick(args.n_val, raw_cfg, "n_val", 5)
    if args.phantoms:
        d = Path(args.phantoms)
        files = sorted(d.glob("*.f4d"))
        if len(files) < 2:
            raise CliError(f"need at least two phantoms in {d}")
        cases = []
        for f in files:
            vol, gt = _load_case(f)
            cases.append((build_env(vol), gt))
    else:
        n_train = _pick(args.n_train, raw_cfg, "n_train", 20)
        fam = _pick(args.family_seed, raw_cfg, "family_seed", 0)
        cases = [c[:2] for c in make_cases(n_train + n_val, fam)]
    if not 1 <= n_val < len(cases):
        raise CliError(f"n_val={n_val} leaves no training phantoms out of {len(cases)}")
    return cases[:-n_val], cases[-n_val:]


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)
    raw = json.loads(Path(args.config).read_text()) if args.config else {}
    out = _out_dir(args)
    family = {"phantoms": args.phantoms, "n_val": _pick(args.n_val, raw, "n_val", 5)}
    if not args.phantoms:
        family["n_train"] = _pick(args.n_train, raw, "n_train", 20)
        family["family_seed"] = _pick(args.family_seed, raw, "family_seed", 0)
    _write_json(out / "run_config.json", {"train": cfg.to_json(), **family})
    if cfg.steps == 0:
        # no phantoms are needed to write the untrained checkpoint
        from .trainer import Trainer

        dummy = [(None, None)]
        ckpt = Trainer(cfg, dummy, dummy, out).run()
    else:
        tr_cases, val_cases = _train_cases(args, raw)
        ckpt = train(cfg, tr_cases, val_cases, out, log=(print if args.verbose else None))
    print(f"checkpoint step {ckpt.step} score {ckpt.score} -> {out / 'best.ckpt'}")
    return 0


def _cases_from_args(args):
    vols = args.vol or []
    if not vols:
        raise CliError("at least one --vol is required")
    gts = args.gt or [None] * len(vols)
    if len(gts) != len(vols):
        raise CliError("--gt must be given once per --vol")
    return [(Path(v), *_load_case(v, g)) for v, g in zip(vols, gts)]


def cmd_eval(args) -> int:
    from .environment import write_trace
    from .evaluation import run_eval_episode
    from .preproc import build_env

    model = _load_model(args.model)
    out = _out_dir(args)
    rows = []
    for path, vol, gt in _cases_from_args(args):
        pose, m, trace = run_eval_episode(model, build_env(vol), gt, record=args.trace)
        rows.append({"case": path.stem, "angle_error": m.angle_deg, "distance_error": m.distance_mm})
        if args.trace:
            write_trace(trace, out / f"{path.stem}_trace.jsonl")
    csv_path = Path(args.csv) if args.csv else out / "eval.csv"
    _write_csv(csv_path, rows, ["case", "angle_error", "distance_error"])
    ang = np.array([r["angle_error"] for r in rows])
    dist = np.array([r["distance_error"] for r in rows])
    summary = {"cases": len(rows), "angle_mean": float(ang.mean()), "angle_std": float(ang.std()),
               "angle_median": float(np.median(ang)), "distance_mean": float(dist.mean()),
               "distance_std": float(dist.std()), "distance_median": float(np.median(dist))}
    _write_json(csv_path.with_suffix(".json"), summary)
    for r in rows:
        print(f"{r['case']}: angle {r['angle_error']:.2f} deg, distance {r['distance_error']:.2f} mm")
    return 0


def cmd_reformat(args) -> int:
    from .evaluation import run_eval_episode
    from .geometry import plane_image
    from .preproc import build_env
    from .volume_store import ScalarVolume3D, write_s3d

    model = _load_model(args.model)
    out = _out_dir(args)
    for path, vol, gt in _cases_from_args(args):
        env = build_env(vol)
        pose, m, _ = run_eval_episode(model, env, gt)
        pc, vn = plane_image(env, pose, args.size)
        sp = (1.0, 2.0, 2.0)
        write_s3d(ScalarVolume3D(pc[None], sp), out / f"{path.stem}_plane_pcmra.s3d")
        write_s3d(ScalarVolume3D(vn[None], sp), out / f"{path.stem}_plane_vn.s3d")
        _write_json(out / f"{path.stem}_plane.json",
                    {"P": pose.P.tolist(), "n": pose.n.tolist(), "w1": pose.w1.tolist(), "w2": pose.w2.tolist(),
                     "angle_error": m.angle_deg, "distance_error": m.distance_mm})
        print(f"{path.stem}: plane written to {out}")
    return 0


def cmd_invariance(args) -> int:
    from .evaluation import invariance_grid

    model = _load_model(args.model)
    out = _out_dir(args)
    cases = _cases_from_args(args)
    angles = tuple(range(-args.max_angle, args.max_angle + 1, args.angle_step))
    offsets = tuple(range(-args.max_offset, args.max_offset + 1, args.offset_step))
    all_rows, summaries = [], {}
    for path, vol, gt in cases:
        rows, summary = invariance_grid(model, vol, gt, angles, offsets)
        for r in rows:
            all_rows.append({"case": path.stem, **r})
        summaries[path.stem] = summary
        print(f"{path.stem}: angle {summary['angle_mean']:.2f}+-{summary['angle_std']:.2f} deg, "
              f"distance {summary['distance_mean']:.2f}+-{summary['distance_std']:.2f} mm "
              f"(baseline {summary['baseline_angle']:.2f} deg, {summary['baseline_distance']:.2f} mm)")
    _write_csv(out / "invariance.csv", all_rows, ["case", "angle", "offset", "angle_error", "distance_error"])
    _write_json(out / "invariance.json", summaries)
    return 0


def cmd_flow(args) -> int:
    from .evaluation import agreement_stats, compute_flow, ideal_mask, plane_flow, run_eval_episode
    from .geometry import PlaneState, plane_image
    from .phantom import PhantomSpec
    from .preproc import build_env

    model = _load_model(args.model) if args.model else None
    out = _out_dir(args)
    rows, pred, ref, masks_p, masks_r = [], [], [], [], []
    for path, vol, gt in _cases_from_args(args):
        env = build_env(vol)
        if model is not None:
            plane, _, _ = run_eval_episode(model, env, gt)
        else:
            plane = PlaneState.from_vectors(gt.P_T, gt.n_T)
        flow, seg = plane_flow(env, plane)
        q = float(gt.flow[env.sys_index]) if len(gt.flow) else float("nan")
        row = {"case": path.stem, "flow": flow, "analytic_flow": q,
               "area_mm2": float(seg.mask.sum() * seg.spacing ** 2), "fallback": int(seg.fallback)}
        side = json.loads(_sidecar(path).read_text()) if _sidecar(path).exists() else {}
        if "spec" in side:
            spec = PhantomSpec(**side["spec"])
            gtp = PlaneState.from_vectors(gt.P_T, gt.n_T)
            m_ref = ideal_mask(gtp, gt.P_T, spec.radius)
            _, vn_ref = plane_image(env, gtp)
            row["ideal_mask_flow"] = compute_flow(m_ref, vn_ref)
            masks_r.append(m_ref)
            masks_p.append(seg.mask)
        rows.append(row)
        pred.append(flow)
        ref.append(q)
        print(f"{path.stem}: flow {flow:.3f} L/min (analytic {q:.3f})")
    fields = ["case", "flow", "analytic_flow", "area_mm2", "fallback"]
    if rows and "ideal_mask_flow" in rows[0]:
        fields.append("ideal_mask_flow")
    _write_csv(out / "flow.csv", rows, fields)
    summary = {"cases": len(rows)}
    if len(rows) >= 2 and np.ptp(ref) > 0:
        use_masks = len(masks_p) == len(rows)
        summary.update(agreement_stats(ref, pred, masks_r if use_masks else None, masks_p if use_masks else None))
    _write_json(out / "flow.json", summary)
    return 0


def cmd_describe(args) -> int:
    from . import policy_net as pn

    if args.model:
        model = _load_model(args.model)
        net = model.net
    else:
        kw = {}
        if args.state_dims is not None:
            kw["state_dims"] = args.state_dims
        for name in ("widths", "latent", "lstm"):
            if getattr(args, name) is not None:
                kw[name] = getattr(args, name)
        net = pn.NetworkConfig(**kw)
    total = 0
    print(f"input {net.input_shape}, features {net.feature_dims()} x {net.widths[-1]}")
    for name, shape, size in pn.describe(net):
        total += size
        print(f"{name:20s} {str(shape):24s} {size:>10d}")
    print(f"{'total':20s} {'':24s} {total:>10d}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowplane", description="Plane reformatting for 4D flow volumes.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default: 0)")
    common.add_argument("--out-dir", default=None, help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="generate synthetic 4D flow phantoms")
    s.add_argument("--kind", choices=["straight_tube", "torus_arc"], default=None,
                   help="vessel shape (default: straight_tube; random when --random)")
    s.add_argument("--out", default=None, help="output .f4d path, or directory when --count > 1")
    s.add_argument("--count", type=int, default=1, help="number of phantoms (default: 1)")
    s.add_argument("--random", action="store_true", help="draw a random vessel instead of the default")
    s.add_argument("--radius", type=float, default=None, help="vessel radius mm (default: 8)")
    s.add_argument("--v-max", dest="v_max", type=float, default=None, help="peak velocity mm/s (default: 1000)")
    s.add_argument("--venc", type=float, default=None, help="velocity encoding mm/s (default: 1500)")
    s.add_argument("--noise", type=float, default=None, help="background noise std mm/s (default: 30)")
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("preprocess", parents=[common], help="build PC-MRA and systolic velocities")
    s.add_argument("--vol", required=True, help="input .f4d")
    s.add_argument("--no-clahe", action="store_true", help="skip contrast equalisation")
    s.set_defaults(func=cmd_preprocess)

    s = sub.add_parser("train", parents=[common], help="asynchronous actor-critic training")
    s.add_argument("--config", default=None, help="JSON file of training settings; flags override it")
    s.add_argument("--phantoms", default=None, help="directory of .f4d phantoms with .json sidecars "
                   "(default: generate a random family)")
    s.add_argument("--n-train", dest="n_train", type=int, default=None, help="generated training phantoms (default: 20)")
    s.add_argument("--n-val", dest="n_val", type=int, default=None, help="validation phantoms (default: 5)")
    s.add_argument("--family-seed", dest="family_seed", type=int, default=None,
                   help="seed of the generated phantom family (default: 0)")
    s.add_argument("--verbose", action="store_true", help="print validation progress")
    _add_flags(s, NAV_DEFAULTS)
    _add_flags(s, TRAIN_FLAGS)
    s.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "100-step deterministic evaluation"),
                                 ("reformat", cmd_reformat, "write the predicted plane images"),
                                 ("invariance", cmd_invariance, "rotation/translation invariance grid"),
                                 ("flow", cmd_flow, "segment the vessel and quantify flow")):
        s = sub.add_parser(name, parents=[common], help=helptext)
        s.add_argument("--model", required=name != "flow", default=None,
                       help="checkpoint" + (" (default: ground-truth plane)" if name == "flow" else ""))
        s.add_argument("--vol", action="append", help="input .f4d (repeatable)")
        s.add_argument("--gt", action="append", help="ground-truth JSON per --vol (default: sidecar)")
        if name == "eval":
            s.add_argument("--csv", default=None, help="output CSV path (default: <out-dir>/eval.csv)")
            s.add_argument("--trace", action="store_true", help="also write JSON-lines episode traces")
        if name == "reformat":
            s.add_argument("--size", type=int, default=48, help="plane image size in pixels (default: 48)")
        if name == "invariance":
            s.add_argument("--max-angle", type=int, default=15, help="largest rotation deg (default: 15)")
            s.add_argument("--angle-step", type=int, default=5, help="rotation step deg (default: 5)")
            s.add_argument("--max-offset", type=int, default=15, help="largest translation mm (default: 15)")
            s.add_argument("--offset-step", type=int, default=5, help="translation step mm (default: 5)")
        s.set_defaults(func=func)

    s = sub.add_parser("describe", parents=[common], help="parameter counts per layer")
    s.add_argument("--model", default=None, help="checkpoint to describe (default: a fresh network)")
    _add_flags(s, {k: NAV_DEFAULTS[k] for k in ("state_dims",)})
    _add_flags(s, {k: TRAIN_FLAGS[k] for k in ("widths", "latent", "lstm")})
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed_explicit = False
        if args.command != "train":
            args.seed = 0
    try:
        return int(args.func(args) or 0)
    except CliError as exc:
        print(f"flowplane {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError) as exc:
        print(f"flowplane {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
