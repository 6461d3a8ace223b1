"""Command-line interface.

Subcommands: scene-gen, train, eval, sweep-beta, grad-check,
compare-losses.  Exit codes: 0 success, 1 usage error, 2 data/config
error, 3 numerical failure.  Errors go to stderr with a machine-parseable
``error[kind]:`` prefix.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from . import data, gradcheck, metrics, model, scene as scene_mod, training as train_mod
from .errors import ConfigError, DataError, NumericsError
from .losses import Norm
from .training import (
    BetaLossSpec,
    HomoscedasticLossSpec,
    ReprojectionLossSpec,
    TrainConfig,
)

GRAD_CHECK_TOL = 1e-5


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit code 1 instead of argparse's 2
        raise _UsageError(message)


def _add_common(p: _Parser):
    p.add_argument("--seed", type=int, default=0, help="master RNG seed")
    p.add_argument("--out-dir", default=".", help="directory for output files")
    p.add_argument("--config", default=None, help="flat key-value config file")


def _add_scene_flags(p: _Parser):
    p.add_argument("--preset", choices=("room", "street"), default="room")
    p.add_argument("--points", type=int, default=None, help="scene point count")
    p.add_argument("--anchors", type=int, default=None, help="observation anchor count")
    p.add_argument("--train-count", type=int, default=None)
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--no-center", action="store_true", help="skip frame centering")


def _add_train_flags(p: _Parser):
    p.add_argument("--loss", choices=("beta", "sigma", "reproj", "two-step"), default=None)
    p.add_argument("--beta", type=float, default=None, help="fixed orientation weight")
    p.add_argument("--norm", choices=("l1", "l2", "huber", "tukey"), default=None)
    p.add_argument("--iters", type=int, default=None, help="max training iterations")
    p.add_argument("--iters2", type=int, default=None, help="fine-tune iterations (two-step)")
    p.add_argument("--batch", type=int, default=None, help="batch size (default 64)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default 1e-4)")


def build_parser() -> _Parser:
    parser = _Parser(prog="geopose", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("scene-gen", help="generate a synthetic scene + pose labels")
    _add_common(p)
    _add_scene_flags(p)
    p.set_defaults(func=cmd_scene_gen)

    p = sub.add_parser("train", help="train a pose regressor")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--scene", required=True, help="scene file from scene-gen")
    p.add_argument("--poses", required=True, help="pose-label file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on labelled poses")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument(
        "--thresholds", default="2:5",
        help="accuracy thresholds 'Tx:Tq[,Tx:Tq...]' in meters:degrees",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-beta", help="train across a beta grid and tabulate errors")
    _add_common(p)
    _add_scene_flags(p)
    _add_train_flags(p)
    p.add_argument("--betas", default="100,250,500,750,1000,2000")
    p.set_defaults(func=cmd_sweep_beta)

    p = sub.add_parser("grad-check", help="finite-difference validation of loss gradients")
    _add_common(p)
    p.add_argument("--samples", type=int, default=1000, help="random draws per loss")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser(
        "compare-losses", help="desk-scale loss comparison: beta vs sigma vs two-step"
    )
    _add_common(p)
    _add_scene_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_compare_losses)
    return parser


# ---------------------------------------------------------------------------
# config file + default resolution
# ---------------------------------------------------------------------------


def _read_config_file(path) -> dict:
    values = {}
    with open(path, "r") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" in line:
                key, _, val = line.partition("=")
            else:
                parts = line.split(None, 1)
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'key value'")
                key, val = parts
            values[key.strip()] = val.strip()
    return values


def _resolve(args, cfg: dict, key: str, builtin, cast):
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in cfg:
        return cast(cfg[key])
    return builtin


class _Settings:
    """Flag > config-file > builtin default resolution for one invocation."""

    def __init__(self, args):
        self.args = args
        self.cfg = _read_config_file(args.config) if args.config else {}

    def get(self, key, builtin, cast=str):
        return _resolve(self.args, self.cfg, key, builtin, cast)

    def norm(self) -> Norm:
        return Norm(self.get("norm", "l1"))

    def train_config(self, loss_spec, iters_default=2000) -> TrainConfig:
        return TrainConfig(
            loss=loss_spec,
            learning_rate=self.get("lr", 1e-4, float),
            batch_size=self.get("batch", 64, int),
            max_iterations=self.get("iters", iters_default, int),
            plateau_window=int(self.cfg.get("plateau_window", 500)),
            plateau_tol=float(self.cfg.get("plateau_tol", 1e-3)),
            seed=self.args.seed,
            max_reproj_points=int(self.cfg.get("max_reproj_points", 64)),
        )


def _build_scene_and_samples(settings: _Settings):
    args = settings.args
    preset = settings.get("preset", "room")
    seed = args.seed
    maker = scene_mod.room_scene if preset == "room" else scene_mod.street_scene
    kwargs = {}
    points = settings.get("points", None, int)
    anchors = settings.get("anchors", None, int)
    if points is not None:
        kwargs["n_points"] = points
    if anchors is not None:
        kwargs["n_anchors"] = anchors
    scn = maker(seed, **kwargs)
    n_train = settings.get("train_count", 500, int)
    n_test = settings.get("test_count", 150, int)
    train_s = scene_mod.sample_poses(scn, n_train, seed, "train")
    test_s = scene_mod.sample_poses(scn, n_test, seed, "test")
    offset = None
    if not args.no_center:
        train_s, test_s, scn, offset = scene_mod.center_frame(train_s, test_s, scn)
    return scn, train_s, test_s, preset, offset


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_scene_gen(args) -> int:
    settings = _Settings(args)
    scn, train_s, test_s, preset, offset = _build_scene_and_samples(settings)
    scene_mod.save_scene(scn, _out(args, "scene.txt"))
    for samples, prefix in ((train_s, "train"), (test_s, "test")):
        ds = replace(data.records_from_samples(samples, prefix), frame_offset=offset)
        data.save_pose_file(ds, _out(args, f"{prefix}.poses"))
    print(
        f"scene-gen: preset={preset} seed={args.seed} points={scn.points.shape[0]} "
        f"anchors={scn.n_anchors} train={len(train_s)} test={len(test_s)} -> {args.out_dir}"
    )
    return 0


def _loss_spec(settings: _Settings, kind: str):
    norm = settings.norm()
    if kind == "beta":
        return BetaLossSpec(beta=settings.get("beta", 500.0, float), norm=norm)
    if kind == "sigma":
        return HomoscedasticLossSpec(norm=norm)
    if kind == "reproj":
        return ReprojectionLossSpec(norm=norm)
    raise ConfigError(f"unknown loss kind {kind!r}")


def cmd_train(args) -> int:
    settings = _Settings(args)
    scn = scene_mod.load_scene(args.scene)
    dataset = data.load_pose_file(args.poses)
    samples = data.samples_from_records(scn, dataset)
    loss_kind = settings.get("loss", "sigma")
    config = model.RegressorConfig(input_dim=scn.observation_dim, seed=args.seed)
    state = model.init(config)
    if loss_kind == "two-step":
        cfg1 = settings.train_config(_loss_spec(settings, "sigma"))
        iters2 = settings.get("iters2", cfg1.max_iterations, int)
        cfg2 = replace(
            cfg1, loss=_loss_spec(settings, "reproj"), max_iterations=iters2
        )
        report = train_mod.two_step_train(state, samples, scn, cfg1, cfg2)
        train_mod.save_report(report.phase1, _out(args, "loss_trace_phase1.csv"))
        train_mod.save_report(
            report.phase2, _out(args, "loss_trace_phase2.csv"), "checkpoint.npz"
        )
        iters = report.phase1.iterations + report.phase2.iterations
    else:
        cfg = settings.train_config(_loss_spec(settings, loss_kind))
        rep = train_mod.train(state, samples, cfg, scn)
        train_mod.save_report(rep, _out(args, "loss_trace.csv"), "checkpoint.npz")
        iters = rep.iterations
        if rep.final_s is not None:
            print(f"train: final s_x={rep.final_s[0]:.4f} s_q={rep.final_s[1]:.4f}")
    model.save_checkpoint(state, _out(args, "checkpoint.npz"))
    print(f"train: loss={loss_kind} iterations={iters} -> {args.out_dir}")
    return 0


def _parse_thresholds(text: str):
    pairs = []
    for chunk in text.split(","):
        tx, _, tq = chunk.partition(":")
        try:
            pairs.append((float(tx), float(tq)))
        except ValueError:
            raise ConfigError(f"bad threshold spec {chunk!r}; use 'Tx:Tq'")
    return pairs


def cmd_eval(args) -> int:
    state = model.load_checkpoint(args.checkpoint)
    scn = scene_mod.load_scene(args.scene)
    dataset = data.load_pose_file(args.poses)
    samples = data.samples_from_records(scn, dataset)
    report = metrics.evaluate(state, samples, ids=[r.id for r in dataset])
    thresholds = _parse_thresholds(args.thresholds)
    metrics.emit_csv(report, _out(args, "metrics.csv"), thresholds)
    print(
        f"eval: median_pos={report.median_position_m:.4f}m "
        f"median_ori={report.median_orientation_deg:.4f}deg "
        + " ".join(
            f"acc<{tx:g}m,{tq:g}deg={100 * report.accuracy_at(tx, tq):.1f}%"
            for tx, tq in thresholds
        )
    )
    return 0


def cmd_sweep_beta(args) -> int:
    settings = _Settings(args)
    try:
        grid = [float(b) for b in settings.get("betas", "").split(",") if b]
    except ValueError:
        raise ConfigError(f"bad --betas list {args.betas!r}")
    scn, train_s, test_s, _, _ = _build_scene_and_samples(settings)
    base_cfg = settings.train_config(_loss_spec(settings, "beta"))
    mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=args.seed)
    rows = train_mod.beta_sweep(
        lambda: model.init(mcfg), train_s, test_s, grid, base_cfg
    )
    path = _out(args, "beta_sweep.csv")
    with open(path, "w", newline="\n") as fh:
        fh.write("beta,median_pos_err_m,median_ori_err_deg\n")
        for row in rows:
            fh.write(
                f"{row.beta:g},{format(row.median_position_m, '.17g')},"
                f"{format(row.median_orientation_deg, '.17g')}\n"
            )
    print(f"{'beta':>8} {'median pos [m]':>16} {'median ori [deg]':>17}")
    for row in rows:
        print(
            f"{row.beta:>8g} {row.median_position_m:>16.4f} "
            f"{row.median_orientation_deg:>17.4f}"
        )
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_all(n_draws=args.samples, seed=args.seed)
    ok = True
    for name, err in results.items():
        status = "ok" if err <= GRAD_CHECK_TOL else "FAIL"
        ok &= err <= GRAD_CHECK_TOL
        print(f"grad-check {name}: max_rel_err={err:.3e} [{status}]")
    if not ok:
        print("error[numeric]: gradient check exceeded tolerance", file=sys.stderr)
        return 3
    return 0


def cmd_compare_losses(args) -> int:
    settings = _Settings(args)
    scn, train_s, test_s, preset, _ = _build_scene_and_samples(settings)
    mcfg = model.RegressorConfig(input_dim=scn.observation_dim, seed=args.seed)
    tx, tq = metrics.DEFAULT_THRESHOLDS[preset]

    def fresh():
        return model.init(mcfg)

    rows = []

    beta_cfg = settings.train_config(_loss_spec(settings, "beta"))
    st = fresh()
    train_mod.train(st, train_s, beta_cfg)
    rows.append((f"beta={beta_cfg.loss.beta:g}", metrics.evaluate(st, test_s)))

    sigma_cfg = settings.train_config(_loss_spec(settings, "sigma"))
    st = fresh()
    train_mod.train(st, train_s, sigma_cfg)
    rows.append(("homoscedastic", metrics.evaluate(st, test_s)))

    iters2 = settings.get("iters2", sigma_cfg.max_iterations, int)
    reproj_cfg = replace(
        sigma_cfg, loss=_loss_spec(settings, "reproj"), max_iterations=iters2
    )
    st = fresh()
    train_mod.two_step_train(st, train_s, scn, sigma_cfg, reproj_cfg)
    rows.append(("two-step", metrics.evaluate(st, test_s)))

    path = _out(args, "compare_losses.csv")
    with open(path, "w", newline="\n") as fh:
        fh.write("loss,median_pos_err_m,median_ori_err_deg,accuracy\n")
        for name, rep in rows:
            fh.write(
                f"{name},{format(rep.median_position_m, '.17g')},"
                f"{format(rep.median_orientation_deg, '.17g')},"
                f"{format(rep.accuracy_at(tx, tq), '.17g')}\n"
            )
    acc_header = f"acc <{tx:g}m,{tq:g}deg [%]"
    print(f"{'loss':<16} {'median x [m]':>13} {'median q [deg]':>15} {acc_header:>20}")
    for name, rep in rows:
        print(
            f"{name:<16} {rep.median_position_m:>13.3f} "
            f"{rep.median_orientation_deg:>15.3f} {100 * rep.accuracy_at(tx, tq):>20.1f}"
        )
    return 0


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "seed", 0) < 0:
            raise _UsageError("--seed must be a nonnegative integer")
    except _UsageError as exc:
        print(f"error[usage]: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error[data]: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"error[numeric]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
