"""Command line front end.

Every subcommand reads an optional flat TOML config (``--config``), lets
command-line flags override it, validates the result, writes its outputs to
``--out-dir`` and saves the effective config there as ``config.toml``.

Exit codes: 0 success, 1 runtime or numerical failure, 2 invalid input or
configuration. Failures print one line ``correlreg: error: <kind>: <message>``
to stderr.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    # dictionary and sparse analogy
    patch_size: int = 15
    num_atoms: int = 900
    num_training_patches: int = 10000
    gamma: float = 0.01
    lam: float = 1.0
    dict_iters: int = 30
    stride: int = 1
    sdmm_sigma: float = 1.0
    sdmm_tol: float = 1e-5
    sdmm_max_iter: int = 500
    # nearest-neighbour analogy
    nn_levels: int = 3
    nn_patch_size: int = 5
    kappa: float = 1.0
    # landmarks
    threshold: str = "otsu"
    polarity: str = "bright"
    ratio_tol: float = 0.05
    min_area: int = 4
    max_area: int = 400
    # intensity registration
    metric: str = "ssd"
    bins: int = 32
    pyramid_levels: int = 3
    invert_moving: bool = False
    # evaluation
    pixel_size: float = 1.0

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.patch_size >= 2, "patch_size must be >= 2")
        need(self.num_atoms >= 1, "num_atoms must be >= 1")
        need(self.num_training_patches >= 1, "num_training_patches must be >= 1")
        need(self.gamma > 0, "gamma must be positive")
        need(self.lam > 0, "lambda must be positive")
        need(self.dict_iters >= 0, "dict_iters must be >= 0")
        need(self.stride >= 1, "stride must be >= 1")
        need(self.sdmm_sigma > 0, "sdmm_sigma must be positive")
        need(self.sdmm_tol > 0, "sdmm_tol must be positive")
        need(self.sdmm_max_iter >= 1, "sdmm_max_iter must be >= 1")
        need(self.nn_levels >= 1, "nn_levels must be >= 1")
        need(self.nn_patch_size >= 1 and self.nn_patch_size % 2 == 1, "nn_patch_size must be odd")
        need(self.kappa >= 0, "kappa must be >= 0")
        if self.threshold != "otsu":
            try:
                t = float(self.threshold)
            except ValueError:
                raise ConfigError("threshold must be 'otsu' or a number in [0, 1]") from None
            need(0 <= t <= 1, "threshold must lie in [0, 1]")
        need(self.polarity in ("bright", "dark"), "polarity must be 'bright' or 'dark'")
        need(self.ratio_tol > 0, "ratio_tol must be positive")
        need(1 <= self.min_area <= self.max_area, "need 1 <= min_area <= max_area")
        need(self.metric in ("ssd", "wssd", "mi"), "metric must be ssd, wssd or mi")
        need(self.bins >= 2, "bins must be >= 2")
        need(self.pyramid_levels >= 1, "pyramid_levels must be >= 1")
        need(self.pixel_size > 0, "pixel_size must be positive")

    @classmethod
    def from_toml(cls, path) -> "RunConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        return cls().updated(raw, str(path))

    def updated(self, values: dict, origin: str = "flags") -> "RunConfig":
        known = {f.name: f.type for f in fields(self)}
        out = asdict(self)
        for key, val in values.items():
            key = "lam" if key == "lambda" else key
            if key not in known:
                raise ConfigError(f"{origin}: unknown config key {key!r}")
            default = out[key]
            if isinstance(default, bool):
                if not isinstance(val, bool):
                    raise ConfigError(f"{origin}: {key} must be a boolean")
            elif isinstance(default, int):
                if isinstance(val, bool) or not isinstance(val, int):
                    raise ConfigError(f"{origin}: {key} must be an integer")
            elif isinstance(default, float):
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise ConfigError(f"{origin}: {key} must be a number")
                val = float(val)
            else:
                val = str(val)
            out[key] = val
        return RunConfig(**out)

    def to_toml(self) -> str:
        lines = []
        for key, val in asdict(self).items():
            key = "lambda" if key == "lam" else key
            if isinstance(val, bool):
                lines.append(f"{key} = {'true' if val else 'false'}")
            elif isinstance(val, (int, float)):
                lines.append(f"{key} = {val!r}")
            else:
                lines.append(f'{key} = "{val}"')
        return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# helpers


def _read_image(path):
    from .image import to_grayscale
    from .io import load_image, load_raw
    from .image import Image

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    if path.suffix == ".f64":
        return Image(load_raw(path))
    img = load_image(path)
    return to_grayscale(img) if img.channels != 1 else img


def _write_image(img, out: Path, stem: str, raw: bool = True) -> None:
    from .io import save_image, save_raw

    save_image(img, out / f"{stem}.png", bits=16 if img.channels == 1 else 8)
    if raw:
        save_raw(img.data, out / f"{stem}.f64")


def _overlay(target, points, marks) -> "object":
    import numpy as np
    from .image import Image

    rgb = np.repeat(np.clip(target.data, 0, 1)[:, :, None], 3, axis=2) * 0.6
    h, w = target.shape
    for pts, color in zip(points, marks):
        for x, y in np.asarray(pts).reshape(-1, 2):
            xi, yi = int(round(x)), int(round(y))
            for dy in range(-2, 3):
                for dx in range(-2, 3):
                    if (dx == 0 or dy == 0) and 0 <= yi + dy < h and 0 <= xi + dx < w:
                        rgb[yi + dy, xi + dx] = color
    return Image(rgb)


def _checkerboard(a, b, tiles: int = 8):
    import numpy as np
    from .image import Image

    h, w = a.shape
    yy, xx = np.mgrid[0:h, 0:w]
    sel = ((yy * tiles // h) + (xx * tiles // w)) % 2 == 0
    return Image(np.where(sel, a.data, b.data))


def _atom_mosaic(dictionary):
    import numpy as np
    from .image import Image

    p = dictionary.patch_size
    K = dictionary.K
    cols = int(np.ceil(np.sqrt(K)))
    rows = int(np.ceil(K / cols))
    tile = p + 1
    mosaic = np.ones((rows * tile + 1, 2 * cols * tile + 2))
    for half, d in enumerate((dictionary.d1, dictionary.d2)):
        x0 = half * (cols * tile + 1)
        for k in range(K):
            atom = d[:, k].reshape(p, p)
            span = np.ptp(atom)
            atom = (atom - atom.min()) / span if span > 0 else np.full_like(atom, 0.5)
            r, c = divmod(k, cols)
            mosaic[1 + r * tile:1 + r * tile + p, x0 + 1 + c * tile:x0 + 1 + c * tile + p] = atom
    return Image(mosaic)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth_data(args, cfg: RunConfig, out: Path) -> None:
    import numpy as np
    from .io import write_landmark_pairs_csv, write_landmarks_csv, save_raw
    from .synthetic import bead_scene, modality_pair
    from .transform import AffineTransform2D

    h = w = args.size
    if args.kind == "beads":
        t = AffineTransform2D.similarity(np.deg2rad(args.angle), args.scale, args.tx, args.ty,
                                         center=((w - 1) / 2, (h - 1) / 2))
        scene = bead_scene(args.n, (h, w), t, seed=cfg.seed, noise=args.noise)
        _write_image(scene.source, out, "source")
        _write_image(scene.target, out, "target")
        scene.transform.to_json(out / "transform_true.json")
        write_landmarks_csv(scene.source_points, out / "source_landmarks.csv")
        write_landmarks_csv(scene.target_points, out / "target_landmarks.csv")
        write_landmark_pairs_csv(scene.source_points, scene.target_points,
                                 out / "landmark_pairs.csv")
    else:
        a, ap = modality_pair((h, w), seed=cfg.seed, kind=args.modality)
        _write_image(a, out, "a")
        _write_image(ap, out, "a_prime")


def cmd_register_landmarks(args, cfg: RunConfig, out: Path) -> None:
    import numpy as np
    from .io import write_json
    from .landmarks import mean_residual, register_landmarks

    target, source = _read_image(args.target), _read_image(args.source)
    thr = cfg.threshold if cfg.threshold == "otsu" else float(cfg.threshold)
    reg = register_landmarks(target, source, thr, cfg.polarity, cfg.ratio_tol,
                             cfg.min_area, cfg.max_area)
    pairs = reg.inlier_pairs
    write_json({
        "transform": reg.transform.to_list(),
        "initial_transform": reg.initial.transform.to_list(),
        "initial_median_error": reg.initial.median_error,
        "num_source_landmarks": len(reg.source),
        "num_target_landmarks": len(reg.target),
        "num_inliers": int(len(pairs)),
        "mean_inlier_residual": mean_residual(reg.transform, reg.source.points,
                                              reg.target.points, pairs) if len(pairs) else None,
    }, out / "landmark_registration.json")
    reg.transform.to_json(out / "transform.json")
    mapped = reg.transform.apply(reg.source.points)
    img = _overlay(target, [reg.target.points, mapped], [(0.0, 1.0, 0.0), (1.0, 0.0, 0.0)])
    _write_image(img, out, "overlay", raw=False)


def cmd_train_dict(args, cfg: RunConfig, out: Path) -> None:
    import csv
    from .analogy import AnalogyTrainingPair, train_joint_dictionary

    pairs = [AnalogyTrainingPair(_read_image(a), _read_image(b)) for a, b in args.pair]
    d, _, hist = train_joint_dictionary(
        pairs, cfg.patch_size, cfg.num_atoms, cfg.lam, num_patches=cfg.num_training_patches,
        seed=cfg.seed, outer_iters=cfg.dict_iters, sigma=cfg.sdmm_sigma, tol=cfg.sdmm_tol,
        inner_iters=cfg.sdmm_max_iter)
    d.save(out / "dictionary.bin")
    with open(out / "energy.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "energy"])
        for i, e in enumerate(hist.energy):
            wr.writerow([i, repr(float(e))])
    _write_image(_atom_mosaic(d), out, "atoms", raw=False)


def cmd_synthesize(args, cfg: RunConfig, out: Path) -> None:
    from .analogy import AnalogyTrainingPair, synthesize_nn, synthesize_sparse
    from .io import write_json
    from .sparse.dictionary import JointDictionary

    b = _read_image(args.input)
    if args.method == "nn":
        if not args.train:
            raise ConfigError("nn synthesis needs --train A A_PRIME")
        pair = AnalogyTrainingPair(_read_image(args.train[0]), _read_image(args.train[1]))
        pred = synthesize_nn(pair, b, cfg.nn_levels, cfg.nn_patch_size, cfg.kappa)
        _write_image(pred, out, "prediction")
        return
    if not args.dict:
        raise ConfigError("sparse synthesis needs --dict")
    d = JointDictionary.load(args.dict)
    if d.patch_size != cfg.patch_size:
        cfg.patch_size = d.patch_size
    den, pred, rep = synthesize_sparse(d, b, cfg.gamma, cfg.lam, cfg.stride,
                                       return_report=True, sigma=cfg.sdmm_sigma,
                                       tol=cfg.sdmm_tol, max_iter=cfg.sdmm_max_iter)
    _write_image(pred, out, "prediction")
    _write_image(den, out, "denoised")
    write_json({"iterations": rep.iterations, "converged": rep.converged,
                "final_residual": rep.final_residual, "final_energy": rep.final_energy},
               out / "solver_report.json")


def cmd_register(args, cfg: RunConfig, out: Path) -> None:
    from .image import Image
    from .registration import RegistrationConfig, register_affine, warp
    from .transform import AffineTransform2D

    fixed, moving = _read_image(args.fixed), _read_image(args.moving)
    if cfg.invert_moving:
        moving = Image(1.0 - moving.data, moving.pixel_size)
    weights = None
    if cfg.metric == "wssd":
        if not args.weights:
            raise ConfigError("metric wssd needs --weights")
        weights = _read_image(args.weights).data.clip(0.0, 1.0)
    init = AffineTransform2D.from_json(args.init) if args.init else None
    rc = RegistrationConfig(levels=cfg.pyramid_levels, bins=cfg.bins)
    res = register_affine(moving, fixed, cfg.metric, init, rc, weights)
    res.to_json(out / "registration.json")
    res.transform.to_json(out / "transform.json")
    warped, _ = warp(moving, res.transform, fixed.shape)
    _write_image(warped, out, "warped")
    _write_image(_checkerboard(fixed, warped), out, "checkerboard", raw=False)


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> None:
    from .io import read_landmark_pairs_csv
    from .registration import evaluate_landmarks
    from .transform import AffineTransform2D

    t = AffineTransform2D.from_json(args.transform)
    src, tgt = read_landmark_pairs_csv(args.pairs)
    rep = evaluate_landmarks(t, src, tgt, cfg.pixel_size)
    rep.to_json(out / "evaluation.json")
    rep.to_csv(out / "evaluation.csv")
    print(f"MAE {rep.mae:.6g} STD {rep.std:.6g} (n={len(rep.per_landmark_errors)})")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "register-landmarks": cmd_register_landmarks,
    "train-dict": cmd_train_dict,
    "synthesize": cmd_synthesize,
    "register": cmd_register,
    "evaluate": cmd_evaluate,
}

# flag name -> config key, for flags that override config values
_OVERRIDES = ["patch_size", "num_atoms", "num_training_patches", "gamma", "lam", "dict_iters",
              "stride", "sdmm_sigma", "sdmm_tol", "sdmm_max_iter", "nn_levels",
              "nn_patch_size", "kappa", "threshold", "polarity", "ratio_tol", "min_area",
              "max_area", "metric", "bins", "pyramid_levels", "invert_moving", "pixel_size"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat TOML config file")
    common.add_argument("--out-dir", default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="limit BLAS/OpenMP threads")

    parser = argparse.ArgumentParser(prog="correlreg", parents=[common],
                                     description="Multi-modal registration for correlative microscopy.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", parents=[common], help="generate synthetic test data")
    p.add_argument("--kind", choices=["beads", "modality_pair"], default="beads")
    p.add_argument("--n", type=int, default=20, help="number of beads")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--angle", type=float, default=0.0, help="rotation in degrees")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--tx", type=float, default=0.0)
    p.add_argument("--ty", type=float, default=0.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--modality", choices=["inversion", "contrast", "bandpass"],
                   default="inversion")

    p = sub.add_parser("register-landmarks", parents=[common], help="fiducial-based registration")
    p.add_argument("target")
    p.add_argument("source")
    p.add_argument("--threshold", default=None)
    p.add_argument("--polarity", choices=["bright", "dark"], default=None)
    p.add_argument("--ratio-tol", dest="ratio_tol", type=float, default=None)
    p.add_argument("--min-area", dest="min_area", type=int, default=None)
    p.add_argument("--max-area", dest="max_area", type=int, default=None)

    p = sub.add_parser("train-dict", parents=[common], help="learn a joint dictionary")
    p.add_argument("--pair", nargs=2, action="append", required=True, metavar=("A", "A_PRIME"))
    p.add_argument("--patch-size", dest="patch_size", type=int, default=None)
    p.add_argument("--num-atoms", dest="num_atoms", type=int, default=None)
    p.add_argument("--num-patches", dest="num_training_patches", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--iters", dest="dict_iters", type=int, default=None)

    p = sub.add_parser("synthesize", parents=[common], help="predict the other modality")
    p.add_argument("input")
    p.add_argument("--method", choices=["nn", "sparse"], default="sparse")
    p.add_argument("--dict", default=None)
    p.add_argument("--train", nargs=2, default=None, metavar=("A", "A_PRIME"))
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--stride", type=int, default=None)
    p.add_argument("--max-iter", dest="sdmm_max_iter", type=int, default=None)
    p.add_argument("--tol", dest="sdmm_tol", type=float, default=None)
    p.add_argument("--kappa", type=float, default=None)
    p.add_argument("--levels", dest="nn_levels", type=int, default=None)
    p.add_argument("--nn-patch-size", dest="nn_patch_size", type=int, default=None)

    p = sub.add_parser("register", parents=[common], help="intensity-based affine registration")
    p.add_argument("fixed")
    p.add_argument("moving")
    p.add_argument("--metric", choices=["ssd", "wssd", "mi"], default=None)
    p.add_argument("--weights", default=None, help="confidence map for wssd")
    p.add_argument("--init", default=None, help="initial transform JSON")
    p.add_argument("--bins", type=int, default=None)
    p.add_argument("--levels", dest="pyramid_levels", type=int, default=None)
    p.add_argument("--invert-moving", dest="invert_moving", action="store_true", default=None)

    p = sub.add_parser("evaluate", parents=[common], help="landmark MAE/STD of a transform")
    p.add_argument("--transform", required=True)
    p.add_argument("--pairs", required=True, help="CSV id,src_x,src_y,tgt_x,tgt_y")
    p.add_argument("--pixel-size", dest="pixel_size", type=float, default=None)
    return parser


def _error(kind: str, exc: BaseException, code: int) -> int:
    msg = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"correlreg: error: {kind}: {msg}", file=sys.stderr)
    return code


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    threads = getattr(args, "threads", None)
    if threads is not None:
        if threads < 1:
            return _error("config", ConfigError("--threads must be >= 1"), 2)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)

    # heavy imports happen after the thread limits are set
    from .image import ImageError
    from .landmarks import LandmarkError
    from .sparse.dictionary import DeadAtomsError
    from .sparse.sdmm import DivergenceError
    from .transform import SingularTransformError

    out = Path(getattr(args, "out_dir", "."))
    try:
        cfg = RunConfig.from_toml(args.config) if getattr(args, "config", None) else RunConfig()
        flags = {k: getattr(args, k) for k in _OVERRIDES if getattr(args, k, None) is not None}
        if hasattr(args, "seed"):
            flags["seed"] = args.seed
        cfg = cfg.updated(flags)
        cfg.validate()
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](args, cfg, out)
        (out / "config.toml").write_text(cfg.to_toml())
    except ConfigError as exc:
        return _error("config", exc, 2)
    except LandmarkError as exc:
        return _error("landmarks", exc, 2)
    except SingularTransformError as exc:
        return _error("transform", exc, 2)
    except DeadAtomsError as exc:
        return _error("dictionary", exc, 1)
    except (ImageError, ValueError) as exc:
        return _error("input", exc, 2)
    except FileNotFoundError as exc:
        return _error("io", exc, 2)
    except DivergenceError as exc:
        return _error("numerical", exc, 1)
    except OSError as exc:
        return _error("io", exc, 1)
    except (RuntimeError, ArithmeticError) as exc:
        return _error("runtime", exc, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
