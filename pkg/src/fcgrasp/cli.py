"""Command line entry points: ``synth``, ``metrics`` and ``heatmap``.

Every option can also come from a TOML or JSON file given with
``--config``; flags on the command line win over the file.
"""

from __future__ import annotations

import argparse
import functools
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import geometry, metrics
from .energy import EnergyWeights
from .gripper import Grasp, initialize_grasps, load_gripper_spec
from .optimizer import MalaConfig, GraspProblem, optimize, write_trace_csv

log = logging.getLogger("fcgrasp")

BUILTIN_OBJECTS = ("sphere", "cube")
ENERGIES = ("graspqp", "graspqp-no-exp", "dexgraspnet", "gendexgrasp", "constrained-ii", "barrier")
QP_FLAG_WARN_FRACTION = 0.01
EXIT_OK, EXIT_USAGE, EXIT_FLAGGED, EXIT_DATA = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    """Unreadable or empty dataset."""


@dataclass
class RunConfig:
    object: str = "sphere"
    gripper: str = "parallel-2f"
    taxonomy: str = "power"
    seeds: int = 32
    n_contacts: int = 4
    energy: str = "graspqp"
    optimizer: str = "mala-star"
    friction: float = 0.2
    gamma_max: float = 50.0
    torque_weight: float = 5.0
    seed: int = 0
    out: str = "out"
    forces: list = field(default_factory=lambda: list(metrics.FORCE_LEVELS))
    mala: dict = field(default_factory=dict)  # MalaConfig overrides

    def validate(self):
        if self.seeds < 1:
            raise ConfigError("seeds must be >= 1")
        if self.energy not in ENERGIES:
            raise ConfigError(f"unknown energy {self.energy!r}")
        if self.optimizer not in ("mala", "mala-star"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.object not in BUILTIN_OBJECTS and not Path(self.object).is_file():
            raise ConfigError(f"object file not found: {self.object}")
        if self.gripper not in ("parallel-2f", "trifinger") and not Path(self.gripper).is_file():
            raise ConfigError(f"gripper file not found: {self.gripper}")
        if not self.forces or min(self.forces) < 0:
            raise ConfigError("forces must be a non-empty list of non-negative values")

    def weights(self):
        return EnergyWeights(mu=self.friction, upper=self.gamma_max, torque_weight=self.torque_weight,
                             variant=self.energy)

    def mala_config(self):
        star = self.optimizer == "mala-star"
        return MalaConfig(**{"enable_resets": star, "enable_adaptive_temp": star, **self.mala})


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def load_config_file(path):
    path = Path(path)
    text = path.read_bytes()
    if path.suffix.lower() == ".json":
        data = json.loads(text)
    else:
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        data = tomllib.loads(text.decode("utf-8"))
    return {k.replace("-", "_"): v for k, v in data.items()}


@functools.lru_cache(maxsize=4)
def load_object(spec, sdf_spacing=None):
    if spec == "sphere":
        mesh = geometry.icosphere(1.0, 3)
    elif spec == "cube":
        mesh = geometry.box_mesh((1.0, 1.0, 1.0))
    else:
        mesh = geometry.load_mesh(spec)
    mesh = geometry.normalize_object_scale(mesh)
    return geometry.prepare_object(mesh, sdf_spacing, name=Path(spec).stem)


# ---------------------------------------------------------------------------
# dataset rows


def record_row(chain_id, grasp, breakdown, stability, cap, com, joint_types, disc):
    rel = grasp.translation - com
    first = stability[min(stability)]
    return {
        "chain_id": int(chain_id),
        "pose": {"t": grasp.translation.tolist(), "quat": grasp.quat.tolist()},
        "q": grasp.q.tolist(),
        "contacts": grasp.contacts.tolist(),
        "energies": {k: float(v) for k, v in breakdown.as_dict().items()},
        "flags": sorted(breakdown.flags),
        "stability": {"succ1": first["succ1"], "succ3": first["succ3"], "per_axis": first["per_axis"],
                      "capacity": cap},
        "key": list(metrics.grasp_key(rel, grasp.quat, grasp.q, disc, joint_types)),
    }


def write_jsonl(path, header, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True) + "\n")
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_dataset(path):
    header, rows = None, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if "header" in obj:
                header = obj["header"]
                continue
            for key in ("pose", "q", "contacts"):
                if key not in obj:
                    raise DataError(f"{path}:{lineno}: row lacks {key!r}")
            rows.append(obj)
    if header is None:
        raise DataError(f"{path}: missing header line")
    return header, rows


def row_grasp(row):
    return Grasp(np.array(row["pose"]["t"]), np.array(row["pose"]["quat"]), np.array(row["q"]),
                 np.array(row["contacts"]))


# ---------------------------------------------------------------------------
# commands


def run_synthesis(cfg):
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_gripper_spec(cfg.gripper)
    obj = load_object(cfg.object)
    weights = cfg.weights()
    mcfg = cfg.mala_config()
    batch = initialize_grasps(model, obj, cfg.seeds, cfg.taxonomy, cfg.seed, cfg.n_contacts)
    problem = GraspProblem(model, obj, weights, batch)
    res = optimize(problem, mcfg)

    header = {"config": asdict(cfg), "mala": asdict(mcfg), "weights": weights.as_dict(),
              "git": git_describe(), "seed": cfg.seed, "object": cfg.object, "gripper": cfg.gripper,
              "taxonomy": cfg.taxonomy,
              "stability_note": "success from the LP disturbance surrogate, not a physics simulator"}
    disc = metrics.DiscretizationConfig()
    rows = []
    for i, c in enumerate(res.chains):
        st, cap = metrics.grasp_stability(model, obj, c.state, weights.mu, weights.upper, weights.torque_weight,
                                          cfg.forces)
        rows.append(record_row(i, c.state, c.breakdown, st, cap, obj.com, model.joint_types, disc))
    write_jsonl(out / "dataset.jsonl", header, rows)
    write_trace_csv(res.trace, out / "trace.csv")
    report = metrics_report(header, rows, model, obj, cfg.forces, weights)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)

    pairs = max(res.n_evals, 1)
    frac = res.n_flagged_evals / pairs
    if frac > QP_FLAG_WARN_FRACTION:
        log.error("QP did not converge on %.2f%% of evaluations", 100 * frac)
        return EXIT_FLAGGED
    if res.n_flagged_evals:
        log.warning("QP did not converge on %d of %d evaluations", res.n_flagged_evals, pairs)
    return EXIT_OK


def metrics_report(header, rows, model, obj, forces, weights):
    if not rows:
        raise DataError("dataset has no grasps")
    disc = metrics.DiscretizationConfig()
    grasps = [row_grasp(r) for r in rows]
    caps = []
    for g in grasps:
        _, cap = metrics.grasp_stability(model, obj, g, weights.mu, weights.upper, weights.torque_weight, forces)
        caps.append(cap)
    forces = sorted(float(f) for f in forces)
    ugr, s1, s3 = [], [], []
    records_at = {}
    for f in forces:
        st = [metrics.stability_from_capacities(c, [f])[f] for c in caps]
        recs = [metrics.GraspRecord(g.translation - obj.com, g.quat, g.q, success=s["succ1"]) for g, s in zip(grasps, st)]
        records_at[f] = recs
        ugr.append(metrics.unique_grasp_rate(recs, disc, model.joint_types))
        s1.append(sum(s["succ1"] for s in st))
        s3.append(sum(s["succ3"] for s in st))
    recs = records_at[forces[0]]
    if any(r.success for r in recs):
        ent = metrics.entropy(recs, model.lower, model.upper, disc).as_dict()
    else:
        ent = {"q": 0.0, "pos": 0.0, "rot": 0.0, "total": 0.0}
    pen = metrics.penetration_depth([metrics.GraspRecord(g.translation - obj.com, g.quat, g.q) for g in grasps],
                                    obj, model)
    return {"object": header.get("object"), "gripper": header.get("gripper"), "taxonomy": header.get("taxonomy"),
            "n_grasps": len(rows), "ugr": ugr, "entropy": ent, "penetration_m": pen, "succ1": s1, "succ3": s3,
            "force_levels": forces, "git": header.get("git"), "seed": header.get("seed"),
            "config": header.get("config"),
            "stability_note": "success from the LP disturbance surrogate, not a physics simulator"}


def run_metrics(dataset, forces, out=None):
    header, rows = read_dataset(dataset)
    if not rows:
        raise DataError(f"{dataset}: dataset has no grasps")
    model = load_gripper_spec(header["gripper"])
    obj = load_object(header["object"])
    w = header.get("weights", {})
    weights = EnergyWeights(mu=w.get("mu", 0.2), upper=w.get("upper", 50.0),
                            torque_weight=w.get("torque_weight", 5.0))
    report = metrics_report(header, rows, model, obj, forces, weights)
    if out:
        with open(out, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return report


def run_heatmap(dataset, object_spec, out):
    header, rows = read_dataset(dataset)
    if not rows:
        raise DataError(f"{dataset}: dataset has no grasps")
    model = load_gripper_spec(header["gripper"])
    obj = load_object(object_spec or header["object"])
    values = metrics.contact_heatmap([row_grasp(r) for r in rows], obj.mesh, model)
    metrics.write_heatmap(values, out)
    return values


# ---------------------------------------------------------------------------
# argument parsing


def _float_list(s):
    return [float(x) for x in s.replace(",", " ").split()]


def build_parser():
    p = argparse.ArgumentParser(prog="fcgrasp", description="Force-closure grasp synthesis toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="synthesize grasps")
    s.add_argument("--config", help="TOML or JSON file with default options")
    s.add_argument("--object", help="OBJ file, or 'sphere' / 'cube'")
    s.add_argument("--gripper", help="gripper JSON, or a bundled name")
    s.add_argument("--taxonomy", choices=("power", "pinch", "precision"))
    s.add_argument("--seeds", type=int)
    s.add_argument("--n-contacts", type=int)
    s.add_argument("--steps", type=int)
    s.add_argument("--energy", choices=ENERGIES)
    s.add_argument("--optimizer", choices=("mala", "mala-star"))
    s.add_argument("--friction", type=float)
    s.add_argument("--gamma-max", type=float)
    s.add_argument("--torque-weight", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--forces", type=_float_list)
    s.add_argument("--step-trans", type=float)
    s.add_argument("--step-rot", type=float)
    s.add_argument("--step-q", type=float)
    s.add_argument("--step-decay", type=float)
    s.add_argument("--t-start", type=float)
    s.add_argument("--t-end", type=float)
    s.add_argument("--n-reset", type=int)
    s.add_argument("--p-switch", type=float)

    m = sub.add_parser("metrics", help="recompute metrics of a dataset")
    m.add_argument("--dataset", required=True)
    m.add_argument("--forces", type=_float_list, default=list(metrics.FORCE_LEVELS))
    m.add_argument("--out")

    h = sub.add_parser("heatmap", help="per-vertex contact heatmap")
    h.add_argument("--dataset", required=True)
    h.add_argument("--object")
    h.add_argument("--out", required=True)
    return p


MALA_KEYS = ("steps", "step_trans", "step_rot", "step_q", "step_decay", "step_decay_period", "t_start", "t_end", "n_reset",
             "p_switch")


def synth_config(args):
    """Merge defaults, the config file and explicit flags (in that order)."""
    data = load_config_file(args.config) if args.config else {}
    mala = dict(data.pop("mala", {}))
    for k in MALA_KEYS:
        if k in data:
            mala[k] = data.pop(k)
    for k, v in vars(args).items():
        if v is None or k in ("config", "command", "verbose"):
            continue
        if k in MALA_KEYS:
            mala[k] = v
        else:
            data[k] = v
    known = set(RunConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    return RunConfig(**data, mala=mala)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            return run_synthesis(synth_config(args))
        if args.command == "metrics":
            report = run_metrics(args.dataset, args.forces, args.out)
            if not args.out:
                print(json.dumps(report, indent=2, sort_keys=True))
            return EXIT_OK
        if args.command == "heatmap":
            run_heatmap(args.dataset, args.object, args.out)
            return EXIT_OK
    except (DataError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"fcgrasp: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ConfigError, geometry.MeshError, ValueError) as exc:
        print(f"fcgrasp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
