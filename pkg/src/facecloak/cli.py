"""``facecloak`` command-line tool.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from facecloak import evaluation, gallery, workflow
from facecloak.attacks import ATTACKS
from facecloak.core import FaceCloakError, NumericalError
from facecloak.embedding import (
    SetupMismatch,
    fr_setup_id,
    get_model,
    load_thresholds,
    save_thresholds,
)
from facecloak.preprocess import PreprocessSpec

log = logging.getLogger("facecloak")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _split(text: Optional[str]) -> list[str]:
    return [t for t in (text or "").split(",") if t]


def _load(directory) -> evaluation.Gallery:
    images, manifest = gallery.load_gallery(directory)
    run = gallery.read_run_manifest(directory)
    attack_id, spec = "clean", None
    if run is not None:
        attack_id = run["attack"] + ("+ens" if run["config"].get("ensemble_crops", 0) + run["config"].get("ensemble_resizes", 0) else "")
        spec = PreprocessSpec.from_dict(run["preprocess"])
    return evaluation.Gallery(images, manifest.identities, manifest.probes, attack_id, spec)


def _spec(args, detector=None, interpolation=None) -> PreprocessSpec:
    size = tuple(int(v) for v in args.size.split("x"))
    return PreprocessSpec(detector or args.detector, interpolation or args.interpolation, output_size=size)


def _setups(args) -> list[PreprocessSpec]:
    dets = _split(args.detector)
    interps = _split(args.interpolation)
    if not dets or not interps:
        raise UsageError("need at least one --detector and one --interpolation")
    return [_spec(args, d, i) for d in dets for i in interps]


def _write_text(path: Path, text: str) -> None:
    gallery._write_atomic(path, text.encode())


def cmd_synth(args) -> int:
    from facecloak.synthetic import make_faces

    faces = make_faces(args.identities, args.per_identity, size=args.image_size, seed=args.seed)
    images = {k: v[1] for k, v in faces.items()}
    manifest = gallery.GalleryManifest(
        f"synthetic-{args.seed}",
        tuple(gallery.Entry(k, faces[k][0]) for k in sorted(faces)),
        k=args.identities,
        m=args.per_identity,
        seed=args.seed,
    )
    manifest = gallery.select_probes(manifest)
    gallery.save_gallery(images, manifest, args.out)
    print(f"wrote {len(images)} images of {args.identities} identities to {args.out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    """Build a gallery from a CSV catalog of ``path,identity`` rows."""
    import csv

    import numpy as np
    from PIL import Image

    root = Path(args.catalog).parent
    rows = {}
    with open(args.catalog, newline="") as fh:
        for row in csv.DictReader(fh):
            rows[Path(row["path"]).stem] = (row["path"], row["identity"])
    manifest = gallery.stratified_sample(((k, v[1]) for k, v in rows.items()), args.k, args.m, args.seed, Path(args.catalog).stem)
    manifest = gallery.select_probes(manifest)
    images = {}
    for e in manifest.entries:
        with Image.open(root / rows[e.image_id][0]) as im:
            images[e.image_id] = np.asarray(im.convert("RGB"), dtype=np.uint8)
    gallery.save_gallery(images, manifest, args.out)
    print(f"sampled {len(images)} images of {args.k} identities into {args.out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    g = _load(args.gallery)
    model = get_model(args.model)
    thresholds = []
    for spec in _setups(args):
        t = workflow.calibrate(g, spec, model, args.far)
        thresholds.append(t)
        print(f"{t.fr_setup_id}\tfar={t.far_level}\tthreshold={t.value:.6f}")
    save_thresholds(args.out, thresholds)
    return EXIT_OK


def _attack_params(args):
    """Resolve the run from --replay or from flags > --config file > defaults."""
    if args.replay:
        doc = json.loads(Path(args.replay).read_text())
        kind, config, spec, model_id, pool = workflow.parse_run_manifest(doc)
        source = args.gallery or doc["source"]
        return kind, config, spec, model_id, pool, source
    if not args.gallery:
        raise UsageError("attack needs a gallery directory or --replay")
    file_cfg = json.loads(Path(args.config).read_text()) if args.config else {}
    pick = lambda name: getattr(args, name) if getattr(args, name) is not None else file_cfg.get(name)
    kind = pick("attack") or "mim"
    ensemble = args.ensemble or bool(file_cfg.get("ensemble"))
    crops = pick("crops") if pick("crops") is not None else 5
    resizes = pick("resizes") if pick("resizes") is not None else 4
    config = workflow.default_config(
        kind,
        epsilon=pick("epsilon"),
        iterations=pick("iterations"),
        momentum=pick("momentum"),
        gamma=pick("gamma"),
        seed=pick("seed"),
        num_targets=pick("targets"),
        ensemble_crops=crops if ensemble else 0,
        ensemble_resizes=resizes if ensemble else 0,
    )
    detector = pick("detector") or "center70"
    interp = pick("interpolation") or "area"
    spec = PreprocessSpec(detector, interp, output_size=tuple(int(v) for v in (pick("size") or "16x16").split("x")))
    pool = _split(pick("pool")) if ensemble else []
    if ensemble and config.ensemble_crops and len(pool) < config.ensemble_crops:
        raise UsageError(f"--ensemble with {config.ensemble_crops} crops needs a --pool of at least that many detectors")
    return kind, config, spec, pick("model") or "toy", pool, args.gallery


def cmd_attack(args) -> int:
    kind, config, spec, model_id, pool, source = _attack_params(args)
    images, manifest = gallery.load_gallery(source)
    adv, failures = workflow.attack_images(
        images, manifest.identities, kind, config, spec, model_id, pool, args.workers or workflow.default_workers()
    )
    if not adv:
        numeric = any(isinstance(e, NumericalError) for e in failures.values())
        print(f"all {len(failures)} attacks failed", file=sys.stderr)
        return EXIT_NUMERIC if numeric else EXIT_DATA
    out_manifest = replace(
        manifest,
        dataset_id=f"{manifest.dataset_id}:{kind}",
        entries=tuple(e for e in manifest.entries if e.image_id in adv),
    )
    run = workflow.run_manifest(kind, config, spec, model_id, str(Path(source).resolve()), pool)
    run["failed"] = sorted(failures)
    gallery.save_gallery(adv, out_manifest, args.out, run_manifest=run)
    print(f"{kind}: attacked {len(adv)} images, {len(failures)} failed -> {args.out}")
    return EXIT_OK


def _thresholds(path, setups, model_id):
    table = load_thresholds(path)
    out = {}
    for spec in setups:
        sid = fr_setup_id(spec, model_id)
        matches = [t for (s, _), t in table.items() if s == sid]
        if not matches:
            raise SetupMismatch(f"{path}: no threshold calibrated for FR setup {sid}")
        out[sid] = min(matches, key=lambda t: abs(t.far_level - 0.05))
    return out


def _matrix(args, setups) -> list:
    model = get_model(args.model)
    clean = _load(args.clean)
    advs = [_load(d) for d in args.galleries]
    cells = evaluation.build_transfer_matrix(advs, clean, setups, _thresholds(args.thresholds, setups, model.model_id), model)
    out = Path(args.out)
    _write_text(out / "cells.csv", evaluation.cells_to_csv(cells))
    _write_text(out / "summary.json", evaluation.summary(cells))
    return cells


def cmd_evaluate(args) -> int:
    setups = _setups(args)
    cells = _matrix(args, setups)
    model = get_model(args.model)
    clean = _load(args.clean)
    records = []
    for d in args.galleries:
        adv = _load(d)
        if adv.attack_spec is not None:
            records.append(evaluation.crop_shift_analysis(clean, adv, adv.attack_spec, model))
    if records:
        import csv
        import io
        from dataclasses import asdict, fields

        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=[f.name for f in fields(evaluation.CropShiftRecord)], lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in asdict(r).items()})
        _write_text(Path(args.out) / "crop_shift.csv", buf.getvalue())
    sys.stdout.write(evaluation.cells_to_csv(cells))
    return EXIT_OK


def cmd_matrix(args) -> int:
    cells = _matrix(args, _setups(args))
    sys.stdout.write(evaluation.render_grid(cells, "i1"))
    return EXIT_OK


def cmd_report(args) -> int:
    cells = evaluation.cells_from_csv(Path(args.cells).read_text())
    text = "\n".join(evaluation.render_grid(cells, m) for m in _split(args.metrics))
    if args.out:
        _write_text(Path(args.out), text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facecloak", description="Facial-privacy attacks and preprocessing-transfer benchmarks.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def fr_flags(sp, multi: bool):
        suffix = " (comma-separated)" if multi else ""
        sp.add_argument("--detector", default="center70", help="detector id" + suffix)
        sp.add_argument("--interpolation", default="area", help="interpolation method" + suffix)
        sp.add_argument("--model", default="toy")
        sp.add_argument("--size", default="16x16", help="model input size HxW")

    s = sub.add_parser("synth", help="write a synthetic clean gallery")
    s.add_argument("--identities", type=int, default=20)
    s.add_argument("--per-identity", type=int, default=10)
    s.add_argument("--image-size", type=int, default=16)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample", help="stratified gallery from a path,identity CSV catalog")
    s.add_argument("catalog")
    s.add_argument("--k", type=int, default=300)
    s.add_argument("--m", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("calibrate", help="FAR-calibrated thresholds per FR setup")
    s.add_argument("gallery")
    fr_flags(s, True)
    s.add_argument("--far", type=float, default=0.05)
    s.add_argument("--out", required=True, help="threshold JSON file (merged if it exists)")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("attack", help="attack every image of a gallery")
    s.add_argument("gallery", nargs="?")
    s.add_argument("--attack", choices=ATTACKS)
    s.add_argument("--detector")
    s.add_argument("--interpolation")
    s.add_argument("--model")
    s.add_argument("--size")
    s.add_argument("--epsilon", type=float)
    s.add_argument("--iterations", type=int)
    s.add_argument("--momentum", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--targets", type=int, help="TIP-IM target count")
    s.add_argument("--ensemble", action="store_true", help="average the loss over preprocessing variants")
    s.add_argument("--crops", type=int)
    s.add_argument("--resizes", type=int)
    s.add_argument("--pool", help="comma-separated detectors for crop variants")
    s.add_argument("--config", help="JSON file of flag defaults")
    s.add_argument("--replay", help="attack_run.json to replay")
    s.add_argument("--workers", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attack)

    for name, func, hlp in (
        ("evaluate", cmd_evaluate, "metrics and crop-shift records for adversarial galleries"),
        ("matrix", cmd_matrix, "transfer matrix over FR setups"),
    ):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("galleries", nargs="+")
        s.add_argument("--clean", required=True, help="clean gallery with the probes")
        fr_flags(s, True)
        s.add_argument("--thresholds", required=True)
        s.add_argument("--out", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("report", help="render a cells.csv as a grid")
    s.add_argument("cells")
    s.add_argument("--metrics", default="i1,i9,asr")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"facecloak: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"facecloak: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FaceCloakError, OSError, KeyError, ValueError) as exc:
        print(f"facecloak: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
