"""Command-line entry point: ``dpiprint <command> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import yaml

from . import __version__
from .analyzer import SignatureStore, analyze, read_fingerprints_json, write_fingerprints_json, write_verdicts_csv
from .appmsg import DomainPair
from .builtin import baseline_probe, load_builtin
from .generate import generate_all, load_probe_set, manifest_hash, write_probe_set
from .netsim.zoo import dump_zoo, load_zoo, noiseless, profile_to_dict, zoo_default, zoo_signatures
from .probe import TargetSpec, dump_targets, load_targets

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _fresh(path: Path) -> Path:
    """Campaign outputs are never overwritten."""
    if path.exists():
        raise UsageError(f"{path} already exists; choose another campaign id or output directory")
    return path


# -- probe sets -------------------------------------------------------------


def resolve_probes(source: str, protocols) -> list:
    """``builtin:http``, a probe directory or YAML file, or a selection JSON naming generated ids."""
    if source.startswith("builtin:"):
        return load_builtin(source.split(":", 1)[1])
    path = Path(source)
    if not path.exists():
        raise UsageError(f"probe set {source!r} not found")
    if path.suffix == ".json" and path.is_file():
        ids = json.loads(path.read_text(encoding="utf-8"))["probes"]
        pool = {}
        for proto in protocols:
            for c in generate_all(proto):
                pool.setdefault(c.probe.id, c.probe)
        missing = [i for i in ids if i not in pool]
        if missing:
            raise UsageError(f"selection names unknown probes: {missing[:3]}")
        return [pool[i] for i in ids]
    return load_probe_set(path)


def _zoo_from(args) -> list:
    return load_zoo(args.zoo) if getattr(args, "zoo", None) else zoo_default()


# -- commands ---------------------------------------------------------------


def cmd_generate(args) -> int:
    cands = generate_all(args.protocol)
    doc = write_probe_set(Path(args.out), args.protocol, cands)
    print(f"wrote {doc['count']} {args.protocol} probes to {args.out} (manifest sha256 {manifest_hash(doc)[:16]})")
    return EXIT_OK


def cmd_select(args) -> int:
    from .selection import SelectionParams, distance_curve, read_matrix_csv, select, write_curve_csv, write_selection

    matrix = read_matrix_csv(args.matrix)
    if not matrix.groups or not matrix.probes:
        raise UsageError("outcome matrix is empty")
    params = SelectionParams(args.theta, args.cutoff, args.max_probes)
    chosen = select(matrix, params)
    write_selection(Path(args.out), chosen, params, matrix)
    if args.curve:
        write_curve_csv(args.curve, distance_curve(matrix, chosen))
    print(f"selected {len(chosen)} of {len(matrix.probes)} probes (theta={params.phi_threshold})")
    return EXIT_OK


def _world(args, targets, zoo) -> dict:
    by_id = {p.id: p for p in zoo}
    if args.world:
        doc = yaml.safe_load(Path(args.world).read_text(encoding="utf-8")) or {}
        known = {t.key for t in targets} | {t.address for t in targets}
        stray = sorted(k for k in doc if k not in known)
        if stray:
            raise UsageError(f"world file names unknown targets {stray[:3]}")
        world = {}
        for t in targets:
            ids = doc.get(t.key, doc.get(t.address, []))
            ids = [ids] if isinstance(ids, str) else ids
            unknown = [i for i in ids if i not in by_id]
            if unknown:
                raise UsageError(f"world file names unknown profiles {unknown}")
            world[t.key] = [by_id[i] for i in ids]
        return world
    plain = noiseless(zoo)
    return {t.key: [plain[i % len(plain)]] for i, t in enumerate(targets)}


def cmd_probe(args) -> int:
    from .prober import CampaignPlan, RawTransport, export_pcaps, preflight, run_campaign, sim_transport_factory, write_jsonl

    targets = load_targets(args.targets)
    if not targets:
        raise UsageError("target list is empty")
    probes = resolve_probes(args.probes, sorted({t.protocol for t in targets}))
    if args.appended_control:
        from dataclasses import replace

        probes = [replace(p, append_control_request=True) for p in probes]
    out = Path(args.out) / f"campaign-{args.campaign_id or args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    records_path = _fresh(out / "records.jsonl")
    delay = args.delay if args.delay is not None else 120.0
    plan = CampaignPlan(targets, probes, repetitions=args.repetitions, inter_probe_delay=delay, seed=args.seed,
                        baseline=baseline_probe(), parallelism=args.parallelism)
    if args.transport == "raw":
        failed = [name for name, ok, _ in preflight() if ok is False]
        if failed:
            print(f"preflight failed: {', '.join(failed)}; run 'dpiprint preflight' for details", file=sys.stderr)
            return EXIT_RUNTIME
        if not args.source:
            raise UsageError("--source is required with --transport raw")
        factory = lambda t: RawTransport(args.source, t.address)  # noqa: E731
    else:
        zoo = _zoo_from(args)
        world = _world(args, targets, zoo)
        _write_json(out / "world.json", {k: [p.id for p in v] for k, v in world.items()})
        factory = sim_transport_factory(world, seed=args.seed)
    records = list(run_campaign(plan, factory))
    n = write_jsonl(records_path, records)
    if args.pcap:
        export_pcaps(out / "pcap", records)
    print(f"wrote {n} records to {records_path}")
    return EXIT_OK


def _signatures(args) -> SignatureStore:
    store = SignatureStore(zoo_signatures(_zoo_from(args)))
    if getattr(args, "signatures", None):
        store = store.merged(SignatureStore.load(args.signatures))
    return store


def cmd_analyze(args) -> int:
    from .prober import read_jsonl
    from .selection import matrix_from_verdicts, write_matrix_csv

    records = read_jsonl(args.records)
    result = analyze(records, _signatures(args), repetitions=args.repetitions)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_verdicts_csv(out / "verdicts.csv", result)
    fps = result.fingerprints()
    write_fingerprints_json(out / "fingerprints.json", fps)
    meta = {k: t.meta() for k, t in result.targets.items()}
    _write_json(out / "targets.json", meta)
    if args.groups:
        groups_doc = json.loads(Path(args.groups).read_text(encoding="utf-8"))
        groups = {k: (v[0] if isinstance(v, list) else v) for k, v in groups_doc.items() if v}
        write_matrix_csv(out / "matrix.csv", matrix_from_verdicts(result.verdicts, groups, result.probes))
    print(f"{len(fps)} fingerprints over {len(result.probes)} probes written to {out}")
    return EXIT_OK


def _load_meta(path) -> dict:
    if not path:
        return {}
    p = Path(path)
    if p.suffix == ".json":
        return json.loads(p.read_text(encoding="utf-8"))
    return {t.key: t.meta() for t in load_targets(p)}


def cmd_cluster(args) -> int:
    from .analytics import cluster, mds_2d, scoped_distributions, write_clusters_csv, write_histograms_csv, write_mds_csv

    fps = read_fingerprints_json(args.fingerprints)
    if args.probes:
        ids = json.loads(Path(args.probes).read_text(encoding="utf-8"))["probes"]
        idx = [fps[0].probes.index(i) for i in ids]
        from .analyzer import Fingerprint

        fps = [Fingerprint(fp.target, tuple(ids), tuple(fp.bits[i] for i in idx)) for fp in fps]
    meta = _load_meta(args.metadata)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = cluster(fps, args.min_cluster_size, method=args.method, linkage_threshold=args.threshold, metadata=meta)
    write_clusters_csv(out / "clusters.csv", result)
    _write_json(out / "rollups.json", {str(k): v for k, v in result.rollups.items()})
    if len(fps) >= 3:
        coords, degenerate = mds_2d(fps)
        write_mds_csv(out / "mds.csv", coords)
        if degenerate:
            print("all fingerprints identical; MDS collapsed to the origin", file=sys.stderr)
    write_histograms_csv(out / "histograms.csv", scoped_distributions(fps, meta))
    print(f"{result.n_clusters} clusters, {result.n_noise} noise points")
    return EXIT_OK


def _read_csv_rows(path) -> list:
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(args) -> int:
    from . import report

    src = Path(args.input)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    labels = {r["target"]: int(r["cluster"]) for r in _read_csv_rows(src / "clusters.csv")} \
        if (src / "clusters.csv").exists() else {}
    made = []
    if (src / "mds.csv").exists():
        coords = {r["target"]: (float(r["x"]), float(r["y"])) for r in _read_csv_rows(src / "mds.csv")}
        report.mds_scatter(out / "mds.svg", coords, labels)
        made.append("mds.svg")
    if (src / "histograms.csv").exists():
        rows = _read_csv_rows(src / "histograms.csv")
        scopes = [k for k in rows[0] if k != "distance"] if rows else []
        hists = {s: [float(r[s]) for r in rows if r[s] != ""] for s in scopes}
        report.distance_histograms(out / "distances.svg", hists)
        made.append("distances.svg")
    curve = Path(args.curve) if args.curve else src / "curve.csv"
    if curve.exists():
        rows = _read_csv_rows(curve)
        report.distance_curve(out / "curve.svg", [(int(r["n"]), int(r["min"]), float(r["mean"])) for r in rows])
        made.append("curve.svg")
    if not made:
        raise UsageError(f"nothing to report in {src}")
    print(f"wrote {', '.join(made)} to {out}")
    return EXIT_OK


def cmd_zoo(args) -> int:
    if args.action == "list":
        for p in _zoo_from(args):
            noise = f" fail_open={p.fail_open_probability}" if p.fail_open_probability else ""
            print(f"{p.id:18s} {p.deployment:7s} {p.blocking_action:16s}{noise}")
    elif args.action == "show":
        print(yaml.safe_dump([profile_to_dict(p) for p in _zoo_from(args)], sort_keys=False), end="")
    elif args.action == "export":
        if not args.file:
            raise UsageError("zoo export needs a file name")
        dump_zoo(args.file, zoo_default())
        print(f"wrote {args.file}")
    elif args.action == "validate":
        if not args.file:
            raise UsageError("zoo validate needs a file name")
        profiles = load_zoo(args.file)
        print(f"{len(profiles)} profiles OK")
    return EXIT_OK


def cmd_preflight(args) -> int:
    from .prober import preflight

    bad = False
    for name, ok, note in preflight():
        mark = {True: "ok  ", False: "FAIL", None: "note"}[ok]
        bad |= ok is False
        print(f"[{mark}] {name}: {note}")
    return EXIT_RUNTIME if bad else EXIT_OK


def demo_targets(zoo, per_profile: int, protocol: str = "http") -> tuple:
    targets, world = [], {}
    for i, p in enumerate(noiseless(zoo)):
        for j in range(per_profile):
            meta = (("netblock", f"198.{18 + i}.{j // 8}.0/24"), ("asn", f"AS{64500 + i}"), ("country", "ZZ"))
            t = TargetSpec(f"198.{18 + i}.{j // 8}.{10 + j % 8}", 80 if protocol == "http" else 443, protocol,
                           DomainPair("ok.test", "blocked.test"), meta)
            targets.append(t)
            world[t.key] = [p.id]
    return targets, world


def cmd_demo(args) -> int:
    """Whole pipeline against the default zoo, written under one directory."""
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"{out} is not empty")
    out.mkdir(parents=True, exist_ok=True)
    zoo = zoo_default()
    dump_zoo(out / "zoo.yaml", zoo)
    steps = []
    gen = argparse.Namespace(protocol="http", out=str(out / "generated" / "http"))
    steps.append(("generate", cmd_generate, gen))
    targets, world = demo_targets(zoo, args.targets_per_profile)
    (out / "targets.csv").write_text(dump_targets(targets), encoding="utf-8")
    _write_json(out / "world.json", {k: v for k, v in world.items()})
    probe = argparse.Namespace(
        targets=str(out / "targets.csv"), probes="builtin:http", out=str(out), campaign_id="demo", seed=args.seed,
        repetitions=args.repetitions, delay=None, parallelism=1, transport="sim", zoo=str(out / "zoo.yaml"),
        world=str(out / "world.json"), pcap=False, appended_control=False, source=None,
    )
    steps.append(("probe", cmd_probe, probe))
    campaign = out / "campaign-demo"
    steps.append(("analyze", cmd_analyze, argparse.Namespace(
        records=str(campaign / "records.jsonl"), out=str(out / "analysis"), zoo=str(out / "zoo.yaml"),
        signatures=None, repetitions=None, groups=str(out / "world.json"))))
    steps.append(("select", cmd_select, argparse.Namespace(
        matrix=str(out / "analysis" / "matrix.csv"), theta=0.85, cutoff=0.10, max_probes=None,
        out=str(out / "selection.json"), curve=str(out / "analysis" / "curve.csv"))))
    steps.append(("cluster", cmd_cluster, argparse.Namespace(
        fingerprints=str(out / "analysis" / "fingerprints.json"), probes=None, metadata=str(out / "targets.csv"),
        out=str(out / "analysis"), min_cluster_size=max(2, args.targets_per_profile), method="hdbscan",
        threshold=0.0)))
    steps.append(("report", cmd_report, argparse.Namespace(input=str(out / "analysis"), out=str(out / "report"),
                                                           curve=None)))
    for name, fn, ns in steps:
        print(f"== {name}")
        code = fn(ns)
        if code != EXIT_OK:
            return code
    return EXIT_OK


# -- wiring -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dpiprint", description="Fingerprint DPI middleboxes by how they resolve protocol ambiguities.")
    p.add_argument("--version", action="version", version=f"dpiprint {__version__}")
    p.add_argument("--config", help="YAML file whose keys provide defaults for the command's flags")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("generate", help="enumerate every candidate probe")
    g.add_argument("--protocol", choices=("http", "https"), default="http")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("select", help="pick a low-redundancy probe subset from an outcome matrix")
    s.add_argument("--matrix", required=True)
    s.add_argument("--theta", type=float, default=0.85)
    s.add_argument("--cutoff", type=float, default=0.10)
    s.add_argument("--max-probes", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--curve", help="also write the distance-vs-N curve CSV here")
    s.set_defaults(func=cmd_select)

    r = sub.add_parser("probe", help="run a measurement campaign")
    r.add_argument("--targets", required=True, help="target list CSV")
    r.add_argument("--probes", default="builtin:http", help="builtin:http|https, probe directory or selection JSON")
    r.add_argument("--out", required=True)
    r.add_argument("--campaign-id")
    r.add_argument("--repetitions", type=int, default=3)
    r.add_argument("--delay", type=float, help="seconds between probes (default 120; virtual in sim)")
    r.add_argument("--parallelism", type=int, default=1)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--transport", choices=("sim", "raw"), default="sim")
    r.add_argument("--source", help="client IPv4 address for the raw transport")
    r.add_argument("--zoo", help="zoo YAML for the sim transport (default: built-in zoo)")
    r.add_argument("--world", help="YAML/JSON mapping target key or address to profile ids on its path")
    r.add_argument("--pcap", action="store_true", help="also write one pcap per record")
    r.add_argument("--appended-control", action="store_true", help="append a Control request after each request")
    r.set_defaults(func=cmd_probe)

    a = sub.add_parser("analyze", help="turn records into verdicts and fingerprints")
    a.add_argument("--records", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--zoo")
    a.add_argument("--signatures", help="JSON blockpage signature file: {id: [substring, ...]}")
    a.add_argument("--repetitions", type=int, help="use only the first k repetitions")
    a.add_argument("--groups", help="JSON mapping target key to group id; writes matrix.csv")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("cluster", help="cluster fingerprints and project them to 2-D")
    c.add_argument("--fingerprints", required=True)
    c.add_argument("--probes", help="selection JSON restricting the bits used")
    c.add_argument("--metadata", help="target CSV or JSON with netblock/asn/country")
    c.add_argument("--min-cluster-size", type=int, default=5)
    c.add_argument("--method", choices=("hdbscan", "single-linkage"), default="hdbscan")
    c.add_argument("--threshold", type=float, default=0.0, help="single-linkage join distance")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_cluster)

    rp = sub.add_parser("report", help="render SVG figures from cluster outputs")
    rp.add_argument("--input", required=True, help="directory holding clusters.csv, mds.csv, histograms.csv")
    rp.add_argument("--curve", help="distance curve CSV from 'select --curve'")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_report)

    z = sub.add_parser("zoo", help="inspect or export simulator DPI profiles")
    z.add_argument("action", choices=("list", "show", "export", "validate"))
    z.add_argument("file", nargs="?")
    z.add_argument("--zoo")
    z.set_defaults(func=cmd_zoo)

    pf = sub.add_parser("preflight", help="check raw-transport prerequisites")
    pf.set_defaults(func=cmd_preflight)

    d = sub.add_parser("demo", help="full pipeline against the built-in zoo")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--targets-per-profile", type=int, default=4)
    d.add_argument("--repetitions", type=int, default=3)
    d.set_defaults(func=cmd_demo)
    return p


def _apply_config(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if args.config:
        doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise UsageError("config file must be a mapping")
        defaults = {k.replace("-", "_"): v for k, v in doc.items()}
        sub = parser._subparsers._group_actions[0].choices[args.command] if args.command else None
        if sub is not None:
            sub.set_defaults(**defaults)
            args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if not getattr(args, "func", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except UsageError as e:
        print(f"dpiprint: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # everything else is a runtime failure
        print(f"dpiprint: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
